"""Named model shapes for planning and experiments. Presets carry shapes only,
never weights; nominal parameter counts follow the rounded marketing sizes
(6.74 B priced as 7 B, and so on)."""

from __future__ import annotations

from dataclasses import dataclass

from .transformer import ModelConfig

__all__ = ["Preset", "PRESETS", "get_preset"]


@dataclass(frozen=True)
class Preset:
    name: str
    config: ModelConfig
    arch: str = "llama"          # counting inventory: llama | gpt2
    nominal_params: int | None = None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "arch": self.arch,
            "nominal_params": self.nominal_params,
            "config": self.config.to_dict(),
        }


PRESETS = {
    "llama2-7b": Preset(
        "llama2-7b",
        ModelConfig(vocab=32000, dim=4096, heads=32, layers=32, ffn_dim=11008, max_seq=4096),
        nominal_params=7_000_000_000,
    ),
    "llama2-13b": Preset(
        "llama2-13b",
        ModelConfig(vocab=32000, dim=5120, heads=40, layers=40, ffn_dim=13824, max_seq=4096),
        nominal_params=13_000_000_000,
    ),
    "llama2-70b": Preset(
        "llama2-70b",
        ModelConfig(vocab=32000, dim=8192, heads=64, layers=80, ffn_dim=28672, max_seq=4096),
        nominal_params=70_000_000_000,
    ),
    "gpt2-127m": Preset(
        "gpt2-127m",
        ModelConfig(vocab=50257, dim=768, heads=12, layers=12, ffn_dim=3072, max_seq=1024),
        arch="gpt2",
    ),
    "gpt2-1.5b": Preset(
        "gpt2-1.5b",
        ModelConfig(vocab=50257, dim=1600, heads=25, layers=48, ffn_dim=6400, max_seq=1024),
        arch="gpt2",
    ),
    "toy": Preset(
        "toy",
        ModelConfig(vocab=258, dim=64, heads=4, layers=2, ffn_dim=128, max_seq=128),
    ),
}


def get_preset(name: str) -> Preset:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}")
    return PRESETS[name]
