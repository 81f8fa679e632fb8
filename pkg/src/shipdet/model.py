"""Full detector assembly: backbone -> CEM -> NAM -> neck -> head."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

from .backbone import Backbone, BackboneConfig
from .cem import CemBlock
from .head import Head
from .layers import Module, init_params
from .nam import InNcaBlock, NcaBlock
from .neck import NECKS, build_neck
from .tensor import Tensor

LEVEL_NAMES = ("C2", "C3", "C4", "C5")


@dataclass
class ModelConfig:
    base_width: int = 16
    depths: tuple[int, int, int, int] = (1, 1, 1, 1)
    in_channels: int = 1
    neck_width: int = 64
    cem: bool = True
    cem_mid: int | None = None
    nam: bool = True
    nam_variant: str = "nam"
    nam_recurrence: int = 2
    nam_pairs: tuple[tuple[int, int], ...] = ((2, 3), (4, 5))
    attention: str = "criss_cross"
    neck: str = "ccfpn"
    shared_head: bool = False
    seed: int = 0

    def __post_init__(self):
        self.depths = tuple(self.depths)
        self.nam_pairs = tuple(tuple(p) for p in self.nam_pairs)
        if self.neck not in NECKS:
            raise ValueError(f"neck must be one of {NECKS}, got {self.neck!r}")
        if self.nam_variant not in ("nam", "in_nam"):
            raise ValueError(f"nam_variant must be 'nam' or 'in_nam', got {self.nam_variant!r}")
        if self.base_width < 1 or self.neck_width < 1:
            raise ValueError("widths must be positive")
        for a, b in self.nam_pairs:
            if b != a + 1 or not 2 <= a <= 4:
                raise ValueError(f"NAM pair ({a}, {b}) must join adjacent levels within C2..C5")

    @property
    def backbone(self) -> BackboneConfig:
        return BackboneConfig(self.base_width, self.depths, self.in_channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["depths"] = list(self.depths)
        d["nam_pairs"] = [list(p) for p in self.nam_pairs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known - {"preset"}
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        base = dict(PRESETS[d["preset"]]) if "preset" in d else {}
        base.update({k: v for k, v in d.items() if k != "preset"})
        return cls(**base)

    @classmethod
    def preset(cls, name: str, **overrides) -> ModelConfig:
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; have {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


PRESETS: dict[str, dict] = {
    "tiny": dict(base_width=16, neck_width=64),
    "small": dict(base_width=32, neck_width=128),
}


class Detector(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.backbone = Backbone(cfg.backbone)
        ladder = cfg.backbone.ladder
        self.cems = [CemBlock(c, cfg.cem_mid) for c in ladder] if cfg.cem else []
        block = NcaBlock if cfg.nam_variant == "nam" else InNcaBlock
        self.nams = ([block(ladder[a - 2], cfg.nam_recurrence, cfg.attention) for a, _ in cfg.nam_pairs]
                     if cfg.nam else [])
        self.neck = build_neck(cfg.neck, ladder, cfg.neck_width)
        self.head = Head(self.neck.strides, cfg.neck_width, cfg.shared_head)

    @property
    def strides(self) -> tuple[int, ...]:
        return tuple(self.neck.strides)

    def features(self, image: Tensor) -> list[Tensor]:
        feats = list(self.backbone(image))
        if self.cems:
            feats = [cem(f) for cem, f in zip(self.cems, feats)]
        for (a, b), nam in zip(self.cfg.nam_pairs, self.nams):
            feats[a - 2], feats[b - 2] = nam(feats[a - 2], feats[b - 2])
        return feats

    def pyramid(self, image: Tensor) -> dict[int, Tensor]:
        return self.neck(*self.features(image))

    def __call__(self, image: Tensor):
        return self.head(self.pyramid(image))


def build_model(cfg: ModelConfig, seed: int | None = None) -> Detector:
    model = Detector(cfg)
    init_params(model, cfg.seed if seed is None else seed)
    return model
