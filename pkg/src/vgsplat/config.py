"""Training and densification hyperparameters.

The flat key/value form (``to_flat`` / ``from_flat``) is what config files and
the resolved-config echo use; densification keys sit beside the training keys.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path


@dataclass
class DensifyConfig:
    tau_th: float = 0.0004
    gamma: float = 2.0**11
    interval: int = 100
    start_step: int = 500
    end_step: int | None = None  # None -> half of the training iterations
    percent_dense: float = 0.01
    prune_opacity: float = 0.005
    split_factor: float = 1.6
    opacity_reset_interval: int = 3000
    opacity_reset_value: float = 0.01
    max_screen_radius: float | None = None

    def validate(self) -> None:
        if not self.tau_th > 0:
            raise ValueError("tau_th must be positive")
        if not self.gamma >= 0:
            raise ValueError("gamma must be non-negative")
        if self.interval < 1:
            raise ValueError("densification interval must be >= 1")
        if not 0 < self.percent_dense < 1:
            raise ValueError("percent_dense must lie in (0, 1)")
        if not self.split_factor > 1:
            raise ValueError("split_factor must exceed 1")


@dataclass
class TrainConfig:
    iterations: int = 7000
    seed: int = 0
    vgd: bool = True
    lhe: bool = True
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_log_scales: float = 5e-3
    lr_rotations: float = 1e-3
    lr_opacity: float = 5e-2
    lr_features: float = 2.5e-3
    lr_mlp: float = 2e-3
    lr_hash: float = 2e-3
    lambda_dssim: float = 0.2
    estimator: str = "recursive"  # or "exact"
    color_grad: str = "weighted"  # or "raw"
    noise_std: float = 0.02
    hash_levels: int = 8
    hash_base_res: int = 8
    hash_max_res: int = 64
    hash_log2_T: int = 19
    hash_features: int = 2
    feature_dim: int = 16
    mlp_hidden: int = 64
    background: tuple = (0.0, 0.0, 0.0)
    stats_interval: int = 100
    parallel: bool = False
    densify: DensifyConfig = field(default_factory=DensifyConfig)

    @property
    def effective_gamma(self) -> float:
        return self.densify.gamma if self.vgd else 0.0

    @property
    def densify_end(self) -> int:
        end = self.densify.end_step
        return self.iterations // 2 if end is None else end

    def validate(self) -> None:
        self.densify.validate()
        rates = [v for k, v in asdict(self).items() if k.startswith("lr_")]
        if not all(r > 0 and math.isfinite(r) for r in rates):
            raise ValueError("learning rates must be positive and finite")
        if not 0 <= self.lambda_dssim < 1:
            raise ValueError("lambda_dssim must lie in [0, 1)")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.estimator not in ("recursive", "exact"):
            raise ValueError(f"estimator must be 'recursive' or 'exact', got {self.estimator!r}")
        if self.color_grad not in ("weighted", "raw"):
            raise ValueError(f"color_grad must be 'weighted' or 'raw', got {self.color_grad!r}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")

    def to_flat(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "densify"}
        out["background"] = list(self.background)
        out.update(asdict(self.densify))
        return out

    @classmethod
    def from_flat(cls, flat: dict, base: TrainConfig | None = None) -> TrainConfig:
        base = base or cls()
        train_keys = {f.name for f in fields(cls)} - {"densify"}
        dens_keys = {f.name for f in fields(DensifyConfig)}
        unknown = set(flat) - train_keys - dens_keys
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        t = {k: v for k, v in flat.items() if k in train_keys}
        if "background" in t:
            t["background"] = tuple(float(x) for x in t["background"])
        d = {k: v for k, v in flat.items() if k in dens_keys}
        return replace(base, densify=replace(base.densify, **d), **t)

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_flat(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load_json(cls, path, base: TrainConfig | None = None) -> TrainConfig:
        return cls.from_flat(json.loads(Path(path).read_text()), base)
