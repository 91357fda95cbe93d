"""Run configuration: a flat key=value text file plus CLI overrides.

Unknown keys are rejected so typos fail loudly. All keys are optional; the
documented defaults below apply otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, fields as dc_fields
from pathlib import Path
from typing import Optional

from .losses import LossWeights
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # training hyperparameters (see TrainConfig for semantics)
    mode: str = "image"
    iterations: int = 2000
    steps: int = 10
    batch_size: int = 4
    gamma: float = 0.99
    tau: float = 0.005
    eta: float = 1e-4
    eta_q: float = 3e-4
    eta_phi: float = 3e-4
    alpha_init: float = 0.2
    replay_capacity: int = 10_000
    reward_scale: float = 1e5
    seed: int = 0
    resolution: int = 64
    save_every: int = 500
    # loss weights
    lam: float = 1e5
    beta: float = 1e-7
    zeta: float = 1e2
    # paths
    content_dir: Optional[str] = None
    frames_dir: Optional[str] = None
    style_image: Optional[str] = None
    out_dir: str = "out"
    checkpoint: Optional[str] = None
    feature_weights: Optional[str] = None

    def loss_weights(self) -> LossWeights:
        return LossWeights(lam=self.lam, beta=self.beta, zeta=self.zeta)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            mode=self.mode, iterations=self.iterations, episode_len=self.steps,
            batch_size=self.batch_size, gamma=self.gamma, tau=self.tau,
            eta=self.eta, eta_q=self.eta_q, eta_phi=self.eta_phi,
            alpha_init=self.alpha_init, replay_capacity=self.replay_capacity,
            reward_scale=self.reward_scale, seed=self.seed,
            resolution=self.resolution, save_every=self.save_every,
        )


# config-file key -> dataclass field (lambda is a Python keyword)
_KEY_MAP = {"lambda": "lam"}
_FIELDS = {f.name: f.type for f in dc_fields(RunConfig)}


def parse_value(field: str, raw: str):
    raw = raw.strip()
    kind = _FIELDS[field]
    if field in ("content_dir", "frames_dir", "style_image", "checkpoint",
                 "feature_weights", "out_dir"):
        return raw
    if field == "mode":
        if raw not in ("image", "video"):
            raise ConfigError(f"mode must be image or video, got {raw!r}")
        return raw
    if kind == "int" or isinstance(getattr(RunConfig, field, None), int):
        return int(raw)
    return float(raw)


def load_config(path) -> RunConfig:
    cfg = RunConfig()
    apply_file(cfg, path)
    return cfg


def apply_file(cfg: RunConfig, path) -> None:
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        field = _KEY_MAP.get(key, key)
        if field not in _FIELDS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            setattr(cfg, field, parse_value(field, raw))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from exc


def apply_overrides(cfg: RunConfig, pairs: dict) -> None:
    """CLI flags override file values; None entries are ignored."""
    for key, value in pairs.items():
        if value is None:
            continue
        field = _KEY_MAP.get(key, key)
        if field not in _FIELDS:
            raise ConfigError(f"unknown override {key!r}")
        setattr(cfg, field, value)
