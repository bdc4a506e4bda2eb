"""Run configuration: a flat JSON object of scalars, validated and hashed."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .condense import CondenseConfig
from .errors import ConfigError
from .evalharness import EvalConfig
from .losses import LossWeights


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=True, frozen=True)

    dataset: Literal["mnist", "fashion_mnist", "cifar10", "toy"] = "mnist"
    data_dir: str = "data/mnist"
    output_dir: str = "out"
    seed: int = Field(0, ge=0)
    # keep at most this many training samples per class (None: all)
    train_per_class: Optional[int] = Field(None, ge=1)

    img_per_class: int = Field(10, ge=1, le=255)
    n_b: int = Field(128, ge=1)
    depth: Literal["shallow", "medium", "deep"] = "shallow"
    latent_dim: int = Field(64, ge=1)
    epochs: int = Field(100, ge=0)
    classifier_width: int = Field(128, ge=1)

    alpha0: float = Field(1.0, ge=0)
    alpha1: float = Field(0.1, ge=0)
    alpha2: float = Field(1.0, ge=0)
    alpha3: float = Field(0.01, ge=0)
    sinkhorn_epsilon: Optional[float] = Field(None, gt=0)
    sinkhorn_relative_epsilon: float = Field(0.05, gt=0)
    sinkhorn_max_iters: int = Field(200, ge=1)
    sinkhorn_tolerance: float = Field(1e-6, gt=0)

    lr: float = Field(1e-3, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)

    eval_epochs: int = Field(50, ge=0)
    eval_lr: float = Field(1e-3, gt=0)
    eval_batch_size: int = Field(1000, ge=1)
    repeats: int = Field(5, ge=1)

    toy_classes: int = Field(2, ge=1, le=255)
    toy_per_class: int = Field(8, ge=1)
    toy_size: int = Field(16, ge=8)

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            self.alpha0, self.alpha1, self.alpha2, self.alpha3,
            self.sinkhorn_epsilon, self.sinkhorn_relative_epsilon,
            self.sinkhorn_max_iters, self.sinkhorn_tolerance,
        )

    def condense_config(self) -> CondenseConfig:
        return CondenseConfig(
            dataset=self.dataset,
            n_b=self.n_b,
            img_per_class=self.img_per_class,
            depth=self.depth,
            latent_dim=self.latent_dim,
            epochs=self.epochs,
            weights=self.loss_weights(),
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            adam_eps=self.adam_eps,
            classifier_width=self.classifier_width,
            seed=self.seed,
        )

    def eval_config(self) -> EvalConfig:
        return EvalConfig(
            epochs=self.eval_epochs,
            lr=self.eval_lr,
            beta1=self.beta1,
            beta2=self.beta2,
            adam_eps=self.adam_eps,
            repeats=self.repeats,
            batch_size=self.eval_batch_size,
            classifier_width=self.classifier_width,
            seed=self.seed,
        )


def _describe(error: dict) -> ConfigError:
    key = ".".join(str(p) for p in error["loc"]) or "<root>"
    kind = error["type"]
    if kind == "extra_forbidden":
        return ConfigError(f"unknown config key {key!r}", key=key)
    return ConfigError(f"config key {key!r}: {error['msg']} (got {error.get('input')!r})", key=key)


def parse_config(raw) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    # JSON has no int/float distinction for whole numbers such as 1 or 0
    coerced = {}
    for key, value in raw.items():
        field = RunConfig.model_fields.get(key)
        if field is not None and isinstance(value, int) and not isinstance(value, bool):
            if field.annotation in (float, Optional[float]):
                value = float(value)
        coerced[key] = value
    try:
        return RunConfig(**coerced)
    except ValidationError as exc:
        raise _describe(exc.errors()[0]) from None


def load_config(path) -> RunConfig:
    """Read, validate and default-fill a JSON run configuration."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror or exc}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return parse_config(raw)
