"""Second-stage evaluation: matched classifiers trained on the condensed set
and on a same-size real subset, scored on held-out data."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np

from .condense import CondensedSet
from .datasets import LabeledImages, holdout_split
from .errors import ConfigError, DataError, DimensionError
from .losses import cross_entropy_loss
from .networks import ConvNetClassifier
from .optim import Adam
from .tensor import Tensor, no_grad


@dataclass(frozen=True)
class EvalConfig:
    epochs: int = 50
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    repeats: int = 5
    seeds: Optional[Sequence[int]] = None
    # training sets up to this size are trained full-batch, larger ones in minibatches of it
    batch_size: int = 1000
    classifier_width: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1", key="repeats")
        if self.epochs < 0:
            raise ConfigError("eval epochs must be >= 0", key="eval_epochs")
        if self.seeds is not None and len(self.seeds) != self.repeats:
            raise ConfigError(f"{len(self.seeds)} seeds given for {self.repeats} repeats", key="seeds")

    def seed_list(self) -> List[int]:
        if self.seeds is not None:
            return [int(s) for s in self.seeds]
        return [self.seed + k for k in range(self.repeats)]


def make_classifier(geometry, class_count: int, cfg: EvalConfig, seed: int) -> ConvNetClassifier:
    """The single factory both evaluation arms use."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    return ConvNetClassifier(geometry, class_count, cfg.classifier_width, rng)


def train_classifier(
    train: Union[LabeledImages, CondensedSet], cfg: EvalConfig, seed: int
) -> ConvNetClassifier:
    """Fresh seeded classifier trained with Adam on cross-entropy."""
    if isinstance(train, CondensedSet):
        train = train.as_labeled()
    if len(train) == 0:
        raise DataError("cannot train a classifier on an empty set")
    model = make_classifier(train.geometry, train.class_count, cfg, seed)
    optimizer = Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    n = len(train)
    for _ in range(cfg.epochs):
        order = np.arange(n) if n <= cfg.batch_size else rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss = cross_entropy_loss(model(Tensor(train.images[idx])), train.labels[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
    return model


def predict(model, images: np.ndarray, chunk: int = 250) -> np.ndarray:
    out = []
    with no_grad():
        for start in range(0, len(images), chunk):
            out.append(model(Tensor(images[start : start + chunk])).data.argmax(axis=1))
    return np.concatenate(out) if out else np.empty(0, dtype=np.int64)


def evaluate(model, test: LabeledImages) -> float:
    """Fraction of test samples whose argmax logit equals the label."""
    if len(test) == 0:
        raise DataError("cannot evaluate on an empty test set")
    geometry = getattr(model, "geometry", None)
    if geometry is not None and tuple(geometry) != test.geometry:
        raise DimensionError(f"model expects {geometry} images, test set has {test.geometry}")
    return float(np.mean(predict(model, test.images) == test.labels))


@dataclass
class EvalReport:
    seeds: List[int]
    synth_accuracy: List[float]
    real_accuracy: List[float]
    img_per_class: int
    runtime_seconds: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def synth_mean(self) -> float:
        return float(np.mean(self.synth_accuracy))

    @property
    def synth_std(self) -> float:
        return float(np.std(self.synth_accuracy))

    @property
    def real_mean(self) -> float:
        return float(np.mean(self.real_accuracy))

    @property
    def real_std(self) -> float:
        return float(np.std(self.real_accuracy))

    @property
    def gaps(self) -> List[float]:
        return [s - r for s, r in zip(self.synth_accuracy, self.real_accuracy)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(("row", "seed", "synth_accuracy", "real_accuracy", "gap"))
        for seed, s, r, g in zip(self.seeds, self.synth_accuracy, self.real_accuracy, self.gaps):
            writer.writerow(("seed", seed, repr(s), repr(r), repr(g)))
        writer.writerow(("mean", "", repr(self.synth_mean), repr(self.real_mean), repr(float(np.mean(self.gaps)))))
        writer.writerow(("std", "", repr(self.synth_std), repr(self.real_std), repr(float(np.std(self.gaps)))))
        return buf.getvalue()

    def to_table(self) -> str:
        name = self.meta.get("dataset", "dataset")
        lines = [
            f"Classification accuracy on {name} ({len(self.seeds)} runs, mean ± std, %)",
            f"{'Img/Cls':>8} | {'Condensed':>12} | {'Real subset':>12} | {'Gap':>7}",
            "-" * 50,
            f"{self.img_per_class:>8} | {100 * self.synth_mean:6.1f} ± {100 * self.synth_std:3.1f} | "
            f"{100 * self.real_mean:6.1f} ± {100 * self.real_std:3.1f} | "
            f"{100 * (self.synth_mean - self.real_mean):+6.1f}",
        ]
        return "\n".join(lines) + "\n"


def run_comparison(
    train: LabeledImages, test: LabeledImages, condensed: CondensedSet, cfg: EvalConfig
) -> EvalReport:
    """Train both arms for every seed and score them on ``test``."""
    per_class = condensed.img_per_class
    if condensed.class_count != train.class_count:
        raise DataError(f"condensed set has {condensed.class_count} classes, training data {train.class_count}")
    if condensed.images.shape[1:] != train.images.shape[1:]:
        raise DimensionError(f"condensed images {condensed.images.shape[1:]} vs data {train.images.shape[1:]}")
    started = time.perf_counter()
    seeds = cfg.seed_list()
    synth, real = [], []
    for seed in seeds:
        subset, _ = holdout_split(train, per_class, np.random.SeedSequence([seed, 3]))
        real.append(evaluate(train_classifier(subset, cfg, seed), test))
        synth.append(evaluate(train_classifier(condensed, cfg, seed), test))
    return EvalReport(
        seeds,
        synth,
        real,
        per_class,
        time.perf_counter() - started,
        {"dataset": train.source_name.split(":")[0], "provenance": condensed.provenance},
    )


def write_depth_csv(path, rows: Sequence[dict]) -> None:
    """Accuracy per autoencoder depth preset (one row per preset and Img/Cls)."""
    columns = ("depth", "img_per_class", "synth_mean", "synth_std", "real_mean", "real_std", "conv_layers")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in columns})
