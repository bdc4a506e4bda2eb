"""Per-class condensation training, checkpoints and the condensed-set container.

Container layout (``KPCN`` condensed sets, ``KPCK`` checkpoints)::

    magic        4 bytes ASCII
    version      u16 big-endian
    config hash  32 bytes (SHA-256 of the canonical config JSON)
    body         format specific, see below
    crc32        u32 big-endian over every preceding byte

KPCN body: M, n', c, h, w as big-endian u32; M * n' labels (u8); pixels as
little-endian f32 row-major; then a u32-length-prefixed UTF-8 JSON block
carrying provenance.

KPCK body: u32-length-prefixed JSON header (config + parameter manifest),
then every parameter as little-endian f64 in manifest order.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .datasets import LabeledImages, class_batch
from .errors import (
    ChecksumError,
    CompatibilityError,
    ConfigError,
    ContractError,
    DataError,
    FormatError,
    LengthError,
    NumericError,
)
from .losses import (
    LossWeights,
    covariance_loss,
    cross_entropy_loss,
    reconstruction_loss,
    sinkhorn_wasserstein,
    total_loss,
)
from .networks import DEPTH_PRESETS, CondenserHead, ConvNetClassifier, EncoderDecoder
from .optim import Adam
from .tensor import Tensor, concat, no_grad

log = logging.getLogger(__name__)

CONDENSED_MAGIC = b"KPCN"
CHECKPOINT_MAGIC = b"KPCK"
FORMAT_VERSION = 1
HISTORY_COLUMNS = ("epoch", "class", "l_re", "l_ce", "l_w", "l_cov", "total")


@dataclass(frozen=True)
class CondenseConfig:
    dataset: str = "mnist"
    n_b: int = 128
    img_per_class: int = 10
    depth: str = "shallow"
    latent_dim: int = 64
    epochs: int = 100
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    classifier_width: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.img_per_class < 1:
            raise ConfigError("img_per_class must be >= 1", key="img_per_class")
        if self.n_b < 1:
            raise ConfigError("n_b must be >= 1", key="n_b")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1", key="latent_dim")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0", key="epochs")
        if self.depth not in DEPTH_PRESETS:
            raise ConfigError(f"depth must be one of {sorted(DEPTH_PRESETS)}", key="depth")
        if self.n_b < self.img_per_class:
            log.warning("n_b=%d is smaller than img_per_class=%d", self.n_b, self.img_per_class)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "CondenseConfig":
        raw = dict(raw)
        raw["weights"] = LossWeights(**raw.get("weights", {}))
        return cls(**raw)

    def hash(self) -> bytes:
        return config_hash(self.to_dict())


def config_hash(mapping: dict) -> bytes:
    canonical = json.dumps(mapping, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).digest()


@dataclass
class CondensedSet:
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    img_per_class: int
    provenance: dict = field(default_factory=dict)
    config_hash: bytes = bytes(32)

    def __post_init__(self):
        # the container stores f32 pixels; keep values f32-representable so files round-trip exactly
        self.images = np.asarray(self.images, dtype=np.float32).astype(np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.class_count < 1 or self.img_per_class < 1:
            raise DataError(f"condensed set needs >= 1 class and image per class, got {self.class_count} x {self.img_per_class}")
        if not np.isfinite(self.images).all() or self.images.min() < 0.0 or self.images.max() > 1.0:
            raise DataError("condensed pixels must be finite and lie in [0, 1]")
        if self.labels.size and self.labels.min() < 0:
            raise DataError("condensed labels must be non-negative")
        counts = np.bincount(self.labels, minlength=self.class_count)
        if len(counts) != self.class_count or np.any(counts != self.img_per_class):
            raise DataError(f"condensed set must hold exactly {self.img_per_class} images per class, got {counts.tolist()}")

    def __len__(self):
        return len(self.labels)

    def as_labeled(self) -> LabeledImages:
        return LabeledImages(self.images, self.labels, self.class_count, "condensed")


@dataclass
class LossRecord:
    epoch: int
    class_id: int
    l_re: float
    l_ce: float
    l_w: float
    l_cov: float
    total: float


@dataclass
class LossHistory:
    records: List[LossRecord] = field(default_factory=list)
    # mean pairwise distance between condensed latents, averaged over classes, per epoch
    spread: List[float] = field(default_factory=list)

    def epoch_totals(self) -> np.ndarray:
        epochs = sorted({r.epoch for r in self.records})
        return np.array([np.mean([r.total for r in self.records if r.epoch == e]) for e in epochs])

    def epoch_mean(self, term: str) -> np.ndarray:
        epochs = sorted({r.epoch for r in self.records})
        return np.array([np.mean([getattr(r, term) for r in self.records if r.epoch == e]) for e in epochs])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(HISTORY_COLUMNS)
            for r in self.records:
                writer.writerow([r.epoch, r.class_id] + [repr(v) for v in (r.l_re, r.l_ce, r.l_w, r.l_cov, r.total)])

    def write_spread_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("epoch", "mean_pairwise_distance"))
            for epoch, value in enumerate(self.spread, start=1):
                writer.writerow([epoch, repr(value)])


@dataclass
class Components:
    autoencoder: EncoderDecoder
    head: CondenserHead
    classifier: ConvNetClassifier

    def named_parameters(self):
        for prefix, module in (("ae", self.autoencoder), ("head", self.head), ("clf", self.classifier)):
            for name, p in module.named_parameters():
                yield f"{prefix}.{name}", p

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for prefix, module in (("ae", self.autoencoder), ("head", self.head), ("clf", self.classifier)):
            module.load_state_dict(
                {k[len(prefix) + 1 :]: v for k, v in state.items() if k.startswith(prefix + ".")}
            )

    def condense(self, images: np.ndarray) -> Tuple[Tensor, Tensor, Tensor]:
        y = self.autoencoder.encode(Tensor(images))
        y_prime = self.head(y)
        return y, y_prime, self.autoencoder.decode(y_prime)


def build_components(cfg: CondenseConfig, geometry, class_count: int) -> Components:
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    return Components(
        EncoderDecoder(geometry, cfg.latent_dim, cfg.depth, np.random.default_rng(seeds[0])),
        CondenserHead(cfg.latent_dim, cfg.n_b, cfg.img_per_class, np.random.default_rng(seeds[1])),
        ConvNetClassifier(geometry, class_count, cfg.classifier_width, np.random.default_rng(seeds[2])),
    )


def _batch_seed(cfg: CondenseConfig, epoch: int, class_id: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([cfg.seed, epoch, class_id])


def _mean_pairwise_distance(y: np.ndarray) -> float:
    if len(y) < 2:
        return 0.0
    diff = y[:, None, :] - y[None, :, :]
    dist = np.sqrt((diff * diff).sum(-1))
    return float(dist.sum() / (len(y) * (len(y) - 1)))


def condensation_step(components: Components, images: np.ndarray, class_id: int, weights: LossWeights):
    """Forward pass for one class batch; returns (total, term values, condensed latents)."""
    ae, head, clf = components.autoencoder, components.head, components.classifier
    x = Tensor(images)
    y = ae.encode(x)
    y_prime = head(y)
    x_prime = ae.decode(y_prime)

    l_re = reconstruction_loss(x, ae.decode(y))
    labels = np.full(len(images) + len(y_prime), class_id)
    l_ce = cross_entropy_loss(clf(concat([x, x_prime])), labels)
    l_w, _ = sinkhorn_wasserstein(y, y_prime, weights)
    l_cov, _ = covariance_loss(y_prime)
    total = total_loss(l_re, l_ce, l_w, l_cov, weights)
    terms = {"l_re": l_re.item(), "l_ce": l_ce.item(), "l_w": l_w.item(), "l_cov": l_cov.item()}
    return total, terms, y_prime.data


def run_condensation(data: LabeledImages, cfg: CondenseConfig, progress=None):
    """Train all components jointly, one Adam step per (epoch, class).

    Returns ``(condensed_set, parameters, history)``. ``parameters`` is the
    flat state dict of autoencoder, condenser head and classifier.
    """
    counts = data.class_counts()
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise DataError(f"class {int(empty[0])} has no samples")
    components = build_components(cfg, data.geometry, data.class_count)
    optimizer = Adam(components.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)
    history = LossHistory()

    step = 0
    started = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        spreads = []
        for class_id in range(data.class_count):
            batch = class_batch(data, class_id, cfg.n_b, _batch_seed(cfg, epoch, class_id))
            try:
                total, terms, y_prime = condensation_step(components, batch.images, class_id, cfg.weights)
            except NumericError as exc:
                raise NumericError(f"divergence at step {step} (epoch {epoch}, class {class_id}): {exc}") from exc
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            history.records.append(LossRecord(epoch, class_id, total=total.item(), **terms))
            spreads.append(_mean_pairwise_distance(y_prime))
            step += 1
        history.spread.append(float(np.mean(spreads)))
        if progress is not None:
            progress(epoch, history)
        log.debug("epoch %d total %.5f (%.1fs)", epoch, history.epoch_totals()[-1], time.perf_counter() - started)

    condensed = export_pass(components, data, cfg, history)
    return condensed, components.state_dict(), history


def export_pass(components: Components, data: LabeledImages, cfg: CondenseConfig, history: Optional[LossHistory] = None) -> CondensedSet:
    """Decode condensed latents of a fixed seeded batch per class with frozen parameters."""
    images, labels = [], []
    with no_grad():
        for class_id in range(data.class_count):
            batch = class_batch(data, class_id, cfg.n_b, np.random.SeedSequence([cfg.seed, 0, class_id, 1]))
            _, _, x_prime = components.condense(batch.images)
            images.append(x_prime.data)
            labels.extend([class_id] * cfg.img_per_class)
    final = {}
    if history is not None and history.records:
        last_epoch = history.records[-1].epoch
        for term in ("l_re", "l_ce", "l_w", "l_cov", "total"):
            final[term] = float(np.mean([getattr(r, term) for r in history.records if r.epoch == last_epoch]))
    provenance = {
        "config": cfg.to_dict(),
        "config_hash": cfg.hash().hex(),
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "final_losses": final,
        "source": data.source_name,
    }
    return CondensedSet(np.concatenate(images), labels, data.class_count, cfg.img_per_class, provenance, cfg.hash())


# -- binary containers ----------------------------------------------------

def _seal(magic: bytes, digest: bytes, body: bytes) -> bytes:
    blob = magic + struct.pack(">H", FORMAT_VERSION) + digest + body
    return blob + struct.pack(">I", zlib.crc32(blob) & 0xFFFFFFFF)


def _open(blob: bytes, magic: bytes, what: str) -> Tuple[bytes, bytes]:
    """Validate envelope; returns (config hash, body)."""
    minimum = 4 + 2 + 32 + 4
    if len(blob) < minimum:
        raise LengthError(f"{what}: file too short for header", expected=minimum, actual=len(blob))
    if blob[:4] != magic:
        raise FormatError(f"{what}: bad magic {blob[:4]!r}, expected {magic!r}", offset=0)
    (version,) = struct.unpack(">H", blob[4:6])
    if version != FORMAT_VERSION:
        raise CompatibilityError(f"{what}: unsupported version {version} (this build reads {FORMAT_VERSION})")
    (stored,) = struct.unpack(">I", blob[-4:])
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored:
        raise ChecksumError(f"{what}: CRC-32 mismatch, file is corrupt", offset=len(blob) - 4)
    return blob[6:38], blob[38:-4]


def _read_json(body: bytes, offset: int, what: str) -> Tuple[dict, int]:
    if len(body) < offset + 4:
        raise LengthError(f"{what}: missing JSON length", expected=offset + 4, actual=len(body))
    (size,) = struct.unpack(">I", body[offset : offset + 4])
    end = offset + 4 + size
    if len(body) < end:
        raise LengthError(f"{what}: JSON block truncated", expected=end, actual=len(body))
    try:
        return json.loads(body[offset + 4 : end].decode()), end
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{what}: unreadable JSON block: {exc}", offset=offset + 4) from exc


def _json_block(obj) -> bytes:
    raw = json.dumps(obj, sort_keys=True).encode()
    return struct.pack(">I", len(raw)) + raw


def encode_condensed(cset: CondensedSet) -> bytes:
    if cset.class_count > 255:
        raise ContractError(f"the container stores labels as u8; {cset.class_count} classes do not fit")
    n, c, h, w = cset.images.shape
    header = struct.pack(">5I", cset.class_count, cset.img_per_class, c, h, w)
    labels = cset.labels.astype(np.uint8).tobytes()
    pixels = cset.images.astype("<f4").tobytes()
    return _seal(CONDENSED_MAGIC, cset.config_hash, header + labels + pixels + _json_block(cset.provenance))


def decode_condensed(blob: bytes) -> CondensedSet:
    digest, body = _open(bytes(blob), CONDENSED_MAGIC, "condensed set")
    if len(body) < 20:
        raise LengthError("condensed set: dimension header truncated", expected=20, actual=len(body))
    m, per_class, c, h, w = struct.unpack(">5I", body[:20])
    records = m * per_class
    pixel_bytes = records * c * h * w * 4
    end = 20 + records + pixel_bytes
    if len(body) < end:
        raise LengthError("condensed set: payload", expected=end, actual=len(body))
    labels = np.frombuffer(body, dtype=np.uint8, count=records, offset=20).astype(np.int64)
    pixels = np.frombuffer(body, dtype="<f4", count=records * c * h * w, offset=20 + records)
    provenance, used = _read_json(body, end, "condensed set")
    if used != len(body):
        raise LengthError("condensed set: trailing bytes", expected=used, actual=len(body))
    return CondensedSet(pixels.reshape(records, c, h, w), labels, m, per_class, provenance, digest)


def read_condensed_header(path) -> dict:
    blob = Path(path).read_bytes()
    digest, body = _open(blob, CONDENSED_MAGIC, "condensed set")
    if len(body) < 20:
        raise LengthError("condensed set: dimension header truncated", expected=20, actual=len(body))
    m, per_class, c, h, w = struct.unpack(">5I", body[:20])
    return {"classes": m, "img_per_class": per_class, "records": m * per_class,
            "channels": c, "height": h, "width": w, "config_hash": digest.hex()}


def export_condensed(cset: CondensedSet, path) -> None:
    Path(path).write_bytes(encode_condensed(cset))


def import_condensed(path) -> CondensedSet:
    return decode_condensed(Path(path).read_bytes())


def encode_checkpoint(params: Dict[str, np.ndarray], cfg: CondenseConfig, geometry, class_count: int) -> bytes:
    names = list(params)
    header = {
        "config": cfg.to_dict(),
        "geometry": list(geometry),
        "class_count": class_count,
        "params": [[name, list(params[name].shape)] for name in names],
    }
    payload = b"".join(np.ascontiguousarray(params[name], dtype="<f8").tobytes() for name in names)
    return _seal(CHECKPOINT_MAGIC, cfg.hash(), _json_block(header) + payload)


def decode_checkpoint(blob: bytes, expected: Optional[CondenseConfig] = None):
    digest, body = _open(bytes(blob), CHECKPOINT_MAGIC, "checkpoint")
    header, offset = _read_json(body, 0, "checkpoint")
    try:
        cfg = CondenseConfig.from_dict(header["config"])
    except (KeyError, TypeError, AttributeError, ConfigError) as exc:
        raise CompatibilityError(f"checkpoint: unreadable config: {exc}") from exc
    if cfg.hash() != digest:
        raise CompatibilityError("checkpoint: stored config does not match its hash")
    if expected is not None:
        for key in ("latent_dim", "depth", "n_b", "img_per_class", "classifier_width"):
            if getattr(expected, key) != getattr(cfg, key):
                raise CompatibilityError(
                    f"checkpoint: {key}={getattr(cfg, key)!r} but configuration asks for {getattr(expected, key)!r}"
                )
    params = {}
    try:
        manifest = [(str(name), tuple(int(e) for e in shape)) for name, shape in header["params"]]
        geometry = tuple(int(e) for e in header["geometry"])
        class_count = int(header["class_count"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"checkpoint: malformed header: {exc}") from exc
    for name, shape in manifest:
        if any(e < 0 for e in shape):
            raise FormatError(f"checkpoint: negative extent in shape of {name}")
        count = math.prod(shape)
        end = offset + 8 * count
        if len(body) < end:
            raise LengthError(f"checkpoint: parameter {name} truncated", expected=end, actual=len(body))
        params[name] = np.frombuffer(body, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset = end
    if offset != len(body):
        raise LengthError("checkpoint: trailing bytes", expected=offset, actual=len(body))
    return params, cfg, geometry, class_count


def save_checkpoint(params, cfg: CondenseConfig, path, geometry, class_count: int) -> None:
    Path(path).write_bytes(encode_checkpoint(params, cfg, geometry, class_count))


def load_checkpoint(path, expected: Optional[CondenseConfig] = None):
    """Returns ``(params, cfg, geometry, class_count)``."""
    return decode_checkpoint(Path(path).read_bytes(), expected)


def restore_components(params, cfg: CondenseConfig, geometry, class_count: int) -> Components:
    components = build_components(cfg, geometry, class_count)
    components.load_state_dict(params)
    return components
