import struct
import zlib

import numpy as np
import pytest

from koopcon.condense import (
    CondenseConfig,
    CondensedSet,
    build_components,
    condensation_step,
    decode_checkpoint,
    decode_condensed,
    encode_checkpoint,
    encode_condensed,
    export_condensed,
    import_condensed,
    load_checkpoint,
    read_condensed_header,
    restore_components,
    run_condensation,
    save_checkpoint,
)
from koopcon.datasets import class_batch, make_toy_dataset
from koopcon.errors import (
    ChecksumError,
    CompatibilityError,
    ConfigError,
    ContractError,
    DataError,
    FormatError,
    LengthError,
)
from koopcon.losses import LossWeights
from koopcon.tensor import Tensor


def tiny_config(**overrides):
    base = dict(dataset="toy", n_b=4, img_per_class=2, latent_dim=4, epochs=2, classifier_width=4, seed=3)
    base.update(overrides)
    return CondenseConfig(**base)


@pytest.fixture(scope="module")
def tiny_run():
    data = make_toy_dataset(class_count=2, per_class=6)
    cfg = tiny_config()
    return data, cfg, run_condensation(data, cfg)


def test_smoke_single_class_single_epoch():
    data = make_toy_dataset(class_count=1, per_class=6)
    cset, params, history = run_condensation(data, tiny_config(epochs=1))
    assert cset.images.shape == (2, 1, 16, 16)
    assert cset.labels.tolist() == [0, 0]
    assert len(history.records) == 1 and len(history.spread) == 1
    assert np.isfinite(history.records[0].total)
    assert params


def test_condensed_counts_and_range(tiny_run):
    data, cfg, (cset, _, history) = tiny_run
    assert np.bincount(cset.labels).tolist() == [cfg.img_per_class] * data.class_count
    assert 0.0 <= cset.images.min() and cset.images.max() <= 1.0
    assert len(history.spread) == cfg.epochs
    assert len(history.records) == cfg.epochs * data.class_count


def test_run_is_deterministic(tiny_run):
    data, cfg, (cset, params, history) = tiny_run
    again, params2, history2 = run_condensation(data, cfg)
    assert encode_condensed(cset) == encode_condensed(again)
    assert all(np.array_equal(params[k], params2[k]) for k in params)
    assert [r.total for r in history.records] == [r.total for r in history2.records]


def test_seed_changes_result(tiny_run):
    data, cfg, (cset, _, _) = tiny_run
    other, _, _ = run_condensation(data, tiny_config(seed=cfg.seed + 1))
    assert not np.array_equal(cset.images, other.images)


def test_zero_epochs_still_exports():
    data = make_toy_dataset(class_count=2, per_class=4)
    cset, _, history = run_condensation(data, tiny_config(epochs=0))
    assert len(cset) == 4 and history.records == []
    assert cset.provenance["final_losses"] == {}


def test_empty_class_rejected():
    data = make_toy_dataset(class_count=2, per_class=3)
    data.labels[:] = 0
    with pytest.raises(DataError, match="class 1"):
        run_condensation(data, tiny_config())


def test_history_csv_layout(tiny_run, tmp_path):
    _, cfg, (_, _, history) = tiny_run
    history.write_csv(tmp_path / "h.csv")
    history.write_spread_csv(tmp_path / "s.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,class,l_re,l_ce,l_w,l_cov,total"
    assert len(lines) == 1 + len(history.records)
    assert len((tmp_path / "s.csv").read_text().splitlines()) == 1 + cfg.epochs


# -- which parameters each loss term reaches ----------------------------------

def _group(name):
    if name.startswith(("ae.encoder.", "ae.enc_head.")):
        return "encoder"
    if name.startswith(("ae.decoder.", "ae.dec_head.")):
        return "decoder"
    return name.split(".")[0]


@pytest.mark.parametrize(
    "alphas,reached",
    [
        ((1, 0, 0, 0), {"encoder", "decoder"}),
        ((0, 1, 0, 0), {"encoder", "decoder", "head", "clf"}),
        ((0, 0, 1, 0), {"encoder", "head"}),
        ((0, 0, 0, 1), {"encoder", "head"}),
    ],
)
def test_gradient_accounting_per_term(alphas, reached):
    data = make_toy_dataset(class_count=2, per_class=6, seed=4)
    cfg = tiny_config()
    components = build_components(cfg, data.geometry, data.class_count)
    weights = LossWeights(*alphas)
    batch = class_batch(data, 1, cfg.n_b, seed=0)
    total, _, _ = condensation_step(components, batch.images, 1, weights)
    for p in components.parameters():
        p.grad = None
    total.backward()
    touched = {}
    for name, p in components.named_parameters():
        nonzero = p.grad is not None and np.any(p.grad != 0)
        touched.setdefault(_group(name), []).append(nonzero)
    for group, flags in touched.items():
        if group in reached:
            assert any(flags), f"{group} should receive gradient from {alphas}"
        else:
            assert not any(flags), f"{group} should not receive gradient from {alphas}"


# -- condensed-set container ---------------------------------------------------

def make_cset(m=3, per_class=2, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.uniform(size=(m * per_class, 1, 4, 4))
    labels = np.repeat(np.arange(m), per_class)
    provenance = {"seed": seed, "note": "unit", "final_losses": {"total": 0.5}}
    return CondensedSet(images, labels, m, per_class, provenance, bytes(range(32)))


def test_condensed_round_trip(tmp_path):
    cset = make_cset()
    path = tmp_path / "c.kpcn"
    export_condensed(cset, path)
    back = import_condensed(path)
    assert np.array_equal(back.images, cset.images)
    assert np.array_equal(back.labels, cset.labels)
    assert back.provenance == cset.provenance
    assert back.config_hash == cset.config_hash
    assert encode_condensed(back) == path.read_bytes()


def test_condensed_header_reports_records(tmp_path):
    path = tmp_path / "c.kpcn"
    export_condensed(make_cset(m=10, per_class=10), path)
    header = read_condensed_header(path)
    assert header["records"] == 100
    assert (header["classes"], header["img_per_class"]) == (10, 10)
    assert header["config_hash"] == bytes(range(32)).hex()


def test_condensed_quantised_to_f32():
    cset = make_cset()
    assert np.array_equal(cset.images, cset.images.astype(np.float32))


def test_condensed_corrupt_byte():
    blob = bytearray(encode_condensed(make_cset()))
    blob[60] ^= 0x01
    with pytest.raises(ChecksumError):
        decode_condensed(bytes(blob))


def test_condensed_truncated_and_magic():
    blob = encode_condensed(make_cset())
    for cut in (0, 3, 10, 45, len(blob) - 1):
        with pytest.raises(FormatError):
            decode_condensed(blob[:cut])
    with pytest.raises(FormatError, match="magic"):
        decode_condensed(b"XXXX" + blob[4:])


def test_condensed_invariants():
    with pytest.raises(DataError):
        CondensedSet(np.zeros((3, 1, 2, 2)), np.array([0, 0, 1]), 2, 2)
    with pytest.raises(DataError):
        CondensedSet(np.full((2, 1, 2, 2), 1.5), np.array([0, 1]), 2, 1)
    with pytest.raises(DataError):
        CondensedSet(np.zeros((0, 1, 2, 2)), np.zeros(0, dtype=int), 0, 1)
    many = CondensedSet(np.zeros((256, 1, 1, 1)), np.arange(256), 256, 1)
    with pytest.raises(ContractError):
        encode_condensed(many)


# -- checkpoints ---------------------------------------------------------------

def test_checkpoint_forward_is_bit_identical(tiny_run, tmp_path):
    data, cfg, (_, params, _) = tiny_run
    path = tmp_path / "ck.kpck"
    save_checkpoint(params, cfg, path, data.geometry, data.class_count)
    loaded, cfg2, geometry, class_count = load_checkpoint(path, expected=cfg)
    assert cfg2 == cfg and geometry == data.geometry and class_count == data.class_count
    a = restore_components(params, cfg, data.geometry, data.class_count)
    b = restore_components(loaded, cfg2, geometry, class_count)
    x = data.images[:4]
    for left, right in zip(a.condense(x), b.condense(x)):
        assert left.data.tobytes() == right.data.tobytes()
    assert a.classifier(Tensor(x)).data.tobytes() == b.classifier(Tensor(x)).data.tobytes()


def test_checkpoint_corrupt_byte(tiny_run):
    data, cfg, (_, params, _) = tiny_run
    blob = bytearray(encode_checkpoint(params, cfg, data.geometry, data.class_count))
    blob[len(blob) // 2] ^= 0x40
    with pytest.raises(ChecksumError):
        decode_checkpoint(bytes(blob))


def test_checkpoint_latent_mismatch(tiny_run):
    data, cfg, (_, params, _) = tiny_run
    blob = encode_checkpoint(params, cfg, data.geometry, data.class_count)
    with pytest.raises(CompatibilityError, match="latent_dim"):
        decode_checkpoint(blob, expected=tiny_config(latent_dim=8))


def test_checkpoint_truncated(tiny_run):
    data, cfg, (_, params, _) = tiny_run
    blob = encode_checkpoint(params, cfg, data.geometry, data.class_count)
    with pytest.raises(FormatError):
        decode_checkpoint(blob[:-9])


def test_checkpoint_length_error_fields():
    cfg = tiny_config()
    blob = encode_checkpoint({"w": np.zeros(3)}, cfg, (1, 16, 16), 2)
    # drop the CRC and one parameter byte, then reseal so only the length check fires
    body = blob[:-5]
    resealed = body + struct.pack(">I", zlib.crc32(body))
    with pytest.raises(LengthError) as info:
        decode_checkpoint(resealed)
    assert info.value.expected - info.value.actual == 1


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny_config(img_per_class=0)
    with pytest.raises(ConfigError):
        tiny_config(depth="wide")
    with pytest.raises(ConfigError):
        LossWeights(alpha2=-1)
    assert tiny_config().hash() == CondenseConfig.from_dict(tiny_config().to_dict()).hash()


# -- descent on the 2-class constant-image set -----------------------------------

@pytest.fixture(scope="module")
def toy_descent():
    data = make_toy_dataset(class_count=2, per_class=8)
    cfg = CondenseConfig(dataset="toy", n_b=8, img_per_class=2, latent_dim=2, epochs=200, classifier_width=16)
    return run_condensation(data, cfg)[2]


def test_toy_total_loss_descends(toy_descent):
    totals = toy_descent.epoch_totals()
    assert len(totals) == 200
    assert totals[-1] < totals[0]
    for term in ("l_re", "l_ce", "l_w", "l_cov"):
        assert np.all(np.isfinite(toy_descent.epoch_mean(term)))


def test_toy_wasserstein_trend(toy_descent):
    l_w = toy_descent.epoch_mean("l_w")
    assert l_w[-1] < l_w[0]
    assert len(toy_descent.spread) == 200
