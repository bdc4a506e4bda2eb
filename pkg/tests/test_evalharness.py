import csv
import io

import numpy as np
import pytest

from koopcon.condense import CondensedSet
from koopcon.datasets import LabeledImages, make_toy_dataset
from koopcon.errors import ConfigError, DataError, DimensionError
from koopcon.evalharness import (
    EvalConfig,
    EvalReport,
    evaluate,
    make_classifier,
    run_comparison,
    train_classifier,
    write_depth_csv,
)
from koopcon.tensor import Tensor

FAST = EvalConfig(epochs=20, lr=1e-2, repeats=1, classifier_width=4)


def black_and_white(per_class=4, size=8):
    images = np.concatenate([np.zeros((per_class, 1, size, size)), np.ones((per_class, 1, size, size))])
    labels = np.repeat([0, 1], per_class)
    return LabeledImages(images, labels, 2, "bw")


def test_separable_toy_reaches_full_train_accuracy():
    data = black_and_white()
    model = train_classifier(data, FAST, seed=0)
    assert evaluate(model, data) == 1.0


def test_zero_epochs_leaves_classifier_untouched():
    data = black_and_white()
    cfg = EvalConfig(epochs=0, classifier_width=4)
    trained = train_classifier(data, cfg, seed=5)
    fresh = make_classifier(data.geometry, 2, cfg, seed=5)
    for (name, a), (_, b) in zip(trained.named_parameters(), fresh.named_parameters()):
        assert np.array_equal(a.data, b.data), name


def test_training_is_deterministic():
    data = make_toy_dataset(class_count=3, per_class=4, size=8)
    cfg = EvalConfig(epochs=3, classifier_width=4)
    x = Tensor(data.images)
    a = train_classifier(data, cfg, seed=2)(x).data
    b = train_classifier(data, cfg, seed=2)(x).data
    assert a.tobytes() == b.tobytes()


def test_minibatch_path_covers_every_sample():
    data = black_and_white(per_class=5)
    cfg = EvalConfig(epochs=20, lr=1e-2, batch_size=3, classifier_width=4)
    assert evaluate(train_classifier(data, cfg, seed=1), data) == 1.0


class Oracle:
    """Predicts class 1 for bright images, 0 otherwise."""

    def __call__(self, x):
        bright = x.data.mean(axis=(1, 2, 3)) > 0.5
        return Tensor(np.stack([~bright, bright], axis=1).astype(float))


def test_evaluate_oracle_and_hand_count():
    data = black_and_white(per_class=3)
    assert evaluate(Oracle(), data) == 1.0
    flipped = LabeledImages(data.images, np.array([0, 0, 1, 1, 1, 0]), 2, "bw")
    # predictions are 0,0,0,1,1,1 -> matches at positions 0,1,3,4
    assert evaluate(Oracle(), flipped) == pytest.approx(4 / 6)


def test_evaluate_errors():
    data = black_and_white()
    model = make_classifier(data.geometry, 2, FAST, seed=0)
    with pytest.raises(DataError):
        evaluate(model, LabeledImages(np.zeros((0, 1, 8, 8)), np.zeros(0, dtype=int), 2, "e"))
    with pytest.raises(DimensionError):
        evaluate(model, black_and_white(size=12))


def test_config_validation():
    with pytest.raises(ConfigError):
        EvalConfig(repeats=0)
    with pytest.raises(ConfigError):
        EvalConfig(repeats=2, seeds=[1])
    assert EvalConfig(repeats=3, seed=10).seed_list() == [10, 11, 12]
    assert EvalConfig(repeats=2, seeds=[7, 3]).seed_list() == [7, 3]


def test_report_statistics_recompute():
    report = EvalReport([0, 1, 2], [0.8, 0.9, 1.0], [0.7, 0.7, 0.7], 10)
    rows = list(csv.reader(io.StringIO(report.to_csv())))
    assert rows[0] == ["row", "seed", "synth_accuracy", "real_accuracy", "gap"]
    synth = [float(r[2]) for r in rows[1:4]]
    assert float(rows[4][2]) == pytest.approx(np.mean(synth))
    assert float(rows[5][2]) == pytest.approx(np.std(synth))
    assert report.gaps == pytest.approx([0.1, 0.2, 0.3])
    assert "90.0" in report.to_table()


def test_single_repeat_has_zero_std():
    report = EvalReport([4], [0.5], [0.25], 1)
    assert report.synth_std == 0.0 and report.real_std == 0.0


def test_run_comparison_end_to_end():
    train = black_and_white(per_class=6)
    test = black_and_white(per_class=2)
    condensed = CondensedSet(np.concatenate([np.zeros((1, 1, 8, 8)), np.ones((1, 1, 8, 8))]), [0, 1], 2, 1)
    cfg = EvalConfig(epochs=20, lr=1e-2, repeats=2, classifier_width=4)
    report = run_comparison(train, test, condensed, cfg)
    assert report.seeds == [0, 1]
    assert report.synth_accuracy == [1.0, 1.0]
    assert len(report.real_accuracy) == 2
    again = run_comparison(train, test, condensed, cfg)
    assert again.synth_accuracy == report.synth_accuracy and again.real_accuracy == report.real_accuracy


def test_run_comparison_mismatch():
    train = black_and_white()
    wrong = CondensedSet(np.zeros((3, 1, 8, 8)), [0, 1, 2], 3, 1)
    with pytest.raises(DataError):
        run_comparison(train, train, wrong, FAST)
    wrong_size = CondensedSet(np.zeros((2, 1, 4, 4)), [0, 1], 2, 1)
    with pytest.raises(DimensionError):
        run_comparison(train, train, wrong_size, FAST)


def test_depth_csv(tmp_path):
    row = dict(depth="deep", img_per_class=10, synth_mean=0.8, synth_std=0.01,
               real_mean=0.82, real_std=0.02, conv_layers=9, extra="ignored")
    write_depth_csv(tmp_path / "d.csv", [row])
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "depth,img_per_class,synth_mean,synth_std,real_mean,real_std,conv_layers"
    assert lines[1].startswith("deep,10,0.8")
