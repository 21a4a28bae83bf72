import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tame.errors import ContractError
from tame.evaluate import (
    TRAJECTORY_HEADER,
    constant_baseline_ape,
    emit_confusion_csv,
    emit_trajectory_csv,
    evaluate,
    read_trajectory_csv,
    report_from_arrays,
)
from tame.frontend import SceneLabel
from tame.synth import Volume


class OraclePredictor:
    """Returns the ground truth (optionally perturbed) for every sample."""

    n_classes = 4

    def __init__(self, noise=0.0, seed=0, constant=None):
        self.noise, self.seed, self.constant = noise, seed, constant

    def predict(self, samples):
        pos = np.stack([lab.array for _, lab in samples]) if samples else np.zeros((0, 3))
        if self.constant is not None:
            pos = np.tile(self.constant, (len(samples), 1))
        pos = pos + self.noise * np.random.default_rng(self.seed).standard_normal(pos.shape)
        logits = np.zeros((len(samples), self.n_classes))
        logits[np.arange(len(samples)), [lab.class_index for _, lab in samples]] = 5.0
        return pos, logits


def fake_set(n, seed=0, volume=Volume()):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(volume.lo, volume.hi, (n, 3))
    return [(None, SceneLabel(tuple(p), int(c))) for p, c in zip(pos, rng.integers(0, 4, n))]


def test_perfect_predictor():
    r = evaluate(OraclePredictor(), fake_set(40))
    assert r.d_x == r.d_y == r.d_z == r.ape == 0.0
    assert r.acc == 1.0
    assert np.array_equal(r.confusion, np.diag(np.diag(r.confusion)))
    assert r.confusion.sum() == 40


def test_constant_mean_baseline():
    vol = Volume()
    r = evaluate(OraclePredictor(constant=vol.center), fake_set(2000, seed=1))
    closed_form = constant_baseline_ape(vol.extent)
    assert closed_form == pytest.approx((7 + 25 + 22) / 4)
    assert abs(r.ape - closed_form) / closed_form < 0.02


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.floats(0.0, 5.0), st.integers(0, 2**31))
def test_ape_is_axis_sum(n, noise, seed):
    r = evaluate(OraclePredictor(noise=noise, seed=seed), fake_set(n, seed))
    assert abs(r.ape - (r.d_x + r.d_y + r.d_z)) < 1e-9


def test_additive_single_sample():
    # one sample with per-axis errors 0.11, 0.30, 0.34
    r = report_from_arrays([[0.11, 0.30, 0.34]], [[0.0, 0.0, 0.0]], [[1.0, 0.0]], [0], 2)
    assert abs(r.ape - 0.75) < 1e-12
    assert abs(r.ape - (r.d_x + r.d_y + r.d_z)) < 1e-9


def test_order_invariance():
    data = fake_set(30, seed=2)
    perm = list(np.random.default_rng(3).permutation(30))
    a = evaluate(OraclePredictor(noise=1.0), data)

    class Fixed(OraclePredictor):
        def predict(self, samples):
            pos, logits = OraclePredictor(noise=1.0).predict(data)
            index = {id(s[1]): i for i, s in enumerate(data)}
            rows = [index[id(lab)] for _, lab in samples]
            return pos[rows], logits[rows]

    b = evaluate(Fixed(), [data[i] for i in perm])
    assert abs(a.ape - b.ape) < 1e-12 and a.acc == b.acc
    assert abs(a.d_y - b.d_y) < 1e-12


def test_label_reaching_beyond_model():
    bad = [(None, SceneLabel((0.0, 0.0, 2.0), 7))]
    with pytest.raises(ContractError):
        evaluate(OraclePredictor(), bad)
    with pytest.raises(ContractError):
        evaluate(OraclePredictor(), [])


def test_table_line_format():
    r = report_from_arrays([[1.0, 2.0, 3.0]], [[0.0, 0.0, 0.0]], [[1.0, 0.0]], [0], 2)
    assert r.table_line() == "Dx=1.000 Dy=2.000 Dz=3.000 APE=6.000 Acc=100.0%"


# -- CSV exports -----------------------------------------------------------------------
def test_trajectory_csv_empty(tmp_path):
    emit_trajectory_csv(OraclePredictor(), [], tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().strip() == ",".join(TRAJECTORY_HEADER)


def test_trajectory_csv_round_trip(tmp_path):
    data = fake_set(25, seed=4)
    model = OraclePredictor(noise=0.7)
    emit_trajectory_csv(model, data, tmp_path / "t.csv")
    truth, pred = read_trajectory_csv(tmp_path / "t.csv")
    assert truth.shape == pred.shape == (25, 3)
    d = np.abs(truth - pred).mean(axis=0)
    r = evaluate(model, data)
    assert np.max(np.abs(d - [r.d_x, r.d_y, r.d_z])) < 1e-9


def test_confusion_csv(tmp_path):
    r = evaluate(OraclePredictor(), fake_set(50, seed=5))
    names = ["a", "b", "c", "d"]
    emit_confusion_csv(r, names, tmp_path / "c.csv")
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    counts = np.array([[int(v) for v in row[1:]] for row in rows[1:]])
    assert rows[0][1:] == names
    assert counts.sum() == 50 and np.all(counts == np.diag(np.diag(counts)))
    emit_confusion_csv(r, names, tmp_path / "p.csv", normalized=True)
    rows = list(csv.reader(open(tmp_path / "p.csv")))
    for row in rows[1:]:
        total = sum(float(v) for v in row[1:])
        assert total == 0.0 or abs(total - 100.0) < 0.1
    with pytest.raises(ContractError):
        emit_confusion_csv(r, names[:3], tmp_path / "x.csv")
