import math
import warnings

import numpy as np
import pytest

from mpiqe.config import desk_config
from mpiqe.data import synthesize_dataset
from mpiqe.metrics import EvalReport, cross_eval, data_efficiency_sweep, repeat_seed, run_protocol, split_indices
from mpiqe.model import build_model
from mpiqe.training import save_checkpoint


@pytest.fixture(scope="module")
def ds100():
    return synthesize_dataset(100, 0, size=16)


class Recorder:
    def __init__(self, values=None):
        self.calls = []
        self.values = values

    def __call__(self, train_ds, test_ds, seed):
        self.calls.append((train_ds, test_ds, seed))
        i = len(self.calls) - 1
        return self.values[i] if self.values else (0.5, 0.5)


def test_split_disjoint_and_covering():
    for seed in range(20):
        tr, te = split_indices(100, 0.8, seed)
        assert len(tr) == 80 and len(te) == 20
        assert not set(tr) & set(te)
        assert sorted(np.concatenate([tr, te])) == list(range(100))


def test_protocol_splits_and_seeds(ds100):
    rec = Recorder()
    report = run_protocol(None, ds100, repeats=10, train_eval=rec)
    seeds = [c[2] for c in rec.calls]
    assert len(set(seeds)) == 10 and report.seeds == seeds
    assert seeds == [repeat_seed(0, r) for r in range(10)]
    recs = {id(r): i for i, r in enumerate(ds100.records)}
    test_sets = []
    for train_ds, test_ds, _ in rec.calls:
        a = {recs[id(r)] for r in train_ds.records}
        b = {recs[id(r)] for r in test_ds.records}
        assert len(a) == 80 and len(b) == 20 and not a & b and a | b == set(range(100))
        test_sets.append(frozenset(b))
    assert len(set(test_sets)) == 10


def test_protocol_median_against_hand_value(ds100):
    values = [(0.1 * i, 1.0 - 0.05 * i) for i in (3, 9, 1, 7, 5, 0, 2, 8, 6, 4)]
    report = run_protocol(None, ds100, repeats=10, train_eval=Recorder(values))
    assert report.median_plcc == pytest.approx(0.45, abs=1e-15)
    assert report.median_srcc == pytest.approx(0.775, abs=1e-15)
    assert [r.plcc for r in report.per_repeat] == [v[0] for v in values]


def test_single_repeat_median_is_value(ds100):
    report = run_protocol(None, ds100, repeats=1, train_eval=Recorder([(0.3, 0.7)]))
    assert report.median_plcc == 0.3 and report.median_srcc == 0.7


def test_failed_repeat_recorded(ds100):
    def flaky(train_ds, test_ds, seed):
        if seed == repeat_seed(0, 1):
            raise FloatingPointError("diverged")
        return 0.5, 0.6

    report = run_protocol(None, ds100, repeats=3, train_eval=flaky)
    assert math.isnan(report.per_repeat[1].srcc) and "diverged" in report.per_repeat[1].error
    assert report.median_srcc == 0.6


def test_report_json_round_trip(ds100, tmp_path):
    report = run_protocol(None, ds100, repeats=3, train_eval=Recorder([(0.1, 0.2), (0.3, 0.4), (0.5, 0.6)]),
                          config=desk_config())
    report.save(tmp_path / "r.json")
    again = EvalReport.load(tmp_path / "r.json")
    assert again.per_repeat == report.per_repeat
    assert again.config_fingerprint == desk_config().fingerprint()
    assert again.median_srcc == report.median_srcc == 0.4


def test_sweep_subsamples_train_split(ds100):
    rec = Recorder()
    reports = data_efficiency_sweep(None, ds100, fractions=(0.6, 0.2), repeats=2, train_eval=rec)
    assert list(reports) == [0.2, 0.6]
    assert [len(c[0]) for c in rec.calls] == [16, 16, 48, 48]
    assert all(len(c[1]) == 20 for c in rec.calls)
    # same test split per repeat across fractions
    assert rec.calls[0][1].fingerprint() == rec.calls[2][1].fingerprint()
    with pytest.raises(ValueError):
        data_efficiency_sweep(None, ds100, fractions=(0.9,), train_eval=rec)


def test_default_routine_needs_config(ds100):
    with pytest.raises(ValueError, match="config"):
        run_protocol(build_model, ds100, repeats=1)


def test_cross_eval_warns_on_same_dataset(tmp_path):
    cfg = desk_config(crops_per_image=2)
    save_checkpoint(build_model(cfg), None, tmp_path / "ck")
    ds = synthesize_dataset(6, 2, name="kadid")
    with pytest.warns(UserWarning, match="training dataset"):
        p, s = cross_eval(tmp_path / "ck", "kadid", ds)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        p2, s2 = cross_eval(tmp_path / "ck", "live", ds)
    assert (p, s) == (p2, s2)
    assert -1 <= p <= 1 and -1 <= s <= 1
