import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from morphoeval.profiles import DatasetError
from morphoeval.qc import (
    QcConfig,
    batch_control_distances,
    batch_control_filter,
    cell_count_filter,
    cell_count_threshold,
    qc_mask,
    write_qc_report,
)
from morphoeval.synth import SynthConfig, generate

from helpers import make_set, unit


def _batches_with_means(means):
    """One control per batch at 0 degrees plus two wells at a fixed cosine distance from it."""
    X, perts, batches = [], [], []
    for b, delta in enumerate(means):
        angle = math.degrees(math.acos(1.0 - delta))
        X += [unit(0), unit(angle), unit(-angle)]
        perts += ["DMSO", f"c{b}", f"d{b}"]
        batches += [f"b{b}"] * 3
    return make_set(X, perts, batches=batches)


def _oracle_distances(ps):
    """Nearest same-batch control by explicit loops."""
    X = ps.features
    out = {}
    for batch in sorted(set(ps.column("batch"))):
        rows = [i for i in range(ps.n_wells) if ps.column("batch")[i] == batch]
        ctrls = [i for i in rows if ps.is_control[i]]
        dists = []
        for i in rows:
            cands = [c for c in ctrls if c != i]
            if not cands:
                continue
            cos = [X[i] @ X[c] / (np.linalg.norm(X[i]) * np.linalg.norm(X[c])) for c in cands]
            dists.append(1.0 - max(cos))
        out[batch] = float(np.mean(dists))
    return out


class TestBatchControlFilter:
    def test_outlier_batch_removed(self):
        ps = _batches_with_means([0.10, 0.12, 0.45])
        stats = batch_control_distances(ps)
        np.testing.assert_allclose([stats["b0"], stats["b1"], stats["b2"]], [0.10, 0.12, 0.45], atol=1e-12)
        kept, removed = batch_control_filter(ps)
        assert removed == ["b2"]
        assert set(kept.column("batch")) == {"b0", "b1"}

    def test_identical_batches_untouched(self):
        kept, removed = batch_control_filter(_batches_with_means([0.3, 0.3, 0.3]))
        assert removed == [] and kept.n_wells == 9

    def test_absolute_threshold_mode(self):
        _, removed = batch_control_filter(
            _batches_with_means([0.25, 0.3, 0.35]), QcConfig(absolute_threshold=True)
        )
        assert removed == ["b0", "b1", "b2"]

    def test_batch_without_control_retained(self, caplog):
        ps = make_set([unit(0), unit(5), unit(90), unit(95)], ["DMSO", "a", "b", "c"],
                      batches=["b0", "b0", "b1", "b1"])
        kept, removed = batch_control_filter(ps)
        assert removed == [] and kept.n_wells == 4
        assert "no negative control" in caplog.text

    def test_noisy_control_batch_removed(self):
        cfg = SynthConfig(seed=4, n_sources=1, batches_per_source=5, plates_per_batch=1,
                          effect_sigma=0.2, batch_sigma=0.0, noise_sigma=0.05, dim=16)
        ps, _ = generate(cfg)
        # shift the whole space away from the origin so wells are close in angle, then
        # scramble the controls of one batch
        X = ps.features + 3.0
        bad = (ps.column("batch") == "S0_B2") & ps.is_control
        X[bad] = np.random.default_rng(1).normal(0, 3.0, (bad.sum(), X.shape[1]))
        noisy = ps.with_features(X)
        oracle = _oracle_distances(noisy)
        got = batch_control_distances(noisy)
        assert got.keys() == oracle.keys()
        for b in got:
            assert got[b] == pytest.approx(oracle[b], abs=1e-12)
        assert oracle["S0_B2"] > np.median(list(oracle.values())) + 0.2
        _, removed = batch_control_filter(noisy)
        assert removed == ["S0_B2"]

    @settings(max_examples=30, deadline=None)
    @given(means=st.lists(st.floats(0.01, 0.9), min_size=2, max_size=7))
    def test_idempotent_and_rows_unchanged(self, means):
        ps = _batches_with_means(means)
        once, _ = batch_control_filter(ps)
        twice, removed = batch_control_filter(once)
        assert removed == []
        assert once.equals(twice)
        ids = list(ps.column("well_id"))
        for i, w in enumerate(once.column("well_id")):
            assert once.features[i].tobytes() == ps.features[ids.index(w)].tobytes()

    @settings(max_examples=200, deadline=None)
    @given(means=st.lists(st.floats(0.01, 0.9), min_size=1, max_size=8))
    def test_batch_at_baseline_never_removed(self, means):
        ps = _batches_with_means(means + [float(np.median(means))] * (len(means) % 2 == 0))
        stats = batch_control_distances(ps)
        baseline = float(np.median(list(stats.values())))
        _, removed = batch_control_filter(ps)
        assert not [b for b in removed if stats[b] == baseline]


def _quantile_oracle(values, q):
    """Sorted-order linear interpolation: position h = (n - 1) * q / 100."""
    x = sorted(values)
    h = (len(x) - 1) * q / 100.0
    lo = math.floor(h)
    hi = min(lo + 1, len(x) - 1)
    return x[lo] + (h - lo) * (x[hi] - x[lo])


def _count_set(counts):
    n = len(counts)
    return make_set(np.ones((n, 2)), [f"c{i}" for i in range(n)], counts=counts)


class TestCellCountFilter:
    def test_one_to_hundred(self):
        ps = _count_set(list(range(1, 101)))
        assert cell_count_threshold(ps) == pytest.approx(_quantile_oracle(range(1, 101), 5.0), abs=1e-12)
        assert cell_count_threshold(ps) == pytest.approx(5.95, abs=1e-12)
        kept, removed = cell_count_filter(ps)
        assert sorted(kept.meta["cell_count"])[0] == 6
        assert len(removed) == 5

    def test_all_equal_nothing_removed(self):
        ps = _count_set([7] * 20)
        assert cell_count_threshold(ps) == 7
        assert cell_count_filter(ps)[1] == []

    def test_three_counts_median(self):
        ps = _count_set([10, 20, 30])
        cfg = QcConfig(cell_count_percentile=50)
        assert cell_count_threshold(ps, cfg) == 20
        kept, removed = cell_count_filter(ps, cfg)
        assert removed == ["w0000"]

    def test_missing_counts(self):
        ps = make_set(np.ones((3, 2)), ["a", "b", "c"], counts=[1, None, 3])
        with pytest.raises(DatasetError, match="disable the cell-count filter"):
            cell_count_filter(ps)

    def test_sampling_is_seeded(self):
        rng = np.random.default_rng(0)
        ps = _count_set(list(rng.integers(0, 1000, 300)))
        cfg = QcConfig(count_sample_size=50)
        assert cell_count_threshold(ps, cfg, seed=3) == cell_count_threshold(ps, cfg, seed=3)
        sample = np.random.default_rng(3).choice(300, size=50, replace=False)
        expected = _quantile_oracle(ps.meta["cell_count"].to_numpy()[sample], 5.0)
        assert cell_count_threshold(ps, cfg, seed=3) == pytest.approx(expected, abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(counts=st.lists(st.integers(0, 500), min_size=1, max_size=60), q=st.floats(1, 99))
    def test_threshold_matches_oracle(self, counts, q):
        ps = _count_set(counts)
        got = cell_count_threshold(ps, QcConfig(cell_count_percentile=q))
        assert got == pytest.approx(_quantile_oracle(counts, q), rel=1e-12, abs=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(counts=st.lists(st.integers(0, 500), min_size=1, max_size=60))
    def test_idempotent_at_fixed_threshold(self, counts):
        ps = _count_set(counts)
        t = cell_count_threshold(ps)
        once, _ = cell_count_filter(ps, threshold=t)
        twice, removed = cell_count_filter(once, threshold=t)
        assert removed == [] and once.equals(twice)


class TestQcMaskAndReport:
    def test_mask_and_report(self, tmp_path):
        ps, _ = generate(SynthConfig(seed=1))
        keep, events = qc_mask(ps, seed=0)
        assert keep.dtype == bool and keep.shape == (ps.n_wells,)
        assert sum(e.kind == "well" for e in events) == int((~keep).sum())
        path = write_qc_report(events, tmp_path / "qc.csv")
        table = pd.read_csv(path)
        assert list(table.columns) == ["kind", "id", "reason", "statistic"]
        assert len(table) == len(events)

    def test_qc_config_validation(self):
        with pytest.raises(ValueError):
            QcConfig(batch_deviation_threshold=0)
        with pytest.raises(ValueError):
            QcConfig(cell_count_percentile=100)
