import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from morphoeval.normalize import (
    MAD_SCALE,
    FittedPipeline,
    PipelineConfig,
    PipelineError,
    center_scale_per_plate,
    fit_pca,
    mad_robustize_per_plate,
    run_pipeline,
    sphere_per_batch,
)
from morphoeval.synth import SynthConfig, generate

from helpers import make_set


def _column_set(values, plates=None, controls=None):
    X = np.asarray(values, dtype=np.float64).reshape(-1, 1)
    perts = ["DMSO" if (controls and controls[i]) else f"c{i}" for i in range(len(X))]
    return make_set(X, perts, plates=plates, controls=controls)


class TestCenterScale:
    def test_three_values(self):
        out = center_scale_per_plate(_column_set([2, 4, 6]))
        np.testing.assert_allclose(out.features[:, 0], [-1, 0, 1], atol=1e-15)

    def test_constant_feature(self):
        out = center_scale_per_plate(_column_set([5, 5, 5]))
        np.testing.assert_array_equal(out.features[:, 0], [0, 0, 0])

    def test_plates_independent(self):
        out = center_scale_per_plate(_column_set([0, 2, 10, 30], plates=["A", "A", "B", "B"]))
        r = 1 / np.sqrt(2)
        np.testing.assert_allclose(out.features[:, 0], [-r, r, -r, r], atol=1e-15)

    def test_single_well_plate(self):
        with pytest.raises(PipelineError, match="plate B"):
            center_scale_per_plate(_column_set([0, 2, 10], plates=["A", "A", "B"]))

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_idempotent(self, seed):
        rng = np.random.default_rng(seed)
        ps = make_set(rng.normal(3, 2, (12, 4)), [f"c{i}" for i in range(12)], plates=["A"] * 6 + ["B"] * 6)
        once = center_scale_per_plate(ps)
        twice = center_scale_per_plate(once)
        np.testing.assert_allclose(twice.features, once.features, atol=1e-12)


class TestPca:
    def test_exact_rank_two_reconstruction(self):
        rng = np.random.default_rng(0)
        basis = rng.normal(size=(2, 5))
        X = rng.normal(size=(30, 2)) @ basis + rng.normal(size=5)
        fit = fit_pca(X, 2)
        recon = fit.transform(X) @ fit.loadings.T + fit.mean
        assert np.abs(recon - X).max() <= 1e-8

    def test_cap_warning(self):
        X = np.random.default_rng(1).normal(size=(40, 10))
        with pytest.warns(UserWarning, match="capped"):
            fit = fit_pca(X, 64)
        assert fit.loadings.shape == (10, 10)

    def test_cap_by_sample_count(self):
        X = np.random.default_rng(1).normal(size=(5, 10))
        with pytest.warns(UserWarning):
            assert fit_pca(X, 64).loadings.shape[1] == 4

    def test_nonpositive_k(self):
        with pytest.raises(PipelineError):
            fit_pca(np.eye(3), 0)

    @pytest.mark.parametrize("seed", range(5))
    def test_explained_variance_matches_covariance_eigs(self, seed):
        X = np.random.default_rng(seed).normal(size=(20, 6))
        fit = fit_pca(X, 6)
        eigs = np.sort(np.linalg.eigvalsh(np.cov(X, rowvar=False)))[::-1]
        np.testing.assert_allclose(fit.explained_variance, eigs, atol=1e-8)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), k=st.integers(1, 6))
    def test_loadings_orthonormal_and_signed(self, seed, k):
        X = np.random.default_rng(seed).normal(size=(15, 6))
        V = fit_pca(X, k).loadings
        np.testing.assert_allclose(V.T @ V, np.eye(k), atol=1e-8)
        top = V[np.argmax(np.abs(V), axis=0), np.arange(k)]
        assert (top > 0).all()

    def test_full_rank_preserves_cosine_ranking(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(12, 3)) @ rng.normal(size=(3, 6))
        X = X - X.mean(axis=0)  # PCA centers; a centered rank-3 set keeps every angle
        Z = fit_pca(X, 3).transform(X)

        def order(M):
            M = M / np.linalg.norm(M, axis=1, keepdims=True)
            S = M @ M.T
            return np.argsort(-S, axis=1, kind="stable")

        np.testing.assert_array_equal(order(X), order(Z))


class TestMadRobustize:
    def test_reference_example(self):
        out = mad_robustize_per_plate(_column_set([1, 2, 3]), mode="per_plate_all")
        assert out.features[0, 0] == pytest.approx(-1 / MAD_SCALE, abs=1e-12)
        assert out.features[0, 0] == pytest.approx(-0.6745, abs=1e-4)

    def test_constant_reference_saturates(self):
        ps = _column_set([4, 4, 4, 5], controls=[True, True, True, False])
        out = mad_robustize_per_plate(ps, epsilon=1e-6)
        assert out.features[3, 0] == pytest.approx(1 / 1e-6)

    def test_falls_back_to_all_wells(self, caplog):
        ps = _column_set([1, 2, 3, 10], controls=[True, False, False, False])
        out = mad_robustize_per_plate(ps)
        ref = mad_robustize_per_plate(ps, mode="per_plate_all")
        np.testing.assert_array_equal(out.features, ref.features)
        assert "falls back" in caplog.text

    @pytest.mark.parametrize("seed", range(3))
    def test_control_statistics(self, seed):
        cfg = SynthConfig(seed=seed, batch_sigma=1.0, noise_sigma=1.0, dim=8)
        ps, _ = generate(cfg)
        out = mad_robustize_per_plate(ps)
        for plate in set(out.column("plate")):
            rows = (out.column("plate") == plate) & out.is_control
            C = out.features[rows]
            med = np.median(C, axis=0)
            np.testing.assert_allclose(med, 0, atol=1e-9)
            np.testing.assert_allclose(MAD_SCALE * np.median(np.abs(C - med), axis=0), 1, atol=1e-9)


class TestSphere:
    def _data(self, seed=0, batches=2):
        rng = np.random.default_rng(seed)
        X, perts, bs = [], [], []
        for b in range(batches):
            A = rng.normal(size=(4, 4)) + 2 * np.eye(4)
            X.append(rng.normal(size=(40, 4)) @ A + rng.normal(size=4))
            perts += ["DMSO"] * 30 + [f"c{i}" for i in range(10)]
            bs += [f"b{b}"] * 40
        return make_set(np.vstack(X), perts, batches=bs)

    @pytest.mark.parametrize("seed", range(3))
    def test_control_covariance_identity(self, seed):
        ps = self._data(seed)
        out = sphere_per_batch(ps, epsilon=1e-12)
        for b in ("b0", "b1"):
            rows = (out.column("batch") == b) & out.is_control
            np.testing.assert_allclose(np.cov(out.features[rows], rowvar=False), np.eye(4), atol=1e-6)

    def test_identity_covariance_is_a_shift(self):
        rng = np.random.default_rng(0)
        C = rng.normal(size=(50, 3))
        C = C - C.mean(axis=0)
        # whiten the sample exactly so its covariance is the identity
        evals, evecs = np.linalg.eigh(np.cov(C, rowvar=False))
        C = C @ evecs @ np.diag(evals ** -0.5) @ evecs.T + 5.0
        ps = make_set(np.vstack([C, [[7.0, 7.0, 7.0]]]), ["DMSO"] * 50 + ["c"])
        out = sphere_per_batch(ps, epsilon=1e-12)
        np.testing.assert_allclose(out.features, ps.features - 5.0, atol=1e-9)

    def test_batches_whitened_independently(self):
        ps = self._data(1)
        out = sphere_per_batch(ps, epsilon=1e-12)
        pooled = np.cov(out.features[out.is_control], rowvar=False)
        assert np.abs(pooled - np.eye(4)).max() > 1e-3

    def test_too_few_controls(self, caplog):
        X = np.random.default_rng(0).normal(size=(4, 2))
        ps = make_set(X, ["DMSO", "a", "b", "c"])
        out = sphere_per_batch(ps)
        np.testing.assert_array_equal(out.features, ps.features)
        assert "unsphered" in caplog.text


CONFIGS = [
    "csall-plate-pca64-madctrl-plate-nosph",
    "nocs-pca64-madctrl-plate-nosph",
    "csall-plate-nopca-madctrl-plate-nosph",
    "csall-plate-pca64-madctrl-plate-sphctrl-batch",
    "csall-plate-pca8-madall-plate-nosph",
    "nocs-nopca-nomad-nosph",
]


class TestPipelineConfig:
    @pytest.mark.parametrize("text", CONFIGS)
    def test_string_round_trip(self, text):
        assert PipelineConfig.parse(text).render() == text

    @settings(max_examples=60, deadline=None)
    @given(
        cs=st.sampled_from(["per_plate", "none"]),
        k=st.one_of(st.none(), st.integers(1, 512)),
        mad=st.sampled_from(["per_plate_controls", "per_plate_all", "none"]),
        sph=st.sampled_from(["per_batch_controls", "none"]),
    )
    def test_parse_render(self, cs, k, mad, sph):
        cfg = PipelineConfig(cs, k, mad, sph)
        assert PipelineConfig.parse(cfg.render()) == cfg

    @pytest.mark.parametrize("bad", ["", "csall-pca64", "csall-plate-pca64-madctrl-plate", "pca64-nocs-nomad-nosph",
                                     "csall-plate-pca0-nomad-nosph", "nocs-nopca-nomad-nosph-extra"])
    def test_rejects(self, bad):
        with pytest.raises(PipelineError):
            PipelineConfig.parse(bad)


@pytest.fixture(scope="module")
def synth():
    ps, _ = generate(SynthConfig(seed=2, n_sources=1, batches_per_source=3, plates_per_batch=1,
                                 batch_sigma=1.0, dim=80))
    return ps


class TestRunPipeline:
    def test_main_config_dimension(self, synth):
        out, fitted = run_pipeline(synth, "csall-plate-pca64-madctrl-plate-nosph")
        assert out.dim == min(64, synth.dim, synth.n_wells - 1)
        assert out.provenance.endswith("|csall-plate-pca64-madctrl-plate-nosph")
        assert fitted.pca.loadings.shape == (80, 64)

    def test_identity_config_bit_exact(self, synth):
        out, _ = run_pipeline(synth, "nocs-nopca-nomad-nosph")
        assert out.features.tobytes() == synth.features.tobytes()

    def test_nocs_skips_only_center_scale(self, synth):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            out, _ = run_pipeline(synth, "nocs-pca64-madctrl-plate-nosph")
            manual = mad_robustize_per_plate(synth.with_features(fit_pca(synth, 64).transform(synth.features)))
        np.testing.assert_array_equal(out.features, manual.features)

    def test_main_equals_composed_steps(self, synth):
        out, _ = run_pipeline(synth)
        cs = center_scale_per_plate(synth)
        manual = mad_robustize_per_plate(cs.with_features(fit_pca(cs, 64).transform(cs.features)))
        np.testing.assert_array_equal(out.features, manual.features)

    @pytest.mark.parametrize("text", CONFIGS)
    def test_deterministic_and_transform_matches(self, synth, text, tmp_path):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            a, fitted = run_pipeline(synth, text)
            b, _ = run_pipeline(synth, text)
        assert a.features.tobytes() == b.features.tobytes()
        reloaded = FittedPipeline.load(fitted.save(tmp_path / "p.npz"))
        assert reloaded.config == fitted.config
        np.testing.assert_array_equal(reloaded.transform(synth).features, a.features)

    def test_unseen_plate(self, synth):
        _, fitted = run_pipeline(synth)
        other, _ = generate(SynthConfig(seed=2, n_sources=2, batches_per_source=3, plates_per_batch=1, dim=80))
        with pytest.raises(PipelineError, match="not seen"):
            fitted.transform(other)
