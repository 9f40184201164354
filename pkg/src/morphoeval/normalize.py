"""Feature normalization: platewise center-scale, global PCA, platewise MAD, batchwise ZCA.

Pipelines are named by config strings such as
``csall-plate-pca64-madctrl-plate-nosph``; segments are, in order,
``{csall-plate|nocs}``, ``{pcaK|nopca}``, ``{madctrl-plate|madall-plate|nomad}``
and ``{sphctrl-batch|nosph}``.
"""

from __future__ import annotations

import logging
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from morphoeval.profiles import ProfileSet

logger = logging.getLogger(__name__)

MAD_SCALE = 1.4826
DEFAULT_CONFIG = "csall-plate-pca64-madctrl-plate-nosph"


class PipelineError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    center_scale: Literal["per_plate", "none"] = "per_plate"
    pca_components: int | None = 64
    mad_robustize: Literal["per_plate_controls", "per_plate_all", "none"] = "per_plate_controls"
    sphere: Literal["per_batch_controls", "none"] = "none"
    epsilon: float = 1e-6

    def __post_init__(self) -> None:
        if self.center_scale not in ("per_plate", "none"):
            raise PipelineError(f"bad center_scale {self.center_scale!r}")
        if self.pca_components is not None and self.pca_components <= 0:
            raise PipelineError("pca_components must be positive")
        if self.mad_robustize not in ("per_plate_controls", "per_plate_all", "none"):
            raise PipelineError(f"bad mad_robustize {self.mad_robustize!r}")
        if self.sphere not in ("per_batch_controls", "none"):
            raise PipelineError(f"bad sphere {self.sphere!r}")
        if not self.epsilon > 0:
            raise PipelineError("epsilon must be positive")

    @classmethod
    def parse(cls, text: str) -> PipelineConfig:
        tokens = text.strip().lower().split("-")
        pos = 0

        def take(*options: str) -> str:
            nonlocal pos
            for opt in options:
                parts = opt.split("-")
                if tokens[pos:pos + len(parts)] == parts:
                    pos += len(parts)
                    return opt
            raise PipelineError(f"cannot parse pipeline config {text!r} at segment {pos}")

        cs = take("csall-plate", "nocs")
        if pos < len(tokens) and re.fullmatch(r"pca\d+", tokens[pos]):
            pca: int | None = int(tokens[pos][3:])
            pos += 1
        else:
            take("nopca")
            pca = None
        mad = take("madctrl-plate", "madall-plate", "nomad")
        sph = take("sphctrl-batch", "nosph")
        if pos != len(tokens):
            raise PipelineError(f"trailing segments in pipeline config {text!r}")
        return cls(
            center_scale="per_plate" if cs == "csall-plate" else "none",
            pca_components=pca,
            mad_robustize={"madctrl-plate": "per_plate_controls", "madall-plate": "per_plate_all", "nomad": "none"}[mad],
            sphere="per_batch_controls" if sph == "sphctrl-batch" else "none",
        )

    def render(self) -> str:
        return "-".join([
            "csall-plate" if self.center_scale == "per_plate" else "nocs",
            f"pca{self.pca_components}" if self.pca_components else "nopca",
            {"per_plate_controls": "madctrl-plate", "per_plate_all": "madall-plate", "none": "nomad"}[self.mad_robustize],
            "sphctrl-batch" if self.sphere == "per_batch_controls" else "nosph",
        ])

    def __str__(self) -> str:
        return self.render()


def _groups(keys: np.ndarray) -> dict[str, np.ndarray]:
    names, inverse = np.unique(keys, return_inverse=True)
    return {str(name): np.flatnonzero(inverse == i) for i, name in enumerate(names)}


# ---------------------------------------------------------------------------
# Steps; each ``_fit_*`` returns parameters and each public op applies them.
# ---------------------------------------------------------------------------


def _fit_center_scale(profiles: ProfileSet, epsilon: float):
    params = {}
    for plate, rows in _groups(profiles.column("plate")).items():
        if rows.size < 2:
            raise PipelineError(f"plate {plate} has a single well; cannot estimate its spread")
        X = profiles.features[rows]
        std = X.std(axis=0, ddof=1)
        params[plate] = (X.mean(axis=0), np.where(std < epsilon, 1.0, std))
    return params


def _apply_plate_params(profiles: ProfileSet, params, X: np.ndarray | None = None) -> np.ndarray:
    X = profiles.features if X is None else X
    out = np.empty_like(X)
    for plate, rows in _groups(profiles.column("plate")).items():
        if plate not in params:
            raise PipelineError(f"plate {plate} was not seen when the pipeline was fitted")
        center, scale = params[plate]
        out[rows] = (X[rows] - center) / scale
    return out


def center_scale_per_plate(profiles: ProfileSet, epsilon: float = 1e-6) -> ProfileSet:
    """z-score every feature within each plate (sample std, n-1)."""
    params = _fit_center_scale(profiles, epsilon)
    return profiles.with_features(_apply_plate_params(profiles, params))


@dataclass(frozen=True)
class PcaFit:
    mean: np.ndarray
    loadings: np.ndarray  # d x k, orthonormal columns
    explained_variance: np.ndarray

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) @ self.loadings


def fit_pca(profiles: ProfileSet | np.ndarray, k: int) -> PcaFit:
    """Top-``k`` principal axes of the whole dataset.

    ``k`` is capped at ``min(k, d, n - 1)``. Each axis is signed so its
    largest-magnitude loading is positive.
    """
    if k <= 0:
        raise PipelineError("number of PCA components must be positive")
    X = profiles.features if isinstance(profiles, ProfileSet) else np.asarray(profiles, dtype=np.float64)
    n, d = X.shape
    if n < 2:
        raise PipelineError("PCA needs at least two wells")
    cap = min(k, d, n - 1)
    if cap < k:
        warnings.warn(f"PCA components capped from {k} to {cap} (d={d}, n={n})")
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    V = vt[:cap].T.copy()
    flip = V[np.argmax(np.abs(V), axis=0), np.arange(cap)] < 0
    V[:, flip] *= -1
    return PcaFit(mean=mean, loadings=V, explained_variance=s[:cap] ** 2 / (n - 1))


def _fit_mad(profiles: ProfileSet, X: np.ndarray, mode: str, epsilon: float):
    ctrl = profiles.is_control
    params = {}
    for plate, rows in _groups(profiles.column("plate")).items():
        ref = rows
        if mode == "per_plate_controls":
            ref = rows[ctrl[rows]]
            if ref.size < 2:
                logger.warning("plate %s has %d control wells; MAD falls back to all wells", plate, ref.size)
                ref = rows
        med = np.median(X[ref], axis=0)
        mad = np.median(np.abs(X[ref] - med), axis=0)
        # MAD of zero saturates to (x - median) / epsilon
        params[plate] = (med, np.maximum(MAD_SCALE * mad, epsilon))
    return params


def mad_robustize_per_plate(
    profiles: ProfileSet,
    mode: Literal["per_plate_controls", "per_plate_all"] = "per_plate_controls",
    epsilon: float = 1e-6,
) -> ProfileSet:
    """(x - median) / (1.4826 * MAD) per plate, referenced on controls or all wells."""
    params = _fit_mad(profiles, profiles.features, mode, epsilon)
    return profiles.with_features(_apply_plate_params(profiles, params))


def _fit_sphere(profiles: ProfileSet, X: np.ndarray, epsilon: float):
    ctrl = profiles.is_control
    params = {}
    for batch, rows in _groups(profiles.column("batch")).items():
        ref = rows[ctrl[rows]]
        if ref.size < 2:
            logger.warning("batch %s has %d control wells; left unsphered", batch, ref.size)
            continue
        C = X[ref]
        mu = C.mean(axis=0)
        cov = np.atleast_2d(np.cov(C, rowvar=False))
        evals, evecs = np.linalg.eigh(cov)
        W = (evecs / np.sqrt(np.maximum(evals, 0.0) + epsilon)) @ evecs.T
        params[batch] = (mu, W)
    return params


def _apply_sphere(profiles: ProfileSet, X: np.ndarray, params) -> np.ndarray:
    out = X.copy()
    for batch, rows in _groups(profiles.column("batch")).items():
        if batch in params:
            mu, W = params[batch]
            out[rows] = (X[rows] - mu) @ W
    return out


def sphere_per_batch(profiles: ProfileSet, epsilon: float = 1e-6) -> ProfileSet:
    """ZCA-whiten every batch on the covariance of its negative controls."""
    params = _fit_sphere(profiles, profiles.features, epsilon)
    return profiles.with_features(_apply_sphere(profiles, profiles.features, params))


@dataclass
class FittedPipeline:
    config: PipelineConfig
    center_scale: dict = field(default_factory=dict)
    pca: PcaFit | None = None
    mad: dict = field(default_factory=dict)
    sphere: dict = field(default_factory=dict)

    def transform(self, profiles: ProfileSet) -> ProfileSet:
        X = profiles.features
        if self.config.center_scale == "per_plate":
            X = _apply_plate_params(profiles, self.center_scale, X)
        if self.pca is not None:
            X = self.pca.transform(X)
        if self.config.mad_robustize != "none":
            X = _apply_plate_params(profiles, self.mad, X)
        if self.config.sphere != "none":
            X = _apply_sphere(profiles, X, self.sphere)
        return _with_provenance(profiles, X, self.config)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        arrays: dict[str, np.ndarray] = {"config": np.array(self.config.render()),
                                         "epsilon": np.array(self.config.epsilon)}
        for tag, params in (("cs", self.center_scale), ("mad", self.mad), ("sph", self.sphere)):
            names = sorted(params)
            arrays[f"{tag}_keys"] = np.array(names, dtype=str)
            if names:
                arrays[f"{tag}_a"] = np.stack([params[n][0] for n in names])
                arrays[f"{tag}_b"] = np.stack([params[n][1] for n in names])
        if self.pca is not None:
            arrays["pca_mean"] = self.pca.mean
            arrays["pca_loadings"] = self.pca.loadings
            arrays["pca_var"] = self.pca.explained_variance
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)
        return path

    @classmethod
    def load(cls, path: str | Path) -> FittedPipeline:
        with np.load(path, allow_pickle=False) as data:
            cfg = PipelineConfig.parse(str(data["config"]))
            cfg = PipelineConfig(**{**cfg.__dict__, "epsilon": float(data["epsilon"])})
            fitted = cls(cfg)
            for tag, attr in (("cs", "center_scale"), ("mad", "mad"), ("sph", "sphere")):
                keys = [str(k) for k in data[f"{tag}_keys"]]
                if keys:
                    a, b = data[f"{tag}_a"], data[f"{tag}_b"]
                    setattr(fitted, attr, {k: (a[i], b[i]) for i, k in enumerate(keys)})
            if "pca_mean" in data:
                fitted.pca = PcaFit(data["pca_mean"], data["pca_loadings"], data["pca_var"])
        return fitted


def _with_provenance(profiles: ProfileSet, X: np.ndarray, cfg: PipelineConfig) -> ProfileSet:
    base = profiles.provenance or profiles.name
    return profiles.with_features(X, provenance=f"{base}|{cfg.render()}" if base else cfg.render())


def run_pipeline(profiles: ProfileSet, cfg: PipelineConfig | str = DEFAULT_CONFIG) -> tuple[ProfileSet, FittedPipeline]:
    """Fit and apply center-scale -> PCA -> MAD -> sphering, skipping disabled steps."""
    if isinstance(cfg, str):
        cfg = PipelineConfig.parse(cfg)
    fitted = FittedPipeline(cfg)
    X = profiles.features
    if cfg.center_scale == "per_plate":
        fitted.center_scale = _fit_center_scale(profiles, cfg.epsilon)
        X = _apply_plate_params(profiles, fitted.center_scale, X)
    if cfg.pca_components:
        fitted.pca = fit_pca(X, cfg.pca_components)
        X = fitted.pca.transform(X)
    if cfg.mad_robustize != "none":
        fitted.mad = _fit_mad(profiles, X, cfg.mad_robustize, cfg.epsilon)
        X = _apply_plate_params(profiles, fitted.mad, X)
    if cfg.sphere != "none":
        fitted.sphere = _fit_sphere(profiles, X, cfg.epsilon)
        X = _apply_sphere(profiles, X, fitted.sphere)
    keep_names = cfg.pca_components is None
    out = _with_provenance(profiles, X, cfg)
    if keep_names and profiles.feature_names:
        out = profiles.with_features(X, provenance=out.provenance, keep_names=True)
    return out, fitted
