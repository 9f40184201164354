"""Synthetic plate-based profiling datasets with known signal and additive confounds.

Every treated well's vector is the sum of its class mean, its perturbation
offset, its batch and source effects, a plate-position effect and isotropic
noise; control wells receive only the confounds and noise. All components
are isotropic Gaussians whose scales are set in :class:`SynthConfig`.
"""

from __future__ import annotations

import string
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd

from morphoeval.profiles import LabelStore, ProfileSet, save_label_store, save_profile_set


class InfeasibleLayoutError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_sources: int = 2
    batches_per_source: int = 3
    plates_per_batch: int = 2
    wells_per_plate: int = 96
    n_perturbations: int = 50
    n_classes: int = 10
    dim: int = 32
    effect_sigma: float = 1.0
    class_sigma: float = 0.0
    batch_sigma: float = 0.0
    source_sigma: float = 0.0
    layout_sigma: float = 0.0
    noise_sigma: float = 0.5
    control_fraction: float = 0.1
    fixed_layout: bool = True
    seed: int = 0
    perturbation_type: Literal["compound", "crispr"] = "compound"
    control_id: str = "DMSO"
    cell_count_mean: float = 500.0

    def __post_init__(self) -> None:
        for name in ("n_sources", "batches_per_source", "plates_per_batch", "wells_per_plate",
                     "n_perturbations", "n_classes", "dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        for name in ("effect_sigma", "class_sigma", "batch_sigma", "source_sigma", "layout_sigma", "noise_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 < self.control_fraction < 1:
            raise ValueError("control_fraction must lie in (0, 1)")
        if self.perturbation_type not in ("compound", "crispr"):
            raise ValueError("perturbation_type must be 'compound' or 'crispr'")

    @property
    def n_controls_per_plate(self) -> int:
        return max(1, int(round(self.control_fraction * self.wells_per_plate)))

    @property
    def n_treated_per_plate(self) -> int:
        return self.wells_per_plate - self.n_controls_per_plate


def plate_positions(n_wells: int) -> list[str]:
    """Row-major well names for the smallest standard plate holding ``n_wells``."""
    for rows, cols in ((8, 12), (16, 24), (32, 48)):
        if n_wells <= rows * cols:
            break
    else:
        raise InfeasibleLayoutError(f"{n_wells} wells exceed a 1536-well plate")
    letters = list(string.ascii_uppercase) + ["A" + c for c in string.ascii_uppercase]
    names = [f"{letters[r]}{c + 1:02d}" for r in range(rows) for c in range(cols)]
    return names[:n_wells]


def _perturbation_ids(cfg: SynthConfig) -> list[str]:
    prefix = "cmpd" if cfg.perturbation_type == "compound" else "gene"
    return [f"{prefix}_{i:04d}" for i in range(cfg.n_perturbations)]


def class_labels(cfg: SynthConfig) -> LabelStore:
    perts = _perturbation_ids(cfg)
    classes: dict[str, set[str]] = {}
    for i, p in enumerate(perts):
        classes.setdefault(f"class_{i % cfg.n_classes:03d}", set()).add(p)
    return LabelStore("class_sets", "synthetic_classes", {c: frozenset(m) for c, m in sorted(classes.items())})


def class_pairs(store: LabelStore, database_name: str | None = None) -> LabelStore:
    """Pair relations linking every two members of the same class."""
    pairs = {
        tuple(sorted(pair))
        for members in store.class_sets.values()
        for pair in combinations(sorted(members), 2)
    }
    return LabelStore("pair_relations", database_name or f"{store.database_name}_pairs", pair_relations=frozenset(pairs))


def generate(cfg: SynthConfig) -> tuple[ProfileSet, LabelStore]:
    n_ctrl = cfg.n_controls_per_plate
    n_treated = cfg.n_treated_per_plate
    if n_treated < cfg.n_perturbations:
        raise InfeasibleLayoutError(
            f"{cfg.n_perturbations} perturbations do not fit in {n_treated} treated wells per plate"
        )
    rng = np.random.default_rng(cfg.seed)
    d = cfg.dim
    positions = plate_positions(cfg.wells_per_plate)
    n_plates = cfg.n_sources * cfg.batches_per_source * cfg.plates_per_batch

    class_means = rng.normal(0.0, cfg.class_sigma, (cfg.n_classes, d))
    offsets = rng.normal(0.0, cfg.effect_sigma, (cfg.n_perturbations, d))
    source_fx = rng.normal(0.0, cfg.source_sigma, (cfg.n_sources, d))
    batch_fx = rng.normal(0.0, cfg.batch_sigma, (cfg.n_sources * cfg.batches_per_source, d))
    layout_shape = (1 if cfg.fixed_layout else n_plates, cfg.wells_per_plate, d)
    layout_fx = rng.normal(0.0, cfg.layout_sigma, layout_shape)

    # slot -> perturbation index, -1 for control; controls spread evenly over the plate
    ctrl_slots = np.unique(np.floor(np.arange(n_ctrl) * cfg.wells_per_plate / n_ctrl).astype(int))
    slot_pert = np.full(cfg.wells_per_plate, -1)
    treated_slots = np.setdiff1d(np.arange(cfg.wells_per_plate), ctrl_slots)
    slot_pert[treated_slots] = np.arange(treated_slots.size) % cfg.n_perturbations

    perts = _perturbation_ids(cfg)
    rows, signal = [], []
    plate_no = 0
    for s in range(cfg.n_sources):
        source = f"S{s}"
        for b in range(cfg.batches_per_source):
            bi = s * cfg.batches_per_source + b
            batch = f"{source}_B{b}"
            for p in range(cfg.plates_per_batch):
                plate = f"{batch}_P{p}"
                layout = slot_pert if cfg.fixed_layout else slot_pert[rng.permutation(cfg.wells_per_plate)]
                lfx = layout_fx[0 if cfg.fixed_layout else plate_no]
                for w, pert_index in enumerate(layout):
                    is_ctrl = pert_index < 0
                    vec = source_fx[s] + batch_fx[bi] + lfx[w]
                    if not is_ctrl:
                        vec = vec + class_means[pert_index % cfg.n_classes] + offsets[pert_index]
                    signal.append(vec)
                    rows.append((
                        f"{plate}_{positions[w]}", source, batch, plate, positions[w],
                        cfg.control_id if is_ctrl else perts[pert_index],
                        "control" if is_ctrl else cfg.perturbation_type,
                        is_ctrl,
                    ))
                plate_no += 1

    X = np.asarray(signal) + rng.normal(0.0, cfg.noise_sigma, (len(rows), d))
    meta = pd.DataFrame(rows, columns=["well_id", "source", "batch", "plate", "well_position",
                                       "perturbation_id", "perturbation_type", "is_negative_control"])
    meta["cell_count"] = rng.poisson(cfg.cell_count_mean, len(rows))
    profiles = ProfileSet(
        features=X,
        meta=meta,
        feature_names=[f"f{j:04d}" for j in range(d)],
        provenance=f"synth(seed={cfg.seed})",
        name="synthetic",
    ).sorted_by_well_id()
    return profiles, class_labels(cfg)


def embed(
    profiles: ProfileSet,
    out_dim: int,
    noise_sigma: float = 0.0,
    correlated_rank: int = 0,
    correlated_sigma: float = 0.0,
    scale_spread: float = 0.0,
    seed: int = 0,
    name: str | None = None,
) -> ProfileSet:
    """A new "method" viewing the same wells through a random linear map.

    The input features are mapped to ``out_dim`` dimensions, then
    low-rank correlated noise, isotropic noise and log-normal per-feature
    scales (``scale_spread`` is the log-scale std) are applied.
    """
    rng = np.random.default_rng(seed)
    n, d = profiles.features.shape
    A = rng.normal(0.0, 1.0 / np.sqrt(d), (d, out_dim))
    X = profiles.features @ A
    if correlated_rank and correlated_sigma:
        B = rng.normal(0.0, 1.0 / np.sqrt(correlated_rank), (correlated_rank, out_dim))
        X = X + rng.normal(0.0, correlated_sigma, (n, correlated_rank)) @ B
    if noise_sigma:
        X = X + rng.normal(0.0, noise_sigma, (n, out_dim))
    if scale_spread:
        X = X * np.exp(rng.normal(0.0, scale_spread, out_dim))
    out = profiles.with_features(X, provenance=name or f"embed{out_dim}")
    return out


def write_dataset(profiles: ProfileSet, labels: LabelStore | None, directory: str | Path, dataset_name: str = "synthetic") -> Path:
    """Write profiles (and labels, if given) in the manifest layout."""
    directory = Path(directory)
    manifest = save_profile_set(profiles, directory, dataset_name=dataset_name)
    if labels is not None:
        save_label_store(labels, directory / "labels.csv")
    return manifest
