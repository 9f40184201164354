"""Sample quality control: batch filtering on negative-control stability and cell-count filtering."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from morphoeval._kernels import unit_rows
from morphoeval.profiles import DatasetError, ProfileSet

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class QcConfig:
    batch_deviation_threshold: float = 0.2
    cell_count_percentile: float = 5.0
    count_sample_size: int = 5000
    absolute_threshold: bool = False  # compare batch means to the threshold directly

    def __post_init__(self) -> None:
        if not self.batch_deviation_threshold > 0:
            raise ValueError("batch_deviation_threshold must be positive")
        if not 0 < self.cell_count_percentile < 100:
            raise ValueError("cell_count_percentile must lie in (0, 100)")
        if self.count_sample_size < 1:
            raise ValueError("count_sample_size must be positive")


@dataclass(frozen=True)
class QcEvent:
    kind: str  # "batch" or "well"
    id: str
    reason: str
    statistic: float


def batch_control_distances(profiles: ProfileSet) -> dict[str, float]:
    """Per batch, the mean cosine distance of its wells to their nearest same-batch control.

    A control well is matched to the nearest *other* control. Batches without
    a usable control are absent from the result.
    """
    Xn = unit_rows(profiles.features)
    ctrl = profiles.is_control
    batches = profiles.column("batch")
    out = {}
    for batch in sorted(set(batches)):
        rows = np.flatnonzero(batches == batch)
        controls = rows[ctrl[rows]]
        if controls.size == 0 or (controls.size == 1 and rows.size == 1):
            continue
        sims = Xn[rows] @ Xn[controls].T
        sims[rows[:, None] == controls[None, :]] = -np.inf
        best = sims.max(axis=1)
        valid = np.isfinite(best)
        out[batch] = float(np.mean(1.0 - best[valid]))
    return out


def _flag_batches(stats: dict[str, float], cfg: QcConfig) -> dict[str, float]:
    baseline = float(np.median(list(stats.values())))
    flagged = {}
    for batch, value in stats.items():
        if cfg.absolute_threshold:
            if value > cfg.batch_deviation_threshold:
                flagged[batch] = value
        elif abs(value - baseline) > cfg.batch_deviation_threshold:
            flagged[batch] = value - baseline
    return flagged


def batch_control_filter(profiles: ProfileSet, cfg: QcConfig = QcConfig()) -> tuple[ProfileSet, list[str]]:
    """Drop batches whose control distance deviates from the median batch by more than the threshold.

    The median is recomputed over surviving batches until no further batch is
    flagged, which makes the filter idempotent.
    """
    batches = profiles.column("batch")
    stats = batch_control_distances(profiles)
    for batch in sorted(set(batches) - set(stats)):
        logger.warning("batch %s has no negative control; retained without assessment", batch)
    removed: list[str] = []
    while stats:
        flagged = _flag_batches(stats, cfg)
        if not flagged:
            break
        removed.extend(sorted(flagged))
        stats = {b: v for b, v in stats.items() if b not in flagged}
    if removed:
        logger.info("batch QC removed %d of %d batches", len(removed), len(set(batches)))
    return profiles.take(~np.isin(batches, removed)), removed


def batch_qc_events(profiles: ProfileSet, removed: list[str]) -> list[QcEvent]:
    stats = batch_control_distances(profiles)
    baseline = float(np.median(list(stats.values()))) if stats else float("nan")
    return [
        QcEvent("batch", b, "control distance deviates from baseline", stats[b] - baseline)
        for b in removed
    ]


def linear_percentile(values: np.ndarray, q: float) -> float:
    return float(np.percentile(np.asarray(values, dtype=np.float64), q, method="linear"))


def _counts(profiles: ProfileSet) -> np.ndarray:
    counts = profiles.meta["cell_count"]
    if counts.isna().any():
        raise DatasetError(
            "cell_count missing for some wells; disable the cell-count filter for this dataset"
        )
    return counts.to_numpy(dtype=np.int64)


def cell_count_threshold(profiles: ProfileSet, cfg: QcConfig = QcConfig(), seed: int = 0) -> float:
    """Low percentile of cell counts over a seeded sample of at most ``count_sample_size`` wells."""
    counts = _counts(profiles)
    m = min(cfg.count_sample_size, counts.size)
    if m < counts.size:
        counts = counts[np.random.default_rng(seed).choice(counts.size, size=m, replace=False)]
    return linear_percentile(counts, cfg.cell_count_percentile)


def cell_count_filter(
    profiles: ProfileSet, cfg: QcConfig = QcConfig(), seed: int = 0, threshold: float | None = None
) -> tuple[ProfileSet, list[str]]:
    """Drop wells whose cell count is strictly below the sampled percentile.

    Pass ``threshold`` to reuse a previously estimated cut-off; re-estimating
    on already-filtered wells would move it upward.
    """
    counts = _counts(profiles)
    if threshold is None:
        threshold = cell_count_threshold(profiles, cfg, seed)
    drop = counts < threshold
    removed = [str(w) for w in profiles.column("well_id")[drop]]
    logger.info("cell-count QC threshold %.3f removed %d wells", threshold, len(removed))
    return profiles.take(~drop), removed


def qc_mask(profiles: ProfileSet, cfg: QcConfig = QcConfig(), seed: int = 0, cell_counts: bool = True):
    """Boolean keep-mask over ``profiles`` rows plus the QC events that produced it."""
    ids = profiles.column("well_id")
    kept, removed_batches = batch_control_filter(profiles, cfg)
    events = batch_qc_events(profiles, removed_batches)
    if cell_counts:
        threshold = cell_count_threshold(kept, cfg, seed)
        before = kept
        kept, removed_wells = cell_count_filter(kept, cfg, seed, threshold)
        count_of = dict(zip(before.column("well_id"), before.meta["cell_count"]))
        events += [
            QcEvent("well", w, f"cell count below {threshold:.6g}", float(count_of[w]))
            for w in removed_wells
        ]
    return np.isin(ids, kept.column("well_id")), events


def write_qc_report(events: list[QcEvent], path: str | Path) -> Path:
    frame = pd.DataFrame(
        [(e.kind, e.id, e.reason, e.statistic) for e in events],
        columns=["kind", "id", "reason", "statistic"],
    )
    frame.to_csv(path, index=False)
    return Path(path)
