"""Well-level replicate retrieval: Recall@1, mAP and NegCon mAP under stringency filters.

Queries are the non-control wells. For plain Recall@1 and mAP the pool is
every other non-control well that survives the stringency filter; NegCon mAP
keeps the query's replicates as positives and uses negative-control wells
as the only distractors. Queries whose pool holds no replicate are skipped
and counted rather than scored zero.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
import pandas as pd
from scipy.special import digamma

from morphoeval import _kernels
from morphoeval._kernels import unit_rows
from morphoeval.profiles import ProfileSet
from morphoeval.retrieval import ALL_LEVELS, StringencyLevel

_BLOCK = 512

Metric = Literal["recall_at_1", "map", "negcon_map"]


def average_precision(ranked_labels: Sequence[bool]) -> float:
    hits = np.asarray(ranked_labels, dtype=bool)
    n_pos = int(hits.sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive")
    ranks = np.flatnonzero(hits) + 1.0
    return float(np.sum(np.arange(1, n_pos + 1) / ranks) / n_pos)


def expected_random_ap(n_candidates: np.ndarray, n_positives: np.ndarray) -> np.ndarray:
    """Mean AP of a uniformly random ranking of ``n_candidates`` items with ``n_positives`` hits."""
    N = np.asarray(n_candidates, dtype=np.float64)
    R = np.asarray(n_positives, dtype=np.float64)
    H = digamma(N + 1.0) + np.euler_gamma
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(N > 1, (R - 1.0) / np.maximum(N - 1.0, 1.0), 0.0)
        return np.where(N > 0, (H + ratio * (N - H)) / np.maximum(N, 1.0), np.nan)


@dataclass
class RetrievalResult:
    recall_at_1_macro: float
    map: float
    negcon_map: float
    level: StringencyLevel
    n_queries: int
    skipped_queries: int
    skipped: dict[str, int] = field(default_factory=dict)
    negcon_n_queries: int = 0
    chance: dict[str, float] = field(default_factory=dict)
    per_query: pd.DataFrame | None = field(default=None, repr=False)

    def per_perturbation_recall(self) -> pd.Series:
        scored = self.per_query[self.per_query["nn_hit"] >= 0]
        return scored.groupby("perturbation_id")["nn_hit"].mean()


def _macro(values: np.ndarray, groups: np.ndarray) -> float:
    if values.size == 0:
        return float("nan")
    sums = np.bincount(groups, weights=values)
    counts = np.bincount(groups)
    present = counts > 0
    return float(np.mean(sums[present] / counts[present]))


def _rank_all_levels(profiles: ProfileSet, levels: Sequence[StringencyLevel], jobs: int):
    Xn = unit_rows(profiles.features)
    ctrl = profiles.is_control
    pert = profiles.codes("perturbation_id")
    batch = profiles.codes("batch")
    source = profiles.codes("source")
    pos = profiles.codes("well_position")
    queries = np.flatnonzero(~ctrl)
    kernel = _kernels.backend.rank_block

    def run_block(rows):
        sims = Xn[rows] @ Xn.T
        return [kernel(sims, rows, pert, batch, source, pos, ctrl, lv.code) for lv in levels]

    blocks = [queries[i:i + _BLOCK] for i in range(0, queries.size, _BLOCK)]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            parts = list(ex.map(run_block, blocks))
    else:
        parts = [run_block(b) for b in blocks]

    out = {}
    for li, lv in enumerate(levels):
        cols = [np.concatenate([p[li][c] for p in parts]) if parts else np.empty(0) for c in range(6)]
        out[lv] = (queries, *cols)
    return out


def _summarize(profiles: ProfileSet, level: StringencyLevel, arrays) -> RetrievalResult:
    queries, nn_hit, ap, nc_ap, n_pos, n_pool, n_ctrl = arrays
    pert_code = profiles.codes("perturbation_id")[queries]
    scored = nn_hit >= 0
    nc_scored = ~np.isnan(nc_ap)
    skipped = {}
    if (~scored).any():
        skipped["no replicate in pool"] = int((~scored).sum())
    if (scored & ~nc_scored).any():
        skipped["negcon: no control in pool"] = int((scored & ~nc_scored).sum())

    recall = _macro(nn_hit[scored].astype(np.float64), pert_code[scored])
    chance_recall = _macro(n_pos[scored] / n_pool[scored], pert_code[scored]) if scored.any() else float("nan")
    chance = {
        "recall_at_1": chance_recall,
        "map": float(np.mean(expected_random_ap(n_pool[scored], n_pos[scored]))) if scored.any() else float("nan"),
        "negcon_map": float(np.mean(expected_random_ap(n_pos + n_ctrl, n_pos)[nc_scored])) if nc_scored.any() else float("nan"),
    }
    frame = pd.DataFrame({
        "well_id": profiles.column("well_id")[queries],
        "perturbation_id": profiles.column("perturbation_id")[queries],
        "nn_hit": nn_hit,
        "ap": ap,
        "negcon_ap": nc_ap,
        "n_positives": n_pos,
        "pool_size": n_pool,
        "n_controls": n_ctrl,
    })
    return RetrievalResult(
        recall_at_1_macro=recall,
        map=float(np.mean(ap[scored])) if scored.any() else float("nan"),
        negcon_map=float(np.mean(nc_ap[nc_scored])) if nc_scored.any() else float("nan"),
        level=level,
        n_queries=int(scored.sum()),
        skipped_queries=int((~scored).sum()),
        skipped=skipped,
        negcon_n_queries=int(nc_scored.sum()),
        chance=chance,
        per_query=frame,
    )


def evaluate_replicates(
    profiles: ProfileSet, levels: Sequence[StringencyLevel | str] = ALL_LEVELS, jobs: int = 1
) -> dict[StringencyLevel, RetrievalResult]:
    """All three replicate metrics at each level, sharing one similarity pass."""
    levels = [StringencyLevel.parse(lv) for lv in levels]
    ranked = _rank_all_levels(profiles, levels, jobs)
    return {lv: _summarize(profiles, lv, ranked[lv]) for lv in levels}


def knn_recall_at_1(profiles: ProfileSet, level: StringencyLevel | str = StringencyLevel.NR) -> float:
    """Nearest-neighbour accuracy averaged per perturbation, then across perturbations."""
    return evaluate_replicates(profiles, [level])[StringencyLevel.parse(level)].recall_at_1_macro


def mean_average_precision(profiles: ProfileSet, level: StringencyLevel | str = StringencyLevel.NR) -> float:
    return evaluate_replicates(profiles, [level])[StringencyLevel.parse(level)].map


def negcon_map(profiles: ProfileSet, level: StringencyLevel | str = StringencyLevel.NR) -> float:
    return evaluate_replicates(profiles, [level])[StringencyLevel.parse(level)].negcon_map


def shuffle_labels(profiles: ProfileSet, rng: np.random.Generator) -> ProfileSet:
    """Permute treatment labels among non-control wells within each batch."""
    meta = profiles.meta.copy()
    pert = meta["perturbation_id"].to_numpy().copy()
    ptype = meta["perturbation_type"].to_numpy().copy()
    treated = ~profiles.is_control
    batches = meta["batch"].to_numpy()
    for b in np.unique(batches):
        rows = np.flatnonzero((batches == b) & treated)
        perm = rows[rng.permutation(rows.size)]
        pert[rows] = pert[perm]
        ptype[rows] = ptype[perm]
    meta["perturbation_id"] = pert
    meta["perturbation_type"] = ptype
    return profiles.with_meta(meta)


def shuffle_null(
    profiles: ProfileSet,
    metric: Metric,
    level: StringencyLevel | str = StringencyLevel.NR,
    n_shuffles: int = 20,
    seed: int = 0,
) -> list[float]:
    """Metric values after ``n_shuffles`` within-batch label permutations."""
    if n_shuffles < 1:
        raise ValueError("n_shuffles must be >= 1")
    attr = {"recall_at_1": "recall_at_1_macro", "map": "map", "negcon_map": "negcon_map"}[metric]
    level = StringencyLevel.parse(level)
    null = []
    for i in range(n_shuffles):
        shuffled = shuffle_labels(profiles, np.random.default_rng([int(seed), i]))
        null.append(getattr(evaluate_replicates(shuffled, [level])[level], attr))
    return null
