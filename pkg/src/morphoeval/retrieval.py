"""Consensus profiles, cosine ranking and batch-effect stringency filters."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, Literal, Sequence

import numpy as np

from morphoeval._kernels import unit_rows
from morphoeval.profiles import ProfileSet, WellMeta


class StringencyLevel(str, enum.Enum):
    NR = "NR"
    NSB = "NSB"
    NSS = "NSS"
    NSL = "NSL"

    @property
    def code(self) -> int:
        return _LEVEL_CODES[self]

    @classmethod
    def parse(cls, value: str | StringencyLevel) -> StringencyLevel:
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().upper())
        except ValueError:
            raise ValueError(f"unknown stringency level {value!r}") from None


_LEVEL_CODES = {StringencyLevel.NR: 0, StringencyLevel.NSB: 1, StringencyLevel.NSS: 2, StringencyLevel.NSL: 3}
ALL_LEVELS = tuple(StringencyLevel)


class NoCandidatesError(RuntimeError):
    """A query's candidate pool is empty after stringency filtering."""


def level_applicable(profiles: ProfileSet, level: StringencyLevel, well_level: bool) -> str | None:
    """Reason the level cannot be evaluated on ``profiles``, or None if it can."""
    if level is StringencyLevel.NSL and not well_level:
        return "NSL applies only to well-level tasks"
    if level is StringencyLevel.NSS and profiles.meta["source"].nunique() < 2:
        return "NSS cannot be evaluated on single-source data"
    if level is StringencyLevel.NSB and profiles.meta["batch"].nunique() < 2:
        return "NSB requires at least two batches"
    return None


Scope = Literal["global", "per_batch", "per_source"]


@dataclass(frozen=True)
class ConsensusProfile:
    perturbation_id: str
    scope: Scope
    scope_key: str
    vector: np.ndarray
    n_replicates: int
    source: str = ""

    @property
    def key(self) -> tuple[str, str]:
        return (self.perturbation_id, self.scope_key)


def build_consensus(
    profiles: ProfileSet, scope: Scope = "global", aggregate: Literal["mean", "median"] = "mean"
) -> list[ConsensusProfile]:
    """Average replicate wells per perturbation (and per batch/source for scoped variants).

    Negative controls are left out. Output is ordered by (perturbation_id, scope_key).
    """
    if scope not in ("global", "per_batch", "per_source"):
        raise ValueError(f"unknown consensus scope {scope!r}")
    keep = ~profiles.is_control
    if not keep.any():
        return []
    X = profiles.features[keep]
    pert = profiles.column("perturbation_id")[keep]
    source = profiles.column("source")[keep]
    if scope == "global":
        scope_key = np.full(pert.shape, "", dtype=object)
    elif scope == "per_batch":
        scope_key = profiles.column("batch")[keep]
    else:
        scope_key = source

    groups: dict[tuple[str, str], list[int]] = {}
    for i, key in enumerate(zip(pert, scope_key)):
        groups.setdefault(key, []).append(i)

    reduce = np.mean if aggregate == "mean" else np.median
    out = []
    for key in sorted(groups):
        rows = groups[key]
        src = source[rows[0]] if scope != "global" else ""
        out.append(
            ConsensusProfile(
                perturbation_id=key[0],
                scope=scope,
                scope_key=key[1],
                vector=reduce(X[rows], axis=0),
                n_replicates=len(rows),
                source=src,
            )
        )
    return out


def rank_candidates(
    query: np.ndarray, candidates: Sequence[tuple[str, np.ndarray]]
) -> list[tuple[str, float]]:
    """Candidates sorted by descending cosine similarity, ties by ascending id."""
    if not candidates:
        raise ValueError("candidate list is empty")
    ids = [c[0] for c in candidates]
    M = np.vstack([np.asarray(c[1], dtype=np.float64) for c in candidates])
    q = np.asarray(query, dtype=np.float64)
    if M.shape[1] != q.shape[0]:
        raise ValueError("query and candidates differ in dimension")
    sims = unit_rows(M) @ unit_rows(q[None, :])[0]
    order = sorted(range(len(ids)), key=lambda i: (-sims[i], ids[i]))
    return [(ids[i], float(sims[i])) for i in order]


def _attr(item, name: str) -> str:
    if isinstance(item, ConsensusProfile):
        if name == "batch":
            return item.scope_key if item.scope == "per_batch" else ""
        if name == "source":
            return item.source or (item.scope_key if item.scope == "per_source" else "")
        if name == "id":
            return f"{item.perturbation_id}|{item.scope_key}"
        return ""
    if name == "id":
        return item.well_id
    return getattr(item, name)


def stringency_candidates(
    query: WellMeta | ConsensusProfile,
    pool: Iterable[WellMeta | ConsensusProfile],
    level: StringencyLevel,
) -> list[WellMeta | ConsensusProfile]:
    """Drop the query itself and every candidate sharing the excluded condition.

    NSB drops same-batch candidates, NSS same-source, NSL same plate position.
    """
    level = StringencyLevel.parse(level)
    field = {
        StringencyLevel.NSB: "batch",
        StringencyLevel.NSS: "source",
        StringencyLevel.NSL: "well_position",
    }.get(level)
    qid = _attr(query, "id")
    qval = _attr(query, field) if field else None
    kept = [
        c for c in pool
        if _attr(c, "id") != qid and (field is None or _attr(c, field) != qval)
    ]
    if not kept:
        raise NoCandidatesError(f"no eligible candidates for {qid} at {level.value}")
    return kept


def top_fraction_cutoff(n_candidates: int, fraction: float) -> int:
    if n_candidates < 1:
        raise ValueError("n_candidates must be >= 1")
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    # round before ceil so 0.01 * 1000 stays 10 despite binary float error
    return max(1, math.ceil(round(fraction * n_candidates, 9)))

