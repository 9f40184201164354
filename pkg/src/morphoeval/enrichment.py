"""MoA and gene-pathway enrichment over consensus profiles.

Each query consensus ranks its candidate pool by cosine similarity, the top
``k`` form a retrieval set, and a 2x2 table scores how enriched that set is
in the query's related perturbations. Odds ratios use the modified
Haldane-Anscombe correction (+0.5 to every cell only when some cell is zero)
and are summarised by their geometric mean. Significance comes from a
permutation test against random size-``k`` retrieval sets.
"""

from __future__ import annotations

import logging
import zlib
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Literal, Mapping, Sequence

import numpy as np
import pandas as pd

from morphoeval import _kernels
from morphoeval._kernels import unit_rows
from morphoeval.profiles import LabelStore, ProfileSet, related_set
from morphoeval.retrieval import (
    ConsensusProfile,
    StringencyLevel,
    build_consensus,
    top_fraction_cutoff,
)

logger = logging.getLogger(__name__)

_BLOCK = 256


class EnrichmentError(RuntimeError):
    """No query could be scored."""


@dataclass(frozen=True)
class ContingencyTable:
    a: int  # related, retrieved
    b: int  # unrelated, retrieved
    c: int  # related, not retrieved
    d: int  # unrelated, not retrieved

    def __post_init__(self) -> None:
        if min(self.a, self.b, self.c, self.d) < 0:
            raise ValueError(f"negative cell in {self}")

    @property
    def k(self) -> int:
        return self.a + self.b

    @property
    def pool_size(self) -> int:
        return self.a + self.b + self.c + self.d


def _mha(a, b, c, d):
    a, b, c, d = (np.asarray(x, dtype=np.float64) for x in (a, b, c, d))
    zero = (a == 0) | (b == 0) | (c == 0) | (d == 0)
    shift = np.where(zero, 0.5, 0.0)
    a, b, c, d = a + shift, b + shift, c + shift, d + shift
    return (a * d) / (b * c)


def odds_ratio_mha(t: ContingencyTable) -> float:
    return float(_mha(t.a, t.b, t.c, t.d))


def odds_ratio_legacy(t: ContingencyTable) -> float:
    """Uncorrected odds ratio with undefined/infinite values imputed by the pool size."""
    if t.b * t.c == 0:
        return float(t.pool_size)
    return (t.a * t.d) / (t.b * t.c)


def geometric_mean_or(values: Iterable[float]) -> float:
    x = np.asarray(list(values), dtype=np.float64)
    if x.size == 0:
        raise ValueError("geometric mean of an empty list")
    if (x <= 0).any() or not np.isfinite(x).all():
        raise ValueError("geometric mean requires finite positive values")
    return float(np.exp(np.mean(np.log(x))))


def majority_vote(significant: Sequence[bool]) -> bool:
    """True when strictly more than half of the flags are set."""
    return 2 * sum(bool(s) for s in significant) > len(significant)


def _rng_for(seed: int, key: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(key.encode("utf-8"))])


def _score_query(scores, eligible, related, k, n_permutations, rng, topk):
    """Table, mHA odds ratio and permutation p-value for one query."""
    n = int(eligible.sum())
    n_related = int((related & eligible).sum())
    a = topk(scores, eligible, related, k)
    table = ContingencyTable(a, k - a, n_related - a, n - k - (n_related - a))
    observed = odds_ratio_mha(table)
    # a uniformly random size-k subset of the pool holds a hypergeometric number of related items
    a_null = rng.hypergeometric(n_related, n - n_related, k, size=n_permutations)
    null = _mha(a_null, k - a_null, n_related - a_null, n - k - n_related + a_null)
    p_value = float(np.count_nonzero(null >= observed)) / n_permutations
    return table, observed, p_value


def permutation_pvalue(
    query: ConsensusProfile,
    pool: Sequence[ConsensusProfile],
    related: set[str] | frozenset[str],
    k: int,
    n_permutations: int = 100,
    seed: int = 0,
) -> tuple[float, float]:
    """``(p_value, observed_or)`` for ``query`` against an already-filtered pool."""
    if len(pool) <= k:
        raise ValueError(f"pool of {len(pool)} is not larger than k={k}")
    rel = np.array([c.perturbation_id in related for c in pool])
    if not rel.any():
        raise ValueError("class too small: no related perturbation in the pool")
    order = sorted(range(len(pool)), key=lambda i: (pool[i].perturbation_id, pool[i].scope_key))
    pool = [pool[i] for i in order]
    rel = rel[order]
    M = unit_rows(np.vstack([c.vector for c in pool]))
    q = unit_rows(np.asarray(query.vector, dtype=np.float64)[None, :])[0]
    rng = _rng_for(seed, f"{query.perturbation_id}|{query.scope_key}")
    _, observed, p = _score_query(
        M @ q, np.ones(len(pool), dtype=bool), rel, k, n_permutations, rng,
        _kernels.backend.topk_related,
    )
    return p, observed


@dataclass(frozen=True)
class QueryEnrichment:
    query_id: str
    scope_key: str
    odds_ratio: float
    p_value: float
    table: ContingencyTable


def fraction_significant(per_query: Sequence[QueryEnrichment] | Sequence[float], alpha: float = 0.05) -> float:
    """Percentage of queries with p strictly below ``alpha``."""
    p = [q.p_value if isinstance(q, QueryEnrichment) else float(q) for q in per_query]
    if not p:
        return 0.0
    return 100.0 * sum(v < alpha for v in p) / len(p)


@dataclass
class EnrichmentResult:
    geometric_mean_or: float
    fraction_significant: float
    n_queries: int
    per_query: list[QueryEnrichment]
    level: StringencyLevel
    database_name: str
    compound_enriched: dict[str, bool] = field(default_factory=dict)
    skipped: dict[str, int] = field(default_factory=dict)
    legacy_mean_or: float | None = None

    @property
    def n_skipped(self) -> int:
        return sum(self.skipped.values())

    @property
    def significant_ids(self) -> set[str]:
        return {p for p, hit in self.compound_enriched.items() if hit}

    def per_query_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                (q.query_id, q.scope_key, q.table.a, q.table.b, q.table.c, q.table.d, q.odds_ratio, q.p_value)
                for q in self.per_query
            ],
            columns=["query_id", "scope_key", "a", "b", "c", "d", "odds_ratio", "p_value"],
        )


def _stack(consensus: list[ConsensusProfile]):
    X = np.vstack([c.vector for c in consensus])
    pert = np.array([c.perturbation_id for c in consensus], dtype=object)
    pert_names, pert_code = np.unique(pert, return_inverse=True)
    batch_code = np.unique(np.array([c.scope_key for c in consensus], dtype=object), return_inverse=True)[1]
    source_code = np.unique(np.array([c.source for c in consensus], dtype=object), return_inverse=True)[1]
    return unit_rows(X), pert_names, pert_code, batch_code, source_code


def evaluate_enrichment(
    profiles: ProfileSet,
    labels: LabelStore,
    level: StringencyLevel | str = StringencyLevel.NR,
    fraction: float = 0.01,
    n_permutations: int = 100,
    alpha: float = 0.05,
    seed: int = 0,
    jobs: int = 1,
    aggregate: Literal["per_query", "per_compound"] = "per_query",
    legacy: bool = False,
) -> EnrichmentResult:
    """Enrichment of ``labels`` among cosine neighbours at one stringency level.

    NR compares global consensus profiles. NSB and NSS compare batchwise
    consensus profiles against batchwise candidates from other batches
    (NSB) or other sources (NSS); a compound counts as enriched when more
    than half of its batchwise queries are significant. Candidates of the
    query's own perturbation never enter its pool.
    """
    level = StringencyLevel.parse(level)
    if level is StringencyLevel.NSL:
        raise ValueError("NSL is not defined for consensus-level enrichment")
    consensus = build_consensus(profiles, "global" if level is StringencyLevel.NR else "per_batch")
    if not consensus:
        raise EnrichmentError("no non-control perturbations to evaluate")
    labels = labels.restrict(c.perturbation_id for c in consensus)
    Xn, pert_names, pert_code, batch_code, source_code = _stack(consensus)
    n_pert = len(pert_names)
    index_of = {p: i for i, p in enumerate(pert_names)}
    universe = labels.universe
    related_codes = []
    for p in pert_names:
        rel = np.zeros(n_pert, dtype=bool)
        for other in related_set(labels, p) if p in universe else ():
            if other in index_of:
                rel[index_of[other]] = True
        related_codes.append(rel)

    topk = _kernels.backend.topk_related

    def run_block(rows: np.ndarray):
        sims = Xn[rows] @ Xn.T
        out = []
        for r, qi in enumerate(rows):
            qp = pert_code[qi]
            eligible = pert_code != qp
            if level is StringencyLevel.NSB:
                eligible &= batch_code != batch_code[qi]
            elif level is StringencyLevel.NSS:
                eligible &= source_code != source_code[qi]
            related = related_codes[qp][pert_code]
            if pert_names[qp] not in universe:
                out.append((qi, "unlabeled", None))
                continue
            if not related_codes[qp].any():
                out.append((qi, "class too small", None))
                continue
            if not (related & eligible).any():
                out.append((qi, "no related candidate in pool", None))
                continue
            n_unique = np.count_nonzero(np.bincount(pert_code[eligible], minlength=n_pert))
            k = top_fraction_cutoff(n_unique, fraction)
            if eligible.sum() <= k:
                out.append((qi, "pool not larger than cutoff", None))
                continue
            c = consensus[qi]
            rng = _rng_for(seed, f"{c.perturbation_id}|{c.scope_key}")
            out.append((qi, None, _score_query(sims[r], eligible, related, k, n_permutations, rng, topk)))
        return out

    blocks = [np.arange(i, min(i + _BLOCK, len(consensus))) for i in range(0, len(consensus), _BLOCK)]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = [item for chunk in pool.map(run_block, blocks) for item in chunk]
    else:
        results = [item for b in blocks for item in run_block(b)]

    per_query: list[QueryEnrichment] = []
    skipped: Counter[str] = Counter()
    votes: dict[str, list[bool]] = {}
    for qi, reason, scored in results:
        if reason is not None:
            skipped[reason] += 1
            continue
        table, odds, p = scored
        c = consensus[qi]
        per_query.append(QueryEnrichment(c.perturbation_id, c.scope_key, odds, p, table))
        votes.setdefault(c.perturbation_id, []).append(p < alpha)

    if not per_query:
        raise EnrichmentError(f"no eligible queries at {level.value} ({dict(skipped)})")

    enriched = {p: majority_vote(v) for p, v in sorted(votes.items())}
    if aggregate == "per_query":
        gm = geometric_mean_or(q.odds_ratio for q in per_query)
    else:
        by_compound: dict[str, list[float]] = {}
        for q in per_query:
            by_compound.setdefault(q.query_id, []).append(q.odds_ratio)
        gm = geometric_mean_or(geometric_mean_or(v) for _, v in sorted(by_compound.items()))

    legacy_mean = None
    if legacy:
        legacy_mean = float(np.mean([odds_ratio_legacy(q.table) for q in per_query]))

    return EnrichmentResult(
        geometric_mean_or=gm,
        fraction_significant=100.0 * sum(enriched.values()) / len(enriched),
        n_queries=len(per_query),
        per_query=per_query,
        level=level,
        database_name=labels.database_name,
        compound_enriched=enriched,
        skipped=dict(sorted(skipped.items())),
        legacy_mean_or=legacy_mean,
    )


def evaluate_databases(
    profiles: ProfileSet,
    stores: Sequence[LabelStore],
    level: StringencyLevel | str,
    **kwargs,
) -> tuple[dict[str, EnrichmentResult], dict[str, float]]:
    """Per-database results plus their macro average (mean of each metric)."""
    results = {}
    for store in sorted(stores, key=lambda s: s.database_name):
        try:
            results[store.database_name] = evaluate_enrichment(profiles, store, level, **kwargs)
        except EnrichmentError as exc:
            logger.warning("database %s skipped: %s", store.database_name, exc)
    if not results:
        raise EnrichmentError("no database produced an eligible query")
    macro = {
        "geometric_mean_or": float(np.mean([r.geometric_mean_or for r in results.values()])),
        "fraction_significant": float(np.mean([r.fraction_significant for r in results.values()])),
    }
    return results, macro


def jaccard_discovery_overlap(sets: Mapping[str, set[str]]) -> pd.DataFrame:
    """Pairwise Jaccard similarity of per-method discovery sets."""
    if len(sets) < 2:
        raise ValueError("need at least two methods")
    names = sorted(sets)
    J = np.ones((len(names), len(names)))
    for i, a in enumerate(names):
        for j in range(i + 1, len(names)):
            A, B = set(sets[a]), set(sets[names[j]])
            union = A | B
            J[i, j] = J[j, i] = len(A & B) / len(union) if union else 1.0
    return pd.DataFrame(J, index=names, columns=names)
