"""Hot retrieval kernels with a numba path and a pure-numpy fallback.

Set ``MORPHOEVAL_BACKEND=numpy`` to force the fallback; by default the numba
path is used when numba imports cleanly. Both paths share one ranking
convention: descending similarity, ties broken by ascending row index.

Stringency levels are passed as integer codes: 0 NR, 1 NSB, 2 NSS, 3 NSL.
"""

from __future__ import annotations

import logging
import os
import warnings
from types import SimpleNamespace

import numpy as np

logger = logging.getLogger(__name__)

LEVEL_NR, LEVEL_NSB, LEVEL_NSS, LEVEL_NSL = 0, 1, 2, 3

try:  # pragma: no cover - exercised implicitly by the backend tests
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False


def _excluded_numpy(q, level, batch, source, pos):
    if level == LEVEL_NSB:
        return batch == batch[q]
    if level == LEVEL_NSS:
        return source == source[q]
    if level == LEVEL_NSL:
        return pos == pos[q]
    return np.zeros(batch.shape[0], dtype=bool)


def _ap_numpy(scores, idx, positive):
    order = np.lexsort((idx, -scores))
    hits = positive[order]
    n_pos = hits.sum()
    if n_pos == 0:
        return np.nan
    ranks = np.flatnonzero(hits) + 1.0
    total = 0.0
    for i, r in enumerate(ranks):
        total += (i + 1.0) / r
    return total / n_pos


def rank_block_numpy(sims, query_rows, pert, batch, source, pos, ctrl, level):
    """Replicate-retrieval statistics for a block of queries.

    ``sims[r]`` holds cosine similarities of ``query_rows[r]`` to all wells.
    Returns ``(nn_hit, ap, negcon_ap, n_pos, n_pool, n_ctrl)``; ``nn_hit`` is
    -1 for skipped queries and the AP arrays are NaN where undefined.
    """
    nq, n = sims.shape
    nn_hit = np.full(nq, -1, dtype=np.int8)
    ap = np.full(nq, np.nan)
    nc_ap = np.full(nq, np.nan)
    n_pos = np.zeros(nq, dtype=np.int64)
    n_pool = np.zeros(nq, dtype=np.int64)
    n_ctrl = np.zeros(nq, dtype=np.int64)
    all_idx = np.arange(n)
    for r in range(nq):
        q = query_rows[r]
        row = sims[r]
        eligible = ~_excluded_numpy(q, level, batch, source, pos)
        eligible[q] = False
        same = (pert == pert[q]) & ~ctrl
        plain = np.flatnonzero(eligible & ~ctrl)
        ctrl_pool = eligible & ctrl
        n_pool[r] = plain.size
        n_ctrl[r] = ctrl_pool.sum()
        positive = same[plain]
        n_pos[r] = positive.sum()
        if n_pos[r] == 0:
            continue
        scores = row[plain]
        best = plain[np.lexsort((plain, -scores))[0]]
        nn_hit[r] = 1 if same[best] else 0
        ap[r] = _ap_numpy(scores, plain, positive)
        if n_ctrl[r] > 0:
            nc = np.flatnonzero((eligible & same) | ctrl_pool)
            nc_ap[r] = _ap_numpy(row[nc], all_idx[nc], same[nc])
    return nn_hit, ap, nc_ap, n_pos, n_pool, n_ctrl


def topk_related_numpy(scores, eligible, related, k):
    """Number of ``related`` entries among the top-``k`` eligible scores."""
    idx = np.flatnonzero(eligible)
    order = np.lexsort((idx, -scores[idx]))
    return int(related[idx[order[:k]]].sum())


if HAVE_NUMBA:

    @njit(cache=True, nogil=True)
    def _ranks_above(pos_s, pos_j, s, j):
        # number of sorted positives ranking strictly above candidate (s, j)
        lo, hi = 0, pos_s.shape[0]
        while lo < hi:
            mid = (lo + hi) // 2
            if pos_s[mid] > s or (pos_s[mid] == s and pos_j[mid] < j):
                lo = mid + 1
            else:
                hi = mid
        return lo

    @njit(cache=True, nogil=True)
    def _rank_block_numba(sims, query_rows, pert, batch, source, pos, ctrl, level):
        nq, n = sims.shape
        nn_hit = np.full(nq, -1, dtype=np.int8)
        ap = np.full(nq, np.nan)
        nc_ap = np.full(nq, np.nan)
        n_pos = np.zeros(nq, dtype=np.int64)
        n_pool = np.zeros(nq, dtype=np.int64)
        n_ctrl = np.zeros(nq, dtype=np.int64)
        buf_s = np.empty(n)
        buf_j = np.empty(n, dtype=np.int64)
        for r in range(nq):
            q = query_rows[r]
            row = sims[r]
            qp = pert[q]
            npos = 0
            npool = 0
            nctrl = 0
            best_s = -np.inf
            best_j = -1
            for j in range(n):
                if j == q:
                    continue
                if level == 1 and batch[j] == batch[q]:
                    continue
                if level == 2 and source[j] == source[q]:
                    continue
                if level == 3 and pos[j] == pos[q]:
                    continue
                if ctrl[j]:
                    nctrl += 1
                    continue
                npool += 1
                s = row[j]
                if s > best_s:
                    best_s = s
                    best_j = j
                if pert[j] == qp:
                    buf_s[npos] = s
                    buf_j[npos] = j
                    npos += 1
            n_pos[r] = npos
            n_pool[r] = npool
            n_ctrl[r] = nctrl
            if npos == 0:
                continue
            nn_hit[r] = 1 if pert[best_j] == qp else 0

            order = np.argsort(-buf_s[:npos], kind="mergesort")
            pos_s = buf_s[:npos][order]
            pos_j = buf_j[:npos][order]
            above_plain = np.zeros(npos + 1, dtype=np.int64)
            above_ctrl = np.zeros(npos + 1, dtype=np.int64)
            for j in range(n):
                if j == q:
                    continue
                if level == 1 and batch[j] == batch[q]:
                    continue
                if level == 2 and source[j] == source[q]:
                    continue
                if level == 3 and pos[j] == pos[q]:
                    continue
                if ctrl[j]:
                    above_ctrl[_ranks_above(pos_s, pos_j, row[j], j)] += 1
                elif pert[j] != qp:
                    above_plain[_ranks_above(pos_s, pos_j, row[j], j)] += 1

            total = 0.0
            negs = 0
            for i in range(npos):
                negs += above_plain[i]
                total += (i + 1.0) / (i + 1.0 + negs)
            ap[r] = total / npos
            if nctrl > 0:
                total = 0.0
                negs = 0
                for i in range(npos):
                    negs += above_ctrl[i]
                    total += (i + 1.0) / (i + 1.0 + negs)
                nc_ap[r] = total / npos
        return nn_hit, ap, nc_ap, n_pos, n_pool, n_ctrl

    @njit(cache=True, nogil=True)
    def _topk_related_numba(scores, eligible, related, k):
        top_s = np.full(k, -np.inf)
        top_j = np.full(k, -1, dtype=np.int64)
        filled = 0
        for j in range(scores.shape[0]):
            if not eligible[j]:
                continue
            s = scores[j]
            if filled == k and s <= top_s[k - 1]:
                continue
            # insertion into the descending list; equal scores keep earlier index first
            i = filled if filled < k else k - 1
            while i > 0 and top_s[i - 1] < s:
                if i < k:
                    top_s[i] = top_s[i - 1]
                    top_j[i] = top_j[i - 1]
                i -= 1
            top_s[i] = s
            top_j[i] = j
            if filled < k:
                filled += 1
        count = 0
        for i in range(filled):
            if related[top_j[i]]:
                count += 1
        return count

    def rank_block_numba(sims, query_rows, pert, batch, source, pos, ctrl, level):
        return _rank_block_numba(
            np.ascontiguousarray(sims, dtype=np.float64),
            np.asarray(query_rows, dtype=np.int64),
            pert, batch, source, pos, ctrl, int(level),
        )

    def topk_related_numba(scores, eligible, related, k):
        return int(_topk_related_numba(
            np.ascontiguousarray(scores, dtype=np.float64), eligible, related, int(k)
        ))


NUMPY = SimpleNamespace(name="numpy", rank_block=rank_block_numpy, topk_related=topk_related_numpy)
NUMBA = (
    SimpleNamespace(name="numba", rank_block=rank_block_numba, topk_related=topk_related_numba)
    if HAVE_NUMBA
    else None
)


def select_backend(name: str | None = None) -> SimpleNamespace:
    name = (name or os.environ.get("MORPHOEVAL_BACKEND", "numba")).lower()
    if name == "numpy":
        return NUMPY
    if name != "numba":
        raise ValueError(f"unknown backend {name!r}; expected 'numba' or 'numpy'")
    if NUMBA is None:
        logger.warning("numba unavailable; falling back to the numpy backend")
        return NUMPY
    return NUMBA


backend = select_backend()


def unit_rows(X: np.ndarray) -> np.ndarray:
    """Rows scaled to unit norm; zero rows stay zero so their similarity is 0."""
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    zero = norms[:, 0] == 0
    if zero.any():
        warnings.warn(f"{int(zero.sum())} zero-norm vector(s); cosine similarity set to 0")
        norms = norms.copy()
        norms[zero] = 1.0
    return X / norms
