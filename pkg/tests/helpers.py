"""Builders for small hand-made datasets used across the test suite."""

from __future__ import annotations

import numpy as np
import pandas as pd

from morphoeval.profiles import ProfileSet


def make_set(
    X,
    perts,
    batches=None,
    sources=None,
    plates=None,
    positions=None,
    controls=None,
    counts=None,
    ids=None,
) -> ProfileSet:
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    perts = list(perts)
    controls = [p == "DMSO" for p in perts] if controls is None else list(controls)
    batches = list(batches) if batches is not None else ["b0"] * n
    sources = list(sources) if sources is not None else ["s0"] * n
    meta = pd.DataFrame({
        "well_id": list(ids) if ids is not None else [f"w{i:04d}" for i in range(n)],
        "source": sources,
        "batch": batches,
        "plate": list(plates) if plates is not None else [f"{b}_p0" for b in batches],
        "well_position": list(positions) if positions is not None else [f"A{i + 1:02d}" for i in range(n)],
        "perturbation_id": perts,
        "perturbation_type": ["control" if c else "compound" for c in controls],
        "is_negative_control": controls,
        "cell_count": list(counts) if counts is not None else [None] * n,
    })
    return ProfileSet(features=X, meta=meta, name="toy")


def unit(angle_deg: float, dims: int = 2) -> np.ndarray:
    v = np.zeros(dims)
    v[0] = np.cos(np.radians(angle_deg))
    v[1] = np.sin(np.radians(angle_deg))
    return v


def imbalanced_recall_case() -> ProfileSet:
    """Perturbation A: 8 wells, 4 with an A nearest neighbour. B: 2 wells, both correct.

    Macro Recall@1 is (4/8 + 2/2) / 2 = 0.75; pooling all queries would give 6/10.
    """
    def tilt(axis, sign, deg=3.0):
        v = np.zeros(3)
        v[0] = np.cos(np.radians(deg))
        v[axis] = sign * np.sin(np.radians(deg))
        return v

    X = [
        [1, 0, 0], [1, 0, 0],                      # B pair, each other's nearest neighbour
        [0, 1, 0], [0, 1, 0.01],                   # A pair near +y
        [0, -1, 0], [0, -1, 0.01],                 # A pair near -y
        tilt(1, 1), tilt(1, -1), tilt(2, 1), tilt(2, -1),  # A wells whose nearest neighbour is B
    ]
    perts = ["B", "B"] + ["A"] * 8
    return make_set(np.asarray(X, dtype=np.float64), perts)
