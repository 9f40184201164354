"""Well-level profiles, their metadata, and biological label stores.

A dataset on disk is a directory holding a plain-text manifest::

    dataset_name=cpg-target2
    meta_table=meta.csv
    feature_table=features.csv

The metadata CSV header carries exactly the :class:`WellMeta` field names.
The feature table is keyed by ``well_id`` and is either CSV or parquet.
"""

from __future__ import annotations

import hashlib
import logging
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Iterator, Literal

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

PERTURBATION_TYPES = ("compound", "crispr", "control")
MANIFEST_NAME = "manifest.txt"


class DatasetError(ValueError):
    """Raised when a dataset or label file fails validation."""


@dataclass(frozen=True)
class WellMeta:
    well_id: str
    source: str
    batch: str
    plate: str
    well_position: str
    perturbation_id: str
    perturbation_type: str
    is_negative_control: bool
    cell_count: int | None = None

    def __post_init__(self) -> None:
        if self.perturbation_type not in PERTURBATION_TYPES:
            raise DatasetError(
                f"well {self.well_id}: unknown perturbation_type {self.perturbation_type!r}"
            )
        if self.is_negative_control and self.perturbation_type != "control":
            raise DatasetError(
                f"well {self.well_id}: negative control must have perturbation_type 'control'"
            )
        if self.cell_count is not None and self.cell_count < 0:
            raise DatasetError(f"well {self.well_id}: negative cell_count")


META_FIELDS: tuple[str, ...] = tuple(f.name for f in fields(WellMeta))
_STRING_FIELDS = META_FIELDS[:7]


def _normalize_meta_frame(meta: pd.DataFrame) -> pd.DataFrame:
    missing = [c for c in META_FIELDS if c not in meta.columns]
    if missing:
        raise DatasetError(f"metadata is missing columns: {missing}")
    out = pd.DataFrame(index=pd.RangeIndex(len(meta)))
    for name in _STRING_FIELDS:
        out[name] = meta[name].astype(str).to_numpy()
    out["is_negative_control"] = meta["is_negative_control"].astype(bool).to_numpy()
    out["cell_count"] = pd.array(meta["cell_count"], dtype="Int64")
    return out


def _validate_meta(meta: pd.DataFrame) -> None:
    dup = meta["well_id"].duplicated(keep=False)
    if dup.any():
        raise DatasetError(f"duplicate well_id: {sorted(set(meta['well_id'][dup]))[:5]}")
    bad_type = ~meta["perturbation_type"].isin(PERTURBATION_TYPES)
    if bad_type.any():
        raise DatasetError(
            f"unknown perturbation_type in wells {list(meta['well_id'][bad_type][:5])}"
        )
    bad_ctrl = meta["is_negative_control"] & (meta["perturbation_type"] != "control")
    if bad_ctrl.any():
        raise DatasetError(
            f"negative controls must have perturbation_type 'control': {list(meta['well_id'][bad_ctrl][:5])}"
        )
    counts = meta["cell_count"]
    if (counts.dropna() < 0).any():
        raise DatasetError("cell_count must be non-negative")


@dataclass(frozen=True, eq=False)
class ProfileSet:
    """Feature matrix plus per-well metadata; row ``i`` of ``features`` is ``meta.iloc[i]``.

    Instances are treated as immutable: the feature array is flagged read-only
    and every transform returns a new set.
    """

    features: np.ndarray
    meta: pd.DataFrame
    feature_names: list[str] | None = None
    provenance: str = ""
    name: str = ""
    _codes: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        X = np.array(self.features, dtype=np.float64, order="C", copy=True)
        if X.ndim != 2:
            raise DatasetError("features must be a 2-d matrix")
        meta = _normalize_meta_frame(self.meta)
        if len(meta) != X.shape[0]:
            raise DatasetError(
                f"features have {X.shape[0]} rows but metadata has {len(meta)}"
            )
        _validate_meta(meta)
        if not np.isfinite(X).all():
            row = int(np.flatnonzero(~np.isfinite(X).all(axis=1))[0])
            raise DatasetError(f"non-finite feature value in well {meta['well_id'].iat[row]}")
        if self.feature_names is not None and len(self.feature_names) != X.shape[1]:
            raise DatasetError("feature_names length does not match feature dimension")
        X.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "meta", meta)
        if self.feature_names is not None:
            object.__setattr__(self, "feature_names", list(self.feature_names))

    @property
    def n_wells(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.n_wells

    def well(self, i: int) -> WellMeta:
        row = self.meta.iloc[i]
        count = row["cell_count"]
        return WellMeta(
            **{k: row[k] for k in _STRING_FIELDS},
            is_negative_control=bool(row["is_negative_control"]),
            cell_count=None if pd.isna(count) else int(count),
        )

    def wells(self) -> Iterator[WellMeta]:
        for i in range(self.n_wells):
            yield self.well(i)

    def column(self, name: str) -> np.ndarray:
        return self.meta[name].to_numpy()

    def codes(self, name: str) -> np.ndarray:
        """Integer codes for a metadata column, assigned in sorted order of its values."""
        if name not in self._codes:
            values = self.meta[name].to_numpy()
            _, inverse = np.unique(values, return_inverse=True)
            self._codes[name] = inverse.astype(np.int64)
        return self._codes[name]

    @property
    def is_control(self) -> np.ndarray:
        return self.meta["is_negative_control"].to_numpy(dtype=bool)

    def take(self, rows: np.ndarray | Iterable[int]) -> ProfileSet:
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        return ProfileSet(
            features=self.features[rows],
            meta=self.meta.iloc[rows].reset_index(drop=True),
            feature_names=self.feature_names,
            provenance=self.provenance,
            name=self.name,
        )

    def with_features(
        self, features: np.ndarray, provenance: str | None = None, keep_names: bool = False
    ) -> ProfileSet:
        return ProfileSet(
            features=features,
            meta=self.meta,
            feature_names=self.feature_names if keep_names else None,
            provenance=self.provenance if provenance is None else provenance,
            name=self.name,
        )

    def with_meta(self, meta: pd.DataFrame) -> ProfileSet:
        return ProfileSet(
            features=self.features,
            meta=meta,
            feature_names=self.feature_names,
            provenance=self.provenance,
            name=self.name,
        )

    def sorted_by_well_id(self) -> ProfileSet:
        order = np.argsort(self.meta["well_id"].to_numpy(), kind="stable")
        if np.array_equal(order, np.arange(self.n_wells)):
            return self
        return self.take(order)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.features).tobytes())
        h.update(self.meta.to_csv(index=False).encode())
        return h.hexdigest()[:16]

    def equals(self, other: ProfileSet) -> bool:
        return (
            self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
            and self.meta.equals(other.meta)
        )


# --------------------------------------------------------------------------
# On-disk format
# --------------------------------------------------------------------------


def read_manifest(path: str | Path) -> tuple[Path, dict[str, str]]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    entries: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DatasetError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    for key in ("meta_table", "feature_table"):
        if key not in entries:
            raise DatasetError(f"{path}: manifest lacks {key}")
    return path.parent, entries


def _parse_bool(values: pd.Series) -> np.ndarray:
    lowered = values.astype(str).str.strip().str.lower()
    truthy = lowered.isin(["true", "1", "yes", "t"])
    falsy = lowered.isin(["false", "0", "no", "f"])
    if not (truthy | falsy).all():
        raise DatasetError(f"unparseable is_negative_control values: {set(values[~(truthy | falsy)])}")
    return truthy.to_numpy()


def _read_meta_table(path: Path) -> pd.DataFrame:
    if not path.exists():
        raise FileNotFoundError(f"metadata table not found: {path}")
    raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    if list(raw.columns) != list(META_FIELDS):
        raise DatasetError(
            f"{path}: header must be exactly {','.join(META_FIELDS)}; got {','.join(raw.columns)}"
        )
    counts = raw["cell_count"].str.strip()
    raw["cell_count"] = pd.array(
        [None if c == "" else int(c) for c in counts], dtype="Int64"
    )
    raw["is_negative_control"] = _parse_bool(raw["is_negative_control"])
    return raw


def _read_feature_table(path: Path) -> tuple[np.ndarray, np.ndarray, list[str]]:
    if not path.exists():
        raise FileNotFoundError(f"feature table not found: {path}")
    if path.suffix == ".parquet":
        table = pd.read_parquet(path)
    else:
        table = pd.read_csv(path, float_precision="round_trip", dtype={"well_id": str})
    if "well_id" not in table.columns:
        raise DatasetError(f"{path}: feature table lacks a well_id column")
    ids = table["well_id"].astype(str).to_numpy()
    names = [str(c) for c in table.columns if c != "well_id"]
    values = table[names].to_numpy(dtype=np.float64)
    return ids, values, names


def load_profile_set(
    manifest_path: str | Path, mismatch_tolerance: float = 0.0
) -> ProfileSet:
    """Load, join and validate a dataset; rows come back sorted by ``well_id``.

    ``mismatch_tolerance`` is the fraction of well_ids allowed to appear in only
    one of the two tables. Such rows are dropped and the count logged.
    """
    root, manifest = read_manifest(manifest_path)
    meta = _read_meta_table(root / manifest["meta_table"])
    ids, X, names = _read_feature_table(root / manifest["feature_table"])

    if len(set(ids)) != len(ids):
        raise DatasetError("duplicate well_id in feature table")
    if meta["well_id"].duplicated().any():
        raise DatasetError("duplicate well_id in metadata table")

    bad = ~np.isfinite(X).all(axis=1)
    if bad.any():
        raise DatasetError(f"non-finite feature values in well(s) {list(ids[bad][:5])}")

    meta_ids = set(meta["well_id"])
    feat_ids = set(ids)
    extra_features = feat_ids - meta_ids
    extra_meta = meta_ids - feat_ids
    total = len(meta_ids | feat_ids)
    if extra_features and len(extra_features) / total > mismatch_tolerance:
        raise DatasetError(
            f"unmatched feature rows: {len(extra_features)} well_id(s) absent from metadata, "
            f"e.g. {sorted(extra_features)[:3]}"
        )
    if extra_meta and len(extra_meta) / total > mismatch_tolerance:
        raise DatasetError(
            f"unmatched metadata rows: {len(extra_meta)} well_id(s) without features, "
            f"e.g. {sorted(extra_meta)[:3]}"
        )
    if extra_features or extra_meta:
        logger.warning(
            "dropped %d feature rows without metadata and %d metadata rows without features",
            len(extra_features), len(extra_meta),
        )

    meta = meta[meta["well_id"].isin(feat_ids)]
    meta = meta.sort_values("well_id", kind="stable").reset_index(drop=True)
    row_of = {w: i for i, w in enumerate(ids)}
    X = X[[row_of[w] for w in meta["well_id"]]]
    meta = _disambiguate_batches(meta)

    dataset_name = manifest.get("dataset_name", root.name)
    return ProfileSet(
        features=X,
        meta=meta,
        feature_names=names,
        provenance=manifest.get("provenance", dataset_name),
        name=dataset_name,
    )


def _disambiguate_batches(meta: pd.DataFrame) -> pd.DataFrame:
    sources_per_batch = meta.groupby("batch")["source"].nunique()
    if (sources_per_batch > 1).any():
        logger.info("batch ids shared across sources; prefixing batch with source")
        meta = meta.copy()
        meta["batch"] = meta["source"] + "/" + meta["batch"]
    return meta


def save_profile_set(
    profiles: ProfileSet,
    directory: str | Path,
    dataset_name: str | None = None,
    feature_format: Literal["csv", "parquet"] = "csv",
) -> Path:
    """Write ``profiles`` in the manifest layout; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = profiles.meta.copy()
    meta["is_negative_control"] = np.where(meta["is_negative_control"], "true", "false")
    meta["cell_count"] = [
        "" if pd.isna(c) else str(int(c)) for c in profiles.meta["cell_count"]
    ]
    meta.to_csv(directory / "meta.csv", index=False)

    names = profiles.feature_names or [f"f{j:04d}" for j in range(profiles.dim)]
    table = pd.DataFrame(profiles.features, columns=names)
    table.insert(0, "well_id", profiles.meta["well_id"].to_numpy())
    feature_file = f"features.{feature_format}"
    if feature_format == "parquet":
        table.to_parquet(directory / feature_file, index=False)
    elif feature_format == "csv":
        table.to_csv(directory / feature_file, index=False, float_format="%.17g")
    else:
        raise ValueError(f"unknown feature format {feature_format!r}")

    name = dataset_name or profiles.name or directory.name
    lines = [
        f"dataset_name={name}",
        "meta_table=meta.csv",
        f"feature_table={feature_file}",
    ]
    if profiles.provenance:
        lines.append(f"provenance={profiles.provenance}")
    manifest = directory / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


# --------------------------------------------------------------------------
# Labels
# --------------------------------------------------------------------------

LabelKind = Literal["class_sets", "pair_relations"]


@dataclass(frozen=True)
class LabelStore:
    """Ground-truth relations between perturbations.

    ``class_sets`` maps a class label (e.g. an MoA) to its member perturbations;
    ``pair_relations`` holds unordered pairs as sorted tuples. Classes in
    ``skipped_classes`` have fewer than two members in the dataset and are
    ignored at query time.
    """

    kind: LabelKind
    database_name: str = ""
    class_sets: dict[str, frozenset[str]] = field(default_factory=dict)
    pair_relations: frozenset[tuple[str, str]] = frozenset()
    skipped_classes: frozenset[str] = frozenset()
    _index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.kind not in ("class_sets", "pair_relations"):
            raise DatasetError(f"unknown label kind {self.kind!r}")
        index: dict[str, set[str]] = {}
        if self.kind == "class_sets":
            for label, members in self.class_sets.items():
                if label in self.skipped_classes:
                    continue
                for p in members:
                    index.setdefault(p, set()).update(members)
            for p, rel in index.items():
                rel.discard(p)
        else:
            for a, b in self.pair_relations:
                if a == b:
                    raise DatasetError(f"self-pair ({a},{a}) in pair relations")
                index.setdefault(a, set()).add(b)
                index.setdefault(b, set()).add(a)
        object.__setattr__(self, "_index", {p: frozenset(r) for p, r in index.items()})

    @property
    def universe(self) -> frozenset[str]:
        if self.kind == "class_sets":
            return frozenset().union(*self.class_sets.values()) if self.class_sets else frozenset()
        return frozenset(p for pair in self.pair_relations for p in pair)

    def restrict(self, perturbations: Iterable[str]) -> LabelStore:
        present = set(perturbations)
        if self.kind == "class_sets":
            classes = {c: frozenset(m & present) for c, m in self.class_sets.items()}
            classes = {c: m for c, m in classes.items() if m}
            skipped = frozenset(c for c, m in classes.items() if len(m) < 2)
            if skipped:
                logger.info("%d classes have fewer than 2 members present; skipped at query time", len(skipped))
            return LabelStore("class_sets", self.database_name, classes, skipped_classes=skipped)
        pairs = frozenset(p for p in self.pair_relations if p[0] in present and p[1] in present)
        return LabelStore("pair_relations", self.database_name, pair_relations=pairs)


def related_set(store: LabelStore, query: str) -> frozenset[str]:
    """Perturbations sharing a class with (or paired to) ``query``, excluding itself."""
    if query not in store._index:
        if query not in store.universe:
            warnings.warn(f"perturbation {query!r} is not in label store {store.database_name!r}")
        return frozenset()
    return store._index[query]


def load_label_store(
    path: str | Path,
    kind: LabelKind,
    profiles: ProfileSet | None = None,
    database_name: str | None = None,
) -> LabelStore:
    """Read a two-column CSV (``class,perturbation`` or ``gene_a,gene_b``)."""
    if kind not in ("class_sets", "pair_relations"):
        raise DatasetError(f"unknown label kind {kind!r}")
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"label file not found: {path}")
    table = pd.read_csv(path, dtype=str, keep_default_na=False)
    if table.shape[1] != 2:
        raise DatasetError(f"{path}: expected a two-column table, got {table.shape[1]} columns")
    if table.empty:
        raise DatasetError(f"{path}: label file is empty")
    name = database_name or path.stem
    left = table.iloc[:, 0].to_numpy()
    right = table.iloc[:, 1].to_numpy()
    if kind == "class_sets":
        classes: dict[str, set[str]] = {}
        for label, pert in zip(left, right):
            classes.setdefault(label, set()).add(pert)
        store = LabelStore(kind, name, {c: frozenset(m) for c, m in sorted(classes.items())})
    else:
        pairs = {tuple(sorted((a, b))) for a, b in zip(left, right) if a != b}
        n_self = int(np.sum(left == right))
        if n_self:
            logger.warning("%s: dropped %d self-pairs", path, n_self)
        store = LabelStore(kind, name, pair_relations=frozenset(pairs))
    if profiles is not None:
        store = store.restrict(set(profiles.column("perturbation_id")))
    return store


def save_label_store(store: LabelStore, path: str | Path) -> Path:
    path = Path(path)
    if store.kind == "class_sets":
        rows = [(c, p) for c in sorted(store.class_sets) for p in sorted(store.class_sets[c])]
        frame = pd.DataFrame(rows, columns=["class", "perturbation"])
    else:
        frame = pd.DataFrame(sorted(store.pair_relations), columns=["gene_a", "gene_b"])
    frame.to_csv(path, index=False)
    return path
