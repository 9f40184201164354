"""Benchmark orchestration: QC -> normalization -> tasks x stringency levels, per method.

Run configs are INI files::

    [run]
    pipeline = csall-plate-pca64-madctrl-plate-nosph
    tasks = moa_enrichment, gene_enrichment, replicate_retrieval
    seed = 0
    qc = true
    qc_reference = cellprofiler

    [methods]
    cellprofiler = cp/manifest.txt
    dino = dino/manifest.txt

    [levels]
    moa_enrichment = NR, NSB, NSS

    [labels]
    moa = moa.csv

    [gene_labels]
    corum = corum_pairs.csv
"""

from __future__ import annotations

import configparser
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from morphoeval import __version__
from morphoeval.enrichment import EnrichmentError, evaluate_databases, evaluate_enrichment
from morphoeval.normalize import DEFAULT_CONFIG, PipelineConfig, run_pipeline
from morphoeval.profiles import LabelStore, ProfileSet, load_label_store, load_profile_set
from morphoeval.qc import QcConfig, qc_mask
from morphoeval.replicate import evaluate_replicates
from morphoeval.report import BenchmarkReport, ReportRow
from morphoeval.retrieval import StringencyLevel, level_applicable

logger = logging.getLogger(__name__)

TASKS = ("moa_enrichment", "gene_enrichment", "replicate_retrieval")
TASK_METRICS = {
    "moa_enrichment": ("geometric_mean_or", "fraction_significant"),
    "gene_enrichment": ("geometric_mean_or", "fraction_significant"),
    "replicate_retrieval": ("recall_at_1", "map", "negcon_map"),
}
DEFAULT_LEVELS = {
    "moa_enrichment": ("NR", "NSB", "NSS"),
    "gene_enrichment": ("NR", "NSB", "NSS"),
    "replicate_retrieval": ("NR", "NSB", "NSS", "NSL"),
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    methods: dict[str, Path]
    pipeline: str = DEFAULT_CONFIG
    tasks: tuple[str, ...] = ("replicate_retrieval",)
    levels: dict[str, tuple[str, ...]] = field(default_factory=dict)
    moa_labels: Path | None = None
    gene_labels: dict[str, Path] = field(default_factory=dict)
    qc: bool = True
    qc_cell_counts: bool = True
    qc_reference: str | None = None
    qc_config: QcConfig = field(default_factory=QcConfig)
    seed: int = 0
    fraction: float = 0.01
    n_permutations: int = 100
    alpha: float = 0.05
    out_dir: Path = Path("results")

    def __post_init__(self) -> None:
        if not self.methods:
            raise ConfigError("no methods configured")
        PipelineConfig.parse(self.pipeline)
        for task in self.tasks:
            if task not in TASKS:
                raise ConfigError(f"unknown task {task!r}; choose from {TASKS}")
        for task, levels in self.levels.items():
            for lv in levels:
                StringencyLevel.parse(lv)
        if "moa_enrichment" in self.tasks and self.moa_labels is None:
            raise ConfigError("moa_enrichment requires [labels] moa = <file>")
        if "gene_enrichment" in self.tasks and not self.gene_labels:
            raise ConfigError("gene_enrichment requires a [gene_labels] section")
        if self.qc_reference is not None and self.qc_reference not in self.methods:
            raise ConfigError(f"qc_reference {self.qc_reference!r} is not a configured method")

    def levels_for(self, task: str) -> list[StringencyLevel]:
        return [StringencyLevel.parse(lv) for lv in self.levels.get(task, DEFAULT_LEVELS[task])]

    @classmethod
    def from_ini(cls, path: str | Path) -> RunConfig:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config not found: {path}")
        parser = configparser.ConfigParser()
        parser.optionxform = str  # keep method names case-sensitive
        parser.read(path, encoding="utf-8")
        base = path.parent

        def resolve(p: str) -> Path:
            q = Path(p.strip())
            return q if q.is_absolute() else base / q

        def split(text: str) -> tuple[str, ...]:
            return tuple(t.strip() for t in text.replace(";", ",").split(",") if t.strip())

        run = parser["run"] if parser.has_section("run") else {}
        qc_section = parser["qc"] if parser.has_section("qc") else {}
        qc_cfg = QcConfig(
            batch_deviation_threshold=float(qc_section.get("batch_deviation_threshold", 0.2)),
            cell_count_percentile=float(qc_section.get("cell_count_percentile", 5.0)),
            count_sample_size=int(qc_section.get("count_sample_size", 5000)),
            absolute_threshold=_bool(qc_section.get("absolute_threshold", "false")),
        )
        labels = parser["labels"] if parser.has_section("labels") else {}
        return cls(
            methods={k: resolve(v) for k, v in parser["methods"].items()} if parser.has_section("methods") else {},
            pipeline=run.get("pipeline", DEFAULT_CONFIG),
            tasks=split(run.get("tasks", "replicate_retrieval")),
            levels={k: split(v) for k, v in parser["levels"].items()} if parser.has_section("levels") else {},
            moa_labels=resolve(labels["moa"]) if "moa" in labels else None,
            gene_labels={k: resolve(v) for k, v in parser["gene_labels"].items()} if parser.has_section("gene_labels") else {},
            qc=_bool(run.get("qc", "true")),
            qc_cell_counts=_bool(run.get("qc_cell_counts", "true")),
            qc_reference=run.get("qc_reference") or None,
            qc_config=qc_cfg,
            seed=int(run.get("seed", 0)),
            fraction=float(run.get("fraction", 0.01)),
            n_permutations=int(run.get("n_permutations", 100)),
            alpha=float(run.get("alpha", 0.05)),
            out_dir=resolve(run.get("out", "results")),
        )


def _bool(text: str) -> bool:
    return str(text).strip().lower() in ("1", "true", "yes", "on")


def _na_rows(method: str, task: str, dataset: str, level: str, reason: str, metrics=None) -> list[ReportRow]:
    return [ReportRow(method, task, dataset, level, m, None, reason=reason) for m in (metrics or TASK_METRICS[task])]


def _load_methods(cfg: RunConfig) -> dict[str, ProfileSet]:
    methods = {name: load_profile_set(cfg.methods[name]) for name in sorted(cfg.methods)}
    names = list(methods)
    ref_ids = methods[names[0]].column("well_id")
    for name in names[1:]:
        if not np.array_equal(methods[name].column("well_id"), ref_ids):
            raise ConfigError(f"method {name} does not share well metadata with {names[0]}")
    return methods


def _label_stores(cfg: RunConfig, profiles: ProfileSet):
    moa = load_label_store(cfg.moa_labels, "class_sets", profiles, "moa") if cfg.moa_labels else None
    genes = []
    for db in sorted(cfg.gene_labels):
        genes.append(load_label_store(cfg.gene_labels[db], "pair_relations", profiles, db))
    return moa, genes


def _enrichment_rows(method, task, dataset, level, result, chance) -> list[ReportRow]:
    common = dict(n_queries=result.n_queries, skipped=result.n_skipped)
    return [
        ReportRow(method, task, dataset, level, "geometric_mean_or", result.geometric_mean_or, **common),
        ReportRow(method, task, dataset, level, "fraction_significant", result.fraction_significant,
                  chance_baseline=chance, **common),
    ]


def evaluate_method(
    name: str,
    profiles: ProfileSet,
    cfg: RunConfig,
    moa: LabelStore | None,
    genes: list[LabelStore],
    jobs: int = 1,
) -> list[ReportRow]:
    dataset = profiles.name
    rows: list[ReportRow] = []
    enrich_kw = dict(fraction=cfg.fraction, n_permutations=cfg.n_permutations, alpha=cfg.alpha, seed=cfg.seed, jobs=jobs)
    chance_sig = 100.0 * cfg.alpha
    for task in cfg.tasks:
        levels = cfg.levels_for(task)
        well_level = task == "replicate_retrieval"
        runnable = []
        for lv in levels:
            reason = level_applicable(profiles, lv, well_level)
            if reason:
                rows += _na_rows(name, task, dataset, lv.value, reason)
            else:
                runnable.append(lv)
        if not runnable:
            continue

        if task == "replicate_retrieval":
            results = evaluate_replicates(profiles, runnable, jobs=jobs)
            for lv, res in results.items():
                if res.n_queries == 0:
                    rows += _na_rows(name, task, dataset, lv.value, "no query has a replicate in its pool")
                    continue
                total = res.n_queries + res.skipped_queries
                rows += [
                    ReportRow(name, task, dataset, lv.value, "recall_at_1", res.recall_at_1_macro,
                              res.n_queries, res.skipped_queries, res.chance["recall_at_1"]),
                    ReportRow(name, task, dataset, lv.value, "map", res.map,
                              res.n_queries, res.skipped_queries, res.chance["map"]),
                    ReportRow(name, task, dataset, lv.value, "negcon_map", res.negcon_map,
                              res.negcon_n_queries, total - res.negcon_n_queries, res.chance["negcon_map"]),
                ]
        elif task == "moa_enrichment":
            for lv in runnable:
                try:
                    res = evaluate_enrichment(profiles, moa, lv, **enrich_kw)
                except EnrichmentError as exc:
                    rows += _na_rows(name, task, dataset, lv.value, str(exc))
                    continue
                rows += _enrichment_rows(name, task, dataset, lv.value, res, chance_sig)
        else:
            for lv in runnable:
                try:
                    per_db, macro = evaluate_databases(profiles, genes, lv, **enrich_kw)
                except EnrichmentError as exc:
                    rows += _na_rows(name, task, dataset, lv.value, str(exc))
                    continue
                n_q = sum(r.n_queries for r in per_db.values())
                n_skip = sum(r.n_skipped for r in per_db.values())
                rows += [
                    ReportRow(name, task, dataset, lv.value, "geometric_mean_or", macro["geometric_mean_or"], n_q, n_skip),
                    ReportRow(name, task, dataset, lv.value, "fraction_significant", macro["fraction_significant"],
                              n_q, n_skip, chance_sig),
                ]
                for db, res in per_db.items():
                    for row in _enrichment_rows(name, task, dataset, lv.value, res, chance_sig):
                        rows.append(replace(row, metric=f"{row.metric}[{db}]"))
                missing = sorted({g.database_name for g in genes} - set(per_db))
                for db in missing:
                    rows += _na_rows(name, task, dataset, lv.value, "no eligible query",
                                     [f"{m}[{db}]" for m in TASK_METRICS[task]])
    return rows


def run_benchmark(cfg: RunConfig, jobs: int = 1) -> BenchmarkReport:
    """Evaluate every configured method; per-task failures become not-applicable rows."""
    methods = _load_methods(cfg)
    names = list(methods)
    reference = cfg.qc_reference or names[0]

    qc_events = []
    if cfg.qc:
        keep, qc_events = qc_mask(methods[reference], cfg.qc_config, cfg.seed, cfg.qc_cell_counts)
        logger.info("QC on %s keeps %d of %d wells", reference, int(keep.sum()), keep.size)
        methods = {n: p.take(keep) for n, p in methods.items()}

    moa, genes = (None, [])
    if "moa_enrichment" in cfg.tasks or "gene_enrichment" in cfg.tasks:
        moa, genes = _label_stores(cfg, methods[reference])

    rows: list[ReportRow] = []
    digests = {}
    for name in names:
        digests[name] = methods[name].digest()
        normalized, _ = run_pipeline(methods[name], cfg.pipeline)
        logger.info("evaluating %s (%d wells x %d dims)", name, normalized.n_wells, normalized.dim)
        rows += evaluate_method(name, normalized, cfg, moa, genes, jobs)

    run = {
        "pipeline": PipelineConfig.parse(cfg.pipeline).render(),
        "seed": cfg.seed,
        "tool_version": __version__,
        "dataset_digest": digests,
        "qc": {"enabled": cfg.qc, "reference": reference, "removed": len(qc_events)},
        "enrichment": {"fraction": cfg.fraction, "n_permutations": cfg.n_permutations, "alpha": cfg.alpha},
    }
    return BenchmarkReport(rows, run)
