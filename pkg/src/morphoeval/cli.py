"""Command-line entry point: ``morphoeval {run,synth,qc,normalize,report}``."""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import logging
import os
import sys
from pathlib import Path

logger = logging.getLogger("morphoeval")


def _setup_logging() -> None:
    level = os.environ.get("MORPHOEVAL_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def cmd_run(args) -> int:
    from morphoeval.report import emit_report
    from morphoeval.runner import RunConfig, run_benchmark

    cfg = RunConfig.from_ini(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out) if args.out else cfg.out_dir
    report = run_benchmark(cfg, jobs=args.jobs)
    paths = emit_report(report, out)
    n_na = sum(not r.applicable for r in report.rows)
    print(f"wrote {len(paths)} files to {out} ({len(report.rows)} rows, {n_na} not applicable)")
    return 0


def _synth_config(path: str | None, seed: int | None):
    from morphoeval.synth import SynthConfig

    values: dict = {}
    embeds: dict[str, dict] = {}
    if path:
        parser = configparser.ConfigParser()
        parser.read(path, encoding="utf-8")
        types = {f.name: f.type for f in dataclasses.fields(SynthConfig)}
        if parser.has_section("synth"):
            for key, raw in parser["synth"].items():
                if key not in types:
                    raise ValueError(f"unknown synth option {key!r}")
                values[key] = _coerce(raw, SynthConfig.__dataclass_fields__[key].default)
        for section in parser.sections():
            if section.startswith("method."):
                embeds[section.split(".", 1)[1]] = {k: _coerce(v, 0.0) for k, v in parser[section].items()}
    if seed is not None:
        values["seed"] = seed
    return SynthConfig(**values), embeds


def _coerce(raw: str, default):
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw.strip()


def cmd_synth(args) -> int:
    from morphoeval.profiles import save_label_store
    from morphoeval.synth import class_pairs, embed, generate, write_dataset

    cfg, embeds = _synth_config(args.config, args.seed)
    profiles, labels = generate(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    methods = {"base": write_dataset(profiles, None, out / "base", "synthetic")}
    for i, (name, opts) in enumerate(sorted(embeds.items())):
        opts = {k: (int(v) if k in ("out_dim", "correlated_rank", "seed") else v) for k, v in opts.items()}
        opts.setdefault("seed", cfg.seed * 1000 + i + 1)
        view = embed(profiles, name=name, **opts)
        methods[name] = write_dataset(view, None, out / name, "synthetic")
    save_label_store(labels, out / "moa_labels.csv")
    save_label_store(class_pairs(labels, "synthetic_pairs"), out / "gene_pairs.csv")

    lines = [
        "[run]",
        "pipeline = csall-plate-pca64-madctrl-plate-nosph",
        "tasks = moa_enrichment, gene_enrichment, replicate_retrieval",
        f"seed = {cfg.seed}",
        "qc = true",
        "out = results",
        "",
        "[methods]",
        *[f"{name} = {path.relative_to(out)}" for name, path in methods.items()],
        "",
        "[labels]",
        "moa = moa_labels.csv",
        "",
        "[gene_labels]",
        "synthetic_pairs = gene_pairs.csv",
    ]
    (out / "run.ini").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {profiles.n_wells} wells x {profiles.dim} dims, {len(methods)} method(s), config {out / 'run.ini'}")
    return 0


def cmd_qc(args) -> int:
    from morphoeval.profiles import load_profile_set, save_profile_set
    from morphoeval.qc import QcConfig, qc_mask, write_qc_report

    profiles = load_profile_set(args.manifest)
    cfg = QcConfig(
        batch_deviation_threshold=args.threshold,
        cell_count_percentile=args.percentile,
        absolute_threshold=args.absolute,
    )
    keep, events = qc_mask(profiles, cfg, args.seed, cell_counts=not args.no_cell_count)
    out = Path(args.out)
    save_profile_set(profiles.take(keep), out, dataset_name=profiles.name)
    write_qc_report(events, out / "qc_report.csv")
    print(f"kept {int(keep.sum())} of {keep.size} wells; report at {out / 'qc_report.csv'}")
    return 0


def cmd_normalize(args) -> int:
    from morphoeval.normalize import run_pipeline
    from morphoeval.profiles import load_profile_set, save_profile_set

    profiles = load_profile_set(args.manifest)
    normalized, fitted = run_pipeline(profiles, args.pipeline)
    out = Path(args.out)
    save_profile_set(normalized, out, dataset_name=profiles.name)
    fitted.save(out / "pipeline.npz")
    print(f"normalized {normalized.n_wells} wells to {normalized.dim} dims with {fitted.config.render()}")
    return 0


def cmd_report(args) -> int:
    from morphoeval.report import check_consistency, report_from_csv, write_heatmaps

    directory = Path(args.results)
    report = report_from_csv(directory / "results.csv")
    paths = write_heatmaps(report, directory)
    problems = check_consistency(directory) if (directory / "results.json").exists() else []
    for p in problems:
        print(p, file=sys.stderr)
    print(f"wrote {len(paths)} heatmaps to {directory}")
    return 1 if problems else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="morphoeval", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="evaluate methods across tasks and stringency levels")
    p.add_argument("--config", required=True, help="INI run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (overrides [run] out)")
    p.add_argument("--jobs", type=int, default=1, help="worker threads; results do not depend on it")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("synth", help="generate a synthetic benchmark dataset")
    p.add_argument("--config", help="INI file with a [synth] section and optional [method.NAME] sections")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("qc", help="apply batch and cell-count QC to one dataset")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=0.2)
    p.add_argument("--percentile", type=float, default=5.0)
    p.add_argument("--absolute", action="store_true", help="compare batch distances to the threshold directly")
    p.add_argument("--no-cell-count", action="store_true")
    p.set_defaults(func=cmd_qc)

    p = sub.add_parser("normalize", help="run the normalization pipeline on one dataset")
    p.add_argument("manifest")
    p.add_argument("--pipeline", default="csall-plate-pca64-madctrl-plate-nosph")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser("report", help="re-render heatmaps from results.csv and check CSV/JSON agreement")
    p.add_argument("--results", required=True, help="directory holding results.csv")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
