"""Command-line entry point: ``echo-esc <subcommand> [--config FILE] [--jobs K] [--fixture-only] [--strict]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import _io
from .config import parse_config
from .dataset import DatasetKind
from .errors import ConfigInvalid, EchoError
from .evaluation import (
    FoldResult,
    MetricsReport,
    Tap,
    ablation_grid,
    compare,
    export_embeddings,
    read_embeddings_csv,
    render_deltas,
    write_embeddings_csv,
    write_tsne_csv,
)
from .features import FeaturePipeline
from .model import load_checkpoint
from .ontology import load_ontology_file, save_ontology_file, validate_ontology
from .runner import (
    cell_key,
    combine_seeds,
    experiment_dir,
    load_dataset,
    render_report,
    resolve_ontology,
    run_ablation,
    run_experiment,
)

log = logging.getLogger("echo_esc")


def _need_config(args):
    if not args.config:
        raise ConfigInvalid(f"'{args.command}' needs --config")
    return parse_config(args.config)


def _p_arg(text):
    return int(text) if str(text).strip().isdigit() else text


def cmd_ingest(args) -> int:
    cfg = _need_config(args)
    manifest = load_dataset(cfg)
    counts = manifest.fold_counts()
    print(f"{cfg.dataset.value}: {manifest.n} classes, {len(manifest.records)} clips")
    for fold in sorted(counts):
        print(f"  fold {fold}: {counts[fold]} clips")
    if not args.no_features:
        pipe = FeaturePipeline(manifest, cfg.mel, cfg.image_size, cfg.normalization, Path(cfg.cache_dir))
        degenerate = sum(pipe.tensor(r).degenerate for r in manifest.records)
        print(f"features cached under {cfg.cache_dir} ({degenerate} constant clips)")
    return 0


def cmd_ontology(args) -> int:
    if args.action == "validate":
        if not args.file:
            raise ConfigInvalid("'ontology validate' needs --file")
        o = load_ontology_file(args.file)
        if args.config:
            labels = load_dataset(_need_config(args)).label_set
        else:
            labels = DatasetKind.parse(args.dataset or o.dataset).official_labels
        report = validate_ontology(o, labels)
        if report.ok:
            print(f"{args.file}: valid ({o.p} parents, {o.n} classes)")
            return 0
        for v in report.violations:
            print(f"{args.file}: {v}")
        return 5
    cfg = _need_config(args)
    if args.p is not None:
        cfg = cfg.with_p(_p_arg(args.p))
    if cfg.p is None:
        raise ConfigInvalid("ontology generation needs p (set it in the config or pass --p)")
    labels = cfg.dataset.official_labels
    if cfg.data.get("metadata"):
        labels = load_dataset(cfg).label_set
    out = Path(args.out or f"ontology_{cfg.dataset.value.lower()}_p{cfg.p}.json")
    o = resolve_ontology(cfg, labels, fixture_only=args.fixture_only, log_dir=out.parent / "llm")
    save_ontology_file(o, out)
    print(f"wrote {out} ({o.source.value}, {o.p} parents)")
    for parent, children in o.parents.items():
        print(f"  {parent}: {', '.join(children)}")
    return 0


def cmd_train(args) -> int:
    cfg = _need_config(args)
    report = run_experiment(cfg, jobs=args.jobs, fixture_only=args.fixture_only, strict=args.strict)
    print(render_report(report))
    print(f"report: {experiment_dir(cfg) / 'report.json'}")
    return 0


def cmd_evaluate(args) -> int:
    """Re-aggregate finished cells of an experiment (fails on missing folds)."""
    from .evaluation import aggregate

    cfg = _need_config(args)
    exp = experiment_dir(cfg)
    per_seed = {}
    for seed in cfg.seeds:
        results = []
        for fold in cfg.fold_list:
            path = exp / cell_key(fold, seed) / "result.json"
            if path.exists():
                results.append(FoldResult.from_dict(json.loads(path.read_text(encoding="utf-8"))))
        per_seed[seed] = aggregate(results, expected_folds=cfg.fold_list, dataset=cfg.dataset.value,
                                   mode=cfg.mode, backbone=cfg.backbone.name.value, p=cfg.p)
    report = combine_seeds(cfg, per_seed)
    report.save(exp / "report.json")
    print(render_report(report))
    return 0


def cmd_ablate(args) -> int:
    cfg = _need_config(args)
    p_values = args.p or ["sqrt"]
    p_values = [_p_arg(p) for p in p_values]
    grid, reports = run_ablation(cfg, p_values, jobs=args.jobs, fixture_only=args.fixture_only,
                                 strict=args.strict)
    text = grid.render()
    print(text)
    out = Path(cfg.run_dir) / f"ablation-{cfg.dataset.value}-{cfg.backbone.name.value}"
    _io.atomic_write_json(out.with_suffix(".json"), grid.to_dict())
    _io.atomic_write_bytes(out.with_suffix(".md"), (text + "\n").encode("utf-8"))
    failed = [p for p, r in reports.items() if isinstance(r, BaseException)]
    return 4 if failed else 0


def cmd_export(args) -> int:
    cfg = _need_config(args)
    model, meta = load_checkpoint(args.checkpoint, expected_config_hash=cfg.config_hash, strict=args.strict)
    manifest = load_dataset(cfg)
    records = list(manifest.records)
    if args.fold is not None:
        records = [r for r in records if r.fold_index == args.fold]
    features = FeaturePipeline(manifest, cfg.mel, cfg.image_size, cfg.normalization, Path(cfg.cache_dir))
    emb = export_embeddings(model, records, Tap(args.tap), features)
    write_embeddings_csv(emb, args.out)
    print(f"wrote {len(records)} x {emb.vectors.shape[1]} {emb.tap.value} embeddings to {args.out}")
    return 0


def cmd_tsne(args) -> int:
    from .tsne import tsne

    emb = read_embeddings_csv(args.embeddings)
    res = tsne(emb.vectors, perplexity=args.perplexity, iterations=args.iterations, seed=args.seed)
    write_tsne_csv(res.coords, emb.labels, args.out)
    print(f"wrote {args.out}; KL {res.kl[-1]:.4f} after {args.iterations} iterations")
    return 0


def cmd_report(args) -> int:
    if args.compare:
        if len(args.compare) % 2:
            raise ConfigInvalid("--compare takes BASELINE ECHO report pairs")
        pairs = list(zip(args.compare[::2], args.compare[1::2]))
        deltas = [compare(MetricsReport.load(b), MetricsReport.load(e)) for b, e in pairs]
        print(render_deltas(deltas))
        return 0
    if args.grid:
        cells, num_classes = {}, {}
        for path in args.grid:
            r = MetricsReport.load(path)
            cells[(r.backbone, r.dataset, r.p)] = r
            num_classes[r.dataset] = DatasetKind.parse(r.dataset).num_classes
        print(ablation_grid(cells, num_classes).render())
        return 0
    for path in args.reports:
        print(render_report(MetricsReport.load(path)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--jobs", type=int, default=1, help="run independent (fold, seed) cells concurrently")
    common.add_argument("--fixture-only", action="store_true",
                        help="use frozen ontology fixtures; never contact an LLM")
    common.add_argument("--strict", action="store_true", help="config-hash mismatches are errors, not warnings")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="echo-esc", description="Coarse-to-fine sound classification experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="load a dataset manifest and cache features")
    p.add_argument("--no-features", action="store_true", help="only parse the manifest")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("ontology", parents=[common], help="generate or validate a label ontology")
    p.add_argument("action", choices=["generate", "validate"])
    p.add_argument("--p", help="number of parent classes (integer or 'sqrt')")
    p.add_argument("--file", help="ontology JSON to validate")
    p.add_argument("--dataset", help="dataset kind for 'validate' without a config")
    p.add_argument("--out", help="where to write the generated ontology")
    p.set_defaults(func=cmd_ontology)

    p = sub.add_parser("train", parents=[common], help="run all configured folds and seeds")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="aggregate finished cells into a report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[common], help="one ECHO run per p, rendered as a grid")
    p.add_argument("--p", nargs="+", help="p values (integers or 'sqrt')")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-embeddings", parents=[common], help="dump embeddings from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fold", type=int, help="only clips of this fold")
    p.add_argument("--tap", default="HEAD_256", choices=[t.value for t in Tap])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("tsne", parents=[common], help="2-D t-SNE of an embeddings CSV")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_tsne)

    p = sub.add_parser("report", parents=[common], help="render, compare or tabulate saved reports")
    p.add_argument("reports", nargs="*")
    p.add_argument("--compare", nargs="+", metavar="REPORT", help="baseline/echo report pairs")
    p.add_argument("--grid", nargs="+", metavar="REPORT", help="ECHO reports for an ablation grid")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except EchoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
