"""Command-line entry point: ``ciuda {prepare,cache,train,eval,report,selftest}``.

Exit codes: 0 ok, 1 usage/configuration, 2 data, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import CIUDAError, ConfigurationError, IngestionError

log = logging.getLogger("ciuda")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(args, extra: list[str] | None = None):
    from .config import load_config

    overrides = list(args.overrides or [])
    for key in ("mode", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            overrides.append(f"{key}={val}")
    return load_config(args.config, overrides + (extra or []))


def cmd_prepare(args) -> int:
    from .data.datasets import build_manifest
    from .data.schedules import build_schedule

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.benchmark == "synthetic":
        from .config import SyntheticOptions, ToyOptions
        from .data.synthetic import make_synthetic
        from .encoders import build_encoder

        bench = make_synthetic(build_encoder("toy", **ToyOptions().model_dump()), **SyntheticOptions().model_dump())
        schedule, manifests = bench.schedule, bench.manifests()
        if args.data_root:
            bench.write(args.data_root)
    else:
        if not args.data_root:
            raise ConfigurationError("--data-root is required for published benchmarks")
        root = Path(args.data_root)
        src = root / args.source_domain
        if not src.is_dir():
            raise IngestionError(f"source domain folder {src} does not exist")
        folders = sorted(p.name for p in src.iterdir() if p.is_dir())
        schedule = build_schedule(args.benchmark, folders)
        manifests = {d: build_manifest(root, d, schedule) for d in (args.source_domain, args.target_domain)}
    schedule.save(out / "schedule.json")
    for domain, m in manifests.items():
        m.save(out / f"manifest_{domain}.json")
    print(f"{args.benchmark}: {schedule.T} steps, {schedule.C} classes -> {out}")
    return EXIT_OK


def cmd_cache(args) -> int:
    from .data.cache import FeatureCache, cache_features
    from .data.datasets import source_examples, target_examples
    from .runner import Runner

    cfg = _config(args)
    runner = Runner(cfg)
    cache = FeatureCache(args.cache_dir)
    examples = source_examples(runner.source_manifest) + target_examples(runner.schedule, runner.target_manifest)
    feats = cache_features(examples, runner.encoder, runner.store, cache, purpose="cache")
    print(f"cached {len(feats)} features in {cache.directory} (hit rate {cache.hit_rate:.2%})")
    return EXIT_OK


def cmd_train(args) -> int:
    from .evaluation import emit_report
    from .runner import full_run

    cfg = _config(args)
    run_dir = Path(args.run_dir)
    result = full_run(cfg, run_dir, resume=args.resume)
    emit_report(result.report, run_dir, plots=cfg.plots)
    agg = result.report.to_dict()["aggregate"]
    print(json.dumps({"final": agg["avg_final"], "step": agg["avg_step"], "s1": agg["avg_s1"], "seconds": round(result.seconds, 2)}))
    return EXIT_OK


def cmd_eval(args) -> int:
    """Recompute metrics from a run's prediction dump and compare with its report."""
    from .config import load_config
    from .evaluation import MetricsReport, TaskMetrics, emit_report, read_predictions
    from .errors import ReportError

    run_dir = Path(args.run_dir)
    cfg = load_config(run_dir / "config.yaml")
    records = read_predictions(run_dir / "predictions.csv")
    n_steps = max(r.eval_step for r in records) + 1
    tm = TaskMetrics.from_records(records, n_steps, cumulative=cfg.step_eval == "cumulative")
    report = MetricsReport(cfg.benchmark_id, {cfg.task_name: tm})
    stored = run_dir / "metrics.json"
    if stored.exists():
        if json.loads(stored.read_text()) != json.loads(json.dumps(report.to_dict())):
            raise ReportError(f"metrics in {stored} disagree with the prediction dump")
        print("prediction dump and stored metrics agree")
    emit_report(report, args.out or run_dir, plots=args.plots)
    return EXIT_OK


def cmd_report(args) -> int:
    from .evaluation import MetricsReport, emit_report
    from .errors import ReportError

    merged = None
    for d in args.runs:
        path = Path(d) / "metrics.json"
        if not path.exists():
            raise ReportError(f"no metrics.json in {d}")
        rep = MetricsReport.from_dict(json.loads(path.read_text()))
        merged = rep if merged is None else merged.merge(rep)
    files = emit_report(merged, args.out, plots=args.plots)
    for f in files:
        print(f)
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    ok = run_selftest(quick=args.quick)
    return EXIT_OK if ok else EXIT_USAGE


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ciuda", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    s = sub.add_parser("prepare", help="build manifests and the step schedule")
    s.add_argument("--benchmark", required=True, choices=["office31", "officehome", "minidomainnet", "synthetic"])
    s.add_argument("--data-root")
    s.add_argument("--source-domain", default="source")
    s.add_argument("--target-domain", default="target")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_prepare)

    def with_config(sp):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides, e.g. lambda1=3 synthetic.seed=2")

    s = sub.add_parser("cache", help="encode all images once into the feature cache")
    with_config(s)
    s.add_argument("--cache-dir", help="defaults to $CIUDA_CACHE_DIR or ~/.cache/ciuda")
    s.set_defaults(func=cmd_cache)

    s = sub.add_parser("train", help="run all steps and write a run directory")
    with_config(s)
    s.add_argument("--run-dir", required=True)
    s.add_argument("--mode", choices=["joint", "source_free"])
    s.add_argument("--seed", type=int)
    s.add_argument("--resume", help="checkpoint file to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="recompute metrics from a run's prediction dump")
    s.add_argument("--run-dir", required=True)
    s.add_argument("--out")
    s.add_argument("--plots", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="merge run reports into benchmark tables")
    s.add_argument("runs", nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--plots", action="store_true")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("selftest", help="property checks plus a synthetic end-to-end run")
    s.add_argument("--quick", action="store_true", help="skip the end-to-end runs")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CIUDAError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
