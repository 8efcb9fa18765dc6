"""Command line entry point: ``dyckprobe gen | train | experiment ...``.

Exit codes: 0 success, 1 usage error, 2 I/O error or missing prerequisite,
3 numerical failure (divergence, generation budget exhausted).

Environment: ``DYCKPROBE_OUT`` sets the default output root for experiment
run directories, ``DYCKPROBE_THREADS`` caps BLAS threads.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, config, dyck_gen, experiments, nn_core, probe_lab, trainer
from .config import ConfigError, RunConfig

log = logging.getLogger("dyckprobe")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class MissingPrerequisite(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# output helpers


def write_csv(path: Path, rows: list[dict], columns: list[str]):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({c: _fmt(row.get(c)) for c in columns})


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_jsonl(path: Path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def write_json(path: Path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, cfg: RunConfig, argv, extra: dict | None = None):
    """Everything needed to re-run: resolved config, argv, inputs, versions. Timestamps live only here."""
    manifest = {
        "command": list(argv),
        "config": cfg.to_dict(),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "versions": {"dyckprobe": __version__, "python": platform.python_version(), "numpy": np.__version__},
        "label_convention": "y=1 curly, y=0 square",
        "index_base": "positions in data files are 1-based",
    }
    if extra:
        manifest.update(extra)
    write_json(out / "manifest.json", manifest)


def _strip_timing(history):
    return [{k: v for k, v in r.items() if k != "wall_time"} for r in history]


def _timings(history):
    return [r.get("wall_time") for r in history]


# ---------------------------------------------------------------------------
# config resolution


def resolve_config(args) -> RunConfig:
    cfg = config.load(args.config) if getattr(args, "config", None) else config.profile(args.profile)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _int_list(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def load_corpus(path) -> list[str]:
    if path is None:
        raise MissingPrerequisite("no corpus given (--corpus DIR); create one with `dyckprobe gen --out DIR`")
    p = Path(path)
    if not (p / "corpus.txt").exists() and not p.is_file():
        raise MissingPrerequisite(f"corpus not found at {p}; create it with `dyckprobe gen --out {p}`")
    return dyck_gen.read_corpus(p)


def split_encoded(sentences, cfg: RunConfig):
    tr, te = trainer.split_corpus(sentences, cfg.train.split_fraction, cfg.train.split_seed)
    return trainer.EncodedCorpus.from_sentences(tr), trainer.EncodedCorpus.from_sentences(te)


def run_dir(args, name: str, seed: int) -> Path:
    if getattr(args, "run_dir", None):
        out = Path(args.run_dir)
    else:
        root = Path(args.out_root or os.environ.get("DYCKPROBE_OUT", "runs"))
        out = root / f"{name}-{time.strftime('%Y%m%d-%H%M%S')}-seed{seed}"
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    cfg = resolve_config(args)
    grammar = cfg.grammar
    if args.n is not None:
        grammar = replace(grammar, n=args.n)
    if args.seed is not None:
        grammar = replace(grammar, seed=args.seed)
    cfg.grammar = grammar
    if args.count is not None:
        cfg.count = args.count
    if cfg.count < 1:
        raise UsageError("--count must be >= 1")
    out = Path(args.out)
    t0 = time.perf_counter()
    summary = dyck_gen.write_corpus(grammar, cfg.count, out)
    write_manifest(out, cfg, sys.argv, {"wall_time": time.perf_counter() - t0,
                                        "corpus_sha256": file_sha256(out / "corpus.txt")})
    print(f"wrote {cfg.count} sentences of length {grammar.n} to {out / 'corpus.txt'} "
          f"(acceptance rate {summary.acceptance_rate:.4f})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    overrides = {}
    if args.units is not None:
        overrides["hidden_units"] = args.units
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.lr is not None:
        overrides["lr"] = args.lr
    cfg.train = replace(cfg.train, **overrides)
    sentences = load_corpus(args.corpus)
    train_data, test_data = split_encoded(sentences, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params, history = trainer.fit(train_data, test_data, cfg.train)
    report = trainer.evaluate(params, test_data)
    nn_core.save_checkpoint(params, out / "checkpoint.npz", seed=cfg.train.seed,
                            extra={"train_config": cfg.train.to_dict()})
    write_jsonl(out / "train_log.jsonl", _strip_timing(history))
    write_json(out / "eval.json", report.to_dict())
    write_manifest(out, cfg, sys.argv, {"corpus": str(args.corpus),
                                        "corpus_sha256": file_sha256(_corpus_file(args.corpus)),
                                        "epoch_wall_times": _timings(history)})
    print(f"final test error: {report.error_rate:.6f}")
    return EXIT_OK


def _corpus_file(path) -> Path:
    p = Path(path)
    return p / "corpus.txt" if p.is_dir() else p


def _bucket_rows(results, axis):
    rows = []
    for r in results:
        if r.report is None:
            continue
        for v, (c, e) in sorted(r.report.buckets(axis).items()):
            rows.append({"hidden_units": r.hidden_units, "seed": r.seed, "value": v, "count": c,
                         "errors": e, "error_rate": e / c})
    return rows


BUCKET_COLUMNS = ["hidden_units", "seed", "value", "count", "errors", "error_rate"]


def exp_sweep(args, cfg: RunConfig, out: Path) -> dict:
    sentences = load_corpus(args.corpus)
    train_data, test_data = split_encoded(sentences, cfg)
    units = args.units or cfg.units
    seeds = args.seeds or cfg.seeds
    cfg.units, cfg.seeds = tuple(units), tuple(seeds)
    results = experiments.sweep_units(train_data, test_data, units, replace(cfg.train, seed=cfg.seed), seeds,
                                      keep_params=args.save_models)
    write_csv(out / "sweep.csv",
              [{"hidden_units": r.hidden_units, "seed": r.seed, "test_error": r.error_rate if r.report else None,
                "diverged": r.diverged or ""} for r in results],
              ["hidden_units", "seed", "test_error", "diverged"])
    for axis in experiments.AXES:
        write_csv(out / f"buckets_{axis.replace('-', '_')}.csv", _bucket_rows(results, axis), BUCKET_COLUMNS)
    write_jsonl(out / "metrics.jsonl",
                [{"hidden_units": r.hidden_units, "seed": r.seed, **rec}
                 for r in results for rec in _strip_timing(r.history)])
    if args.save_models:
        (out / "models").mkdir(exist_ok=True)
        for r in results:
            if r.params is not None:
                nn_core.save_checkpoint(r.params, out / "models" / f"h{r.hidden_units}_s{r.seed}.npz", seed=r.seed)
    for r in results:
        print(f"H={r.hidden_units} seed={r.seed} test_error={r.error_rate:.6f}")
    return {"corpus": str(args.corpus), "epoch_wall_times": {f"{r.hidden_units}/{r.seed}": _timings(r.history)
                                                            for r in results}}


def read_bucket_csv(path: Path) -> dict[int, dict[int, tuple[int, int]]]:
    tables: dict[int, dict[int, tuple[int, int]]] = {}
    with open(path, encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            t = tables.setdefault(int(row["hidden_units"]), {})
            v = int(row["value"])
            c0, e0 = t.get(v, (0, 0))
            t[v] = (c0 + int(row["count"]), e0 + int(row["errors"]))
    return tables


def exp_frontier(args, cfg: RunConfig, out: Path) -> dict:
    if not args.sweep:
        raise MissingPrerequisite("frontier needs bucketed sweep errors (--sweep RUN_DIR); "
                                  "produce them with `dyckprobe experiment sweep --corpus DIR`")
    cfg.tolerance = args.tolerance if args.tolerance is not None else cfg.tolerance
    axes = [args.axis] if args.axis else list(experiments.AXES)
    fits = {}
    for axis in axes:
        axis = experiments.SplitSpec(axis=axis).axis
        src = Path(args.sweep) / f"buckets_{axis.replace('-', '_')}.csv"
        if not src.exists():
            raise MissingPrerequisite(f"missing {src}; run `dyckprobe experiment sweep` first")
        points, fit = experiments.memory_frontier(read_bucket_csv(src), cfg.tolerance)
        rows = [{"hidden_units": p.hidden_units, "max_metric": p.max_metric, "tolerance": p.tolerance,
                 "log_fit": float(fit(p.hidden_units)) if fit else None} for p in points]
        write_csv(out / f"frontier_{axis.replace('-', '_')}.csv", rows,
                  ["hidden_units", "max_metric", "tolerance", "log_fit"])
        fits[axis] = None if fit is None else {"slope": fit.slope, "intercept": fit.intercept,
                                               "residuals": fit.residuals, "method": "least squares on log(H)"}
        for p in points:
            print(f"{axis}: H={p.hidden_units} max_metric={p.max_metric} (tolerance {p.tolerance})")
    write_json(out / "frontier_fit.json", fits)
    return {"sweep": str(args.sweep)}


def exp_generalize(args, cfg: RunConfig, out: Path) -> dict:
    sentences = load_corpus(args.corpus)
    train_data, test_data = split_encoded(sentences, cfg)
    spec = experiments.SplitSpec(axis=args.axis, mode=args.mode, threshold=args.threshold)
    units = args.units[0] if args.units else 10
    repeats = args.repeats or cfg.repeats
    cfg.repeats = repeats
    res = experiments.run_generalization(train_data, test_data, spec, units, repeats,
                                         replace(cfg.train, seed=cfg.seed))
    rows = []
    for which, label in (("in_report", "in-sample"), ("out_report", "out-of-sample")):
        for v, stats in res.curve(which).items():
            rows.append({"axis_value": v, "sample": label, "count": stats["count"], "error_mean": stats["mean"],
                         "error_min": stats["min"], "error_max": stats["max"]})
    write_csv(out / "generalization.csv", rows,
              ["axis_value", "sample", "count", "error_mean", "error_min", "error_max"])
    write_jsonl(out / "runs.jsonl", [{
        "repeat": r["repeat"], "seed": r["seed"], "split": r["spec"].to_dict(),
        "in_error": r["in_report"].error_rate if r["in_report"] else None,
        "out_error": r["out_report"].error_rate if r["out_report"] else None,
        "in_count": r["in_report"].count if r["in_report"] else 0,
        "out_count": r["out_report"].count if r["out_report"] else 0,
        "diverged": r["diverged"],
    } for r in res.runs])
    summary = {
        "split": spec.to_dict(), "hidden_units": units, "repeats": repeats,
        "in_error_weighted": res.weighted_error("in_report"),
        "out_error_weighted": res.weighted_error("out_report"),
        "out_in_ratio": res.ratio,
        "ratio_weighting": "instance-weighted, pooled over repeats",
        "min_out_error": float(res.out_errors.min()) if len(res.out_errors) else None,
        "median_in_error": float(np.median(res.in_errors)) if len(res.in_errors) else None,
    }
    write_json(out / "generalization_summary.json", summary)
    print(f"in-sample error {summary['in_error_weighted']:.6f}, out-of-sample {summary['out_error_weighted']:.6f}, "
          f"ratio {summary['out_in_ratio']:.3f}")
    return {"corpus": str(args.corpus)}


def _find_checkpoint(args, H: int) -> Path | None:
    for p in args.checkpoint or []:
        path = Path(p)
        if path.is_dir():
            path = path / "checkpoint.npz"
        if path.exists():
            _, header = nn_core.load_checkpoint(path)
            if header["hidden_units"] == H:
                return path
        else:
            raise MissingPrerequisite(f"checkpoint {path} does not exist")
    if args.models:
        for cand in (Path(args.models) / f"h{H}.npz", Path(args.models) / f"h{H}" / "checkpoint.npz"):
            if cand.exists():
                return cand
    return None


def exp_probe(args, cfg: RunConfig, out: Path) -> dict:
    sentences = load_corpus(args.corpus)
    train_data, test_data = split_encoded(sentences, cfg)
    kinds = ["scalar", "sequence"] if args.kind == "both" else [args.kind]
    if args.units:
        scalar_units = args.units if "scalar" in kinds else ()
        sequence_units = args.units if "sequence" in kinds else ()
    else:
        scalar_units = cfg.scalar_units if "scalar" in kinds else ()
        sequence_units = cfg.sequence_units if "sequence" in kinds else ()
    if args.lookback is not None:
        cfg.probe = replace(cfg.probe, lookback=args.lookback)
    cfg.probe = replace(cfg.probe, seed=cfg.seed)
    models, sources = {}, {}
    for H in sorted(set(scalar_units) | set(sequence_units)):
        path = _find_checkpoint(args, H)
        if path is not None:
            models[H], _ = nn_core.load_checkpoint(path)
            sources[H] = str(path)
        elif args.train_missing:
            models[H], _ = trainer.fit(train_data, None, replace(cfg.train, hidden_units=H,
                                                                 seed=experiments.derive_seed(cfg.seed, H)))
            sources[H] = "trained in this run"
            (out / "models").mkdir(exist_ok=True)
            nn_core.save_checkpoint(models[H], out / "models" / f"h{H}.npz", seed=cfg.seed)
        else:
            raise MissingPrerequisite(f"no checkpoint for H={H}: pass --checkpoint FILE or --models DIR "
                                      f"(train one with `dyckprobe train --units {H}`), or add --train-missing")
    analysis = experiments.run_state_analysis({H: models[H] for H in scalar_units},
                                              {H: models[H] for H in sequence_units}, test_data, cfg.probe)
    summary = {}
    if analysis.scalar:
        rows = [r for H, rep in analysis.scalar.items() for r in rep.rows(H)]
        write_csv(out / "probe_depth.csv", rows,
                  ["probe", "hidden_units", "depth", "count", "mae", "baseline_mae", "mean_prediction"])
        summary["scalar"] = {str(H): {"mae": rep.mae, "baseline_mae": rep.baseline_mae, "count": rep.count,
                                      "baseline_value": rep.baseline_value}
                             for H, rep in analysis.scalar.items()}
        for H, rep in analysis.scalar.items():
            print(f"depth probe H={H}: MAE {rep.mae:.4f} (mean-depth baseline {rep.baseline_mae:.4f})")
    if analysis.sequence:
        rows = [r for H, rep in analysis.sequence.items() for r in rep.rows(H)]
        write_csv(out / "probe_previous.csv", rows,
                  ["probe", "hidden_units", "k", "relevance", "count", "error_rate"])
        summary["sequence"] = {str(H): {"skipped": rep.skipped, "lookback": rep.lookback,
                                        "feedback": "self-fed hard predictions, learned initial-state map"}
                               for H, rep in analysis.sequence.items()}
        for H, rep in analysis.sequence.items():
            print(f"sequence probe H={H}: k=4 relevant {rep.error(4, True):.4f} "
                  f"irrelevant {rep.error(4, False):.4f}")
    write_json(out / "probe_summary.json", summary)
    return {"corpus": str(args.corpus), "models": {str(k): v for k, v in sources.items()}}


EXPERIMENTS = {"sweep": exp_sweep, "frontier": exp_frontier, "generalize": exp_generalize, "probe": exp_probe}


def cmd_experiment(args) -> int:
    cfg = resolve_config(args)
    out = run_dir(args, args.experiment, cfg.seed)
    t0 = time.perf_counter()
    extra = EXPERIMENTS[args.experiment](args, cfg, out)
    extra["wall_time"] = time.perf_counter() - t0
    write_manifest(out, cfg, sys.argv, extra)
    print(f"outputs in {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dyckprobe", description="Dyck-2 LSTM laboratory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON run config (schema_version 1)")
        sp.add_argument("--profile", default="desk", choices=sorted(config.PROFILES))
        sp.add_argument("--seed", type=int)

    g = sub.add_parser("gen", help="generate a corpus")
    common(g)
    g.add_argument("--n", type=int, help="sentence length")
    g.add_argument("--count", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train the bracket predictor")
    common(t)
    t.add_argument("--corpus")
    t.add_argument("--units", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--out", default="model")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("experiment", help="run an experiment")
    esub = e.add_subparsers(dest="experiment", required=True, parser_class=_Parser)
    for name in EXPERIMENTS:
        sp = esub.add_parser(name)
        common(sp)
        sp.add_argument("--run-dir")
        sp.add_argument("--out-root")
        sp.add_argument("--corpus")
        sp.add_argument("--units", type=_int_list)
        sp.set_defaults(func=cmd_experiment)
        if name == "sweep":
            sp.add_argument("--seeds", type=_int_list)
            sp.add_argument("--save-models", action="store_true")
        if name == "frontier":
            sp.add_argument("--sweep", help="run directory of a sweep")
            sp.add_argument("--tolerance", type=float)
            sp.add_argument("--axis", choices=["distance", "embedded-depth"])
        if name == "generalize":
            sp.add_argument("--axis", default="distance", choices=["distance", "embedded-depth"])
            sp.add_argument("--mode", default="regular", choices=["regular", "random", "extrapolation"])
            sp.add_argument("--threshold", type=int)
            sp.add_argument("--repeats", type=int)
        if name == "probe":
            sp.add_argument("--kind", default="both", choices=["scalar", "sequence", "both"])
            sp.add_argument("--checkpoint", action="append")
            sp.add_argument("--models", help="directory holding h<H>.npz checkpoints")
            sp.add_argument("--train-missing", action="store_true")
            sp.add_argument("--lookback", type=int)
    return p


def _limit_threads():
    n = os.environ.get("DYCKPROBE_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(int(n))


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    _limit_threads()
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MissingPrerequisite as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_IO
    except (OSError, UnicodeDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except trainer.TrainingDiverged as exc:
        out = Path(getattr(args, "out", None) or ".")
        try:
            out.mkdir(parents=True, exist_ok=True)
            nn_core.save_checkpoint(exc.params, out / "last_finite.npz")
            where = f"; last finite parameters saved to {out / 'last_finite.npz'}"
        except OSError:
            where = ""
        print(f"numerical failure: {exc}{where}", file=sys.stderr)
        return EXIT_NUMERIC
    except (dyck_gen.GenerationError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
