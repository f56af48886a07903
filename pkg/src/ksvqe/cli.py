"""Command-line entry point: ``ksvqe <command> [options]``.

Exit codes: 0 success, 2 usage error, 1 runtime failure.
"""

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
MALFORMED_LIMIT = 0.01


class UsageError(Exception):
    pass


def _section(path, name):
    if path is None:
        return {}
    try:
        cfg = io.read_json(path)
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found")
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    if {"corpus", "train"} & cfg.keys():  # sectioned file
        return dict(cfg.get(name, {}))
    return dict(cfg)


def _out_dir(args, default_name):
    return Path(args.out) if args.out else io.default_out_root() / default_name


def _run_report(command, config, metrics, artifacts, t0):
    return {
        "command": command,
        "config": config,
        "config_hash": io.config_hash(config),
        "metrics": metrics,
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "wall_time": time.time() - t0,
    }


# -- gen-data -----------------------------------------------------------------------


def cmd_gen_data(args):
    from .worksim import CorpusConfig, generate_corpus

    t0 = time.time()
    raw = _section(args.config, "corpus")
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.localized:
        raw["localized"] = True
    if int(raw.get("n_refs", 2)) < 2:
        raise UsageError("n_refs must be at least 2")
    try:
        cfg = CorpusConfig(**raw)
    except TypeError as exc:
        raise UsageError(f"bad corpus config: {exc}")
    out = _out_dir(args, "corpus")
    manifest = generate_corpus(cfg, out)
    report = _run_report(
        "gen-data",
        cfg.to_dict(),
        {"n_clips": len(manifest["clips"]), "n_train_refs": len(manifest["splits"]["train"]),
         "n_test_refs": len(manifest["splits"]["test"])},
        {"manifest": out / "manifest.json", "pairs": out / "pairs.csv"},
        t0,
    )
    print(json.dumps(report["metrics"]))
    return EXIT_OK


# -- train / eval ---------------------------------------------------------------------


def _train_config(args):
    from .trainer import TrainConfig, desk_train_config

    raw = _section(args.config, "train")
    if args.seed is not None:
        raw["seed"] = args.seed
    profile = args.profile or raw.get("profile", "desk")
    raw["profile"] = profile
    try:
        return desk_train_config(**raw) if profile == "desk" else TrainConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad train config: {exc}")


def _require_corpus(path):
    if path is None or not (Path(path) / "manifest.json").exists():
        raise UsageError(f"no corpus manifest under {path}")
    return Path(path)


def cmd_train(args):
    from .trainer import train

    t0 = time.time()
    corpus = _require_corpus(args.corpus)
    cfg = _train_config(args)
    out = _out_dir(args, "train")
    res = train(cfg, corpus, out, log_every_epoch=False)
    metrics = {k: v for k, v in res.final.items() if k != "predictions"}
    report = _run_report(
        "train", cfg.to_dict(), metrics,
        {"checkpoint": res.checkpoint, "log": out / "train_log.jsonl"}, t0,
    )
    report["history"] = res.history
    io.write_json(out / "report.json", report)
    print(json.dumps({"srocc": metrics["srocc"], "plcc": metrics["plcc"]}))
    return EXIT_OK


def _selection_traces(model, data, seed):
    import torch

    model.eval()
    frags, dist = data.sample(np.random.default_rng(seed))
    traces = []
    with torch.no_grad():
        for i in range(len(data)):
            batch = data.batch([i], frags, dist)
            _, aux = model(batch, return_aux=True)
            sel = aux["selection"]
            if sel is None:
                continue
            tr = sel.to_trace(model.importance(batch))
            tr.update({"clip_id": data.ids[i], "grid_side": model.config.grid_side,
                       "target_side": model.config.target_side})
            traces.append(tr)
    return traces


def cmd_eval(args):
    from .trainer import evaluate, load_checkpoint, load_pairs, load_split, score_report
    from .worksim import load_manifest

    t0 = time.time()
    corpus = _require_corpus(args.corpus)
    out = _out_dir(args, "eval")
    pairs = load_pairs(corpus)
    artifacts = {}
    if args.oracle:
        rows = [r for r in load_manifest(corpus)["clips"] if r["split"] == "test"]
        ids = [r["clip_id"] for r in rows]
        mos = np.array([r["mos"] for r in rows])
        metrics = score_report(mos, mos, ids, pairs, args.logistic_plcc)
        metrics["predictions"] = dict(zip(ids, mos.tolist()))
        config = {"oracle": True}
    else:
        if args.checkpoint is None or not Path(args.checkpoint).exists():
            raise UsageError(f"checkpoint {args.checkpoint} not found")
        model, cfg, _ = load_checkpoint(args.checkpoint)
        data = load_split(corpus, "test", model.config)
        metrics = evaluate(model, data, cfg.eval_seed, pairs, args.logistic_plcc, cfg.frame_interval, cfg.eval_samples)
        config = cfg.to_dict()
        if args.trace and model.config.qrs:
            traces = _selection_traces(model, data, cfg.eval_seed)
            io.write_json(out / "selection_traces.json", traces)
            artifacts["traces"] = out / "selection_traces.json"
    metrics["targets"] = {r["clip_id"]: r["mos"] for r in load_manifest(corpus)["clips"] if r["split"] == "test"}
    report = _run_report("eval", config, metrics, artifacts, t0)
    io.write_json(out / "report.json", report)
    ra = metrics.get("rank_accuracy", {})
    print(json.dumps({"srocc": metrics["srocc"], "plcc": metrics["plcc"], "rank_accuracy": ra.get("all")}))
    return EXIT_OK


# -- clean-scores ----------------------------------------------------------------------


def cmd_clean_scores(args):
    from .subjective import clean, read_ratings_csv, write_mos_csv, write_ratings_csv

    t0 = time.time()
    path = Path(args.ratings)
    if not path.exists():
        raise UsageError(f"ratings file {path} not found")
    parsed = read_ratings_csv(path)
    out = _out_dir(args, "clean")
    if parsed.errors:
        out.mkdir(parents=True, exist_ok=True)
        io.write_json(out / "row_errors.json", [{"line": n, "error": e} for n, e in parsed.errors])
        for n, e in parsed.errors[:20]:
            print(f"line {n}: {e}", file=sys.stderr)
    if parsed.matrix is None:
        if parsed.errors and parsed.n_rows == 0 and parsed.errors[0][0] == 1:
            raise UsageError("ratings CSV has the wrong header")
        raise UsageError("ratings CSV has no usable rows")
    if parsed.n_rows and len(parsed.errors) / parsed.n_rows > MALFORMED_LIMIT:
        print(f"{len(parsed.errors)} of {parsed.n_rows} rows malformed", file=sys.stderr)
        return EXIT_RUNTIME
    rm = parsed.matrix
    res = clean(rm, strict=args.strict_bt500)
    write_ratings_csv(out / "cleaned.csv", res.trimmed)
    write_mos_csv(out / "mos.csv", res.trimmed.video_ids, res.mos)
    n_in = int(rm.mask.sum())
    n_kept = int(res.trimmed.mask.sum())
    report = res.report()
    report["counts"] = {
        "input": n_in,
        "kept": n_kept,
        "removed": n_in - n_kept,
        "removed_by_observer_drop": n_in - n_kept - len(res.trim_log.removed),
        "removed_by_trim": len(res.trim_log.removed),
    }
    report["removal_log"] = res.trim_log.to_rows()
    report["config_hash"] = io.config_hash({"strict": args.strict_bt500, "input": str(path)})
    report["wall_time"] = time.time() - t0
    io.write_json(out / "screening.json", report)
    print(json.dumps(report["counts"]))
    return EXIT_OK


# -- plot -------------------------------------------------------------------------------


def cmd_plot(args):
    from . import plots

    path = Path(args.report)
    if not path.exists():
        raise UsageError(f"report {path} not found")
    try:
        data = io.read_json(path)
    except json.JSONDecodeError:
        raise UsageError(f"{path} is not valid JSON")
    if not data:
        raise UsageError(f"{path} is empty")
    out = Path(args.out) if args.out else path.with_name(f"{args.kind}.png")
    try:
        plots.render(args.kind, data, out)
    except plots.PlotInputError as exc:
        raise UsageError(str(exc))
    print(str(out))
    return EXIT_OK


# -- ablate -------------------------------------------------------------------------------


def cmd_ablate(args):
    from .trainer import ablate, toggle_grid

    t0 = time.time()
    corpus = _require_corpus(args.corpus)
    cfg = _train_config(args)
    out = _out_dir(args, "ablate")
    seeds = args.seeds or [cfg.seed]
    rows = []
    for s in seeds:
        for r in ablate(toggle_grid(), replace(cfg, seed=s), corpus, out / f"seed{s}"):
            rows.append({"seed": s, **r})
    report = _run_report("ablate", cfg.to_dict(), {"rows": rows}, {}, t0)
    io.write_json(out / "ablation.json", report)
    for r in rows:
        print(json.dumps(r, sort_keys=True))
    return EXIT_OK


# -- parser -------------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (or file for plot)")
    common.add_argument("--profile", choices=("desk", "paper"))
    common.add_argument("--strict-bt500", action="store_true", help="literal screening transcription")
    common.add_argument("--logistic-plcc", action="store_true", help="fit a 4-parameter logistic before PLCC")

    p = argparse.ArgumentParser(prog="ksvqe", description="short-form video quality toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate the synthetic corpus")
    g.add_argument("--localized", action="store_true", help="confine quality to the centre window")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train on a corpus")
    t.add_argument("--corpus", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    e.add_argument("--corpus", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--oracle", action="store_true", help="score the test split with its own targets")
    e.add_argument("--trace", action="store_true", help="also write region-selection traces")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("clean-scores", parents=[common], help="clean raw subjective ratings")
    c.add_argument("ratings", help="CSV with observer_id,video_id,score")
    c.set_defaults(func=cmd_clean_scores)

    pl = sub.add_parser("plot", parents=[common], help="render a static figure")
    pl.add_argument("report", help="report, manifest or trace JSON")
    pl.add_argument("--kind", required=True, choices=("scatter", "mos-hist", "qp-trend", "selection-map"))
    pl.set_defaults(func=cmd_plot)

    a = sub.add_parser("ablate", parents=[common], help="train every QRS/CaM/DaM on-off combination")
    a.add_argument("--corpus", required=True)
    a.add_argument("--seeds", type=int, nargs="*")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"ksvqe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"ksvqe: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        print(f"ksvqe: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
