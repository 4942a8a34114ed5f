"""Command-line entry point: ``nashmeta {simulate,train,report}``.

Every output file is JSONL; each row carries a ``kind`` tag (``header``,
``step``, ``endpoint``, ``summary``, ``epoch``, ``final``, ``aggregate``).
Only the ``timestamp`` field of the header varies between identical runs.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import synthetic as syn
from .data import DataError, DatasetSpec, builtin_spec, load_dataset
from .metalearn import TrainConfig, train_two_stage

log = logging.getLogger("nashmeta")

OUT_DIR_ENV = "NASHMETA_OUT_DIR"
METRIC_KEYS = ("overall_auc", "max_gaucd", "worst_gauc")
PROTOCOLS = ("ltr", "forml", "gdro")


class InputError(Exception):
    pass


def _header(command: str, config: dict) -> dict:
    return {
        "kind": "header",
        "command": command,
        "version": __version__,
        "config": config,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }


def _out_path(args, default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_DIR_ENV, "runs")) / default_name


def _write_jsonl(path: Path, rows) -> int:
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, allow_nan=False) + "\n")
            n += 1
    return n


def _parse_inits(text: str) -> list:
    if text in ("paper", "reference"):
        return [tuple(p) for p in syn.REFERENCE_INITS]
    inits = []
    for chunk in text.split(";"):
        parts = chunk.split(",")
        if len(parts) != 2:
            raise argparse.ArgumentTypeError(f"init {chunk!r} is not 'x,y'")
        try:
            inits.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise argparse.ArgumentTypeError(f"init {chunk!r} is not numeric") from None
    return inits


def _seeds(text: str) -> list:
    """``5`` means seeds 0..4; ``3,7,11`` is an explicit list."""
    try:
        if "," in text:
            seeds = [int(s) for s in text.split(",")]
        else:
            seeds = list(range(int(text)))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("seed list is empty")
    return seeds


def cmd_simulate(args) -> int:
    if args.bargain_steps is None:
        args.bargain_steps = min(100, args.steps)
    if not 0 <= args.bargain_steps <= args.steps:
        raise InputError("--bargain-steps must lie in [0, --steps]")
    config = {
        "methods": args.method,
        "inits": [list(p) for p in args.inits],
        "steps": args.steps,
        "lr": args.lr,
        "bargain_steps": args.bargain_steps,
        "protocol": args.protocol,
        "record_every": args.record_every,
    }
    rows = [_header("simulate", config)]
    for method in args.method:
        counts = {"pareto": 0, "fair": 0, "ideal": 0}
        for init in args.inits:
            traj = syn.run_trajectory(method, init, steps=args.steps, lr=args.lr,
                                      bargain_steps=args.bargain_steps, protocol=args.protocol)
            if args.record_every > 0:
                for t, (pt, meta) in enumerate(zip(traj.points, traj.steps)):
                    if t % args.record_every:
                        continue
                    rows.append({"kind": "step", "method": method, "init": list(traj.init),
                                 "theta": pt.theta.tolist(), "losses": list(pt.losses), **meta})
            verdict = traj.classify()
            for k in counts:
                counts[k] += int(verdict[k])
            rows.append({"kind": "endpoint", "method": method, "init": list(traj.init),
                         "theta": traj.final.theta.tolist(), "losses": list(traj.final.losses),
                         **verdict})
            log.info("%s %s: stationarity %.2e gap %.3f", method, traj.init,
                     verdict["stationarity"], verdict["gap"])
        rows.append({"kind": "summary", "method": method, "n_inits": len(args.inits),
                     "n_pareto": counts["pareto"], "n_fair": counts["fair"],
                     "n_ideal": counts["ideal"]})
    path = _out_path(args, f"simulate-{'+'.join(args.method)}.jsonl")
    _write_jsonl(path, rows)
    print(f"wrote {len(rows)} rows to {path}")
    return 0


def _resolve_spec(name: str, data_dir: str | None) -> DatasetSpec:
    p = Path(name)
    if not p.exists() and p.suffix != ".json":
        p = builtin_spec(name)
    spec = DatasetSpec.from_json(p)
    if data_dir:
        spec.path = str(Path(data_dir) / Path(spec.path).name)
    return spec


def _mean_std(values) -> dict:
    a = np.asarray(values, dtype=np.float64)
    std = float(a.std(ddof=1)) if a.size > 1 else 0.0
    return {"mean": float(a.mean()), "std": std, "n": int(a.size)}


def cmd_train(args) -> int:
    spec = _resolve_spec(args.dataset, args.data_dir)
    defaults = spec.train or {}
    bargain = args.bargain_epochs if args.two_stage else 0
    if bargain > args.epochs:
        raise InputError("--bargain-epochs exceeds --epochs")
    base = {
        "protocol": args.protocol,
        "epochs": args.epochs,
        "bargain_epochs": bargain,
        "lr": args.lr if args.lr is not None else defaults.get("lr", 1e-3),
        "dropout": args.dropout if args.dropout is not None else defaults.get("dropout", 0.0),
        "batch_size": args.batch_size if args.batch_size is not None else defaults.get("batch_size", 32),
        "norm": args.norm,
    }
    method = f"{'two-stage' if bargain else 'one-stage'}-{args.protocol}"
    spec_dict = spec.to_dict()
    spec_dict["path"] = str(spec.resolve_path())
    ds = load_dataset(spec)
    for w in ds.warnings:
        log.warning("%s", w)
    rows = [_header("train", {"method": method, "dataset": spec_dict, "train": base,
                              "seeds": args.seeds})]
    finals = []
    for seed in args.seeds:
        cfg = TrainConfig(seed=seed, **base)
        log.info("%s seed %d: %d epochs (%d bargaining)", method, seed, cfg.epochs, bargain)
        result = train_two_stage(cfg, ds)
        if args.steps:
            rows.extend({"kind": "step", "method": method, "seed": seed, **r.to_dict()}
                        for r in result.records)
        rows.extend({"kind": "epoch", "method": method, "seed": seed, **e} for e in result.epochs)
        final = result.epochs[-1]["test"]
        finals.append(final)
        rows.append({"kind": "final", "method": method, "dataset": spec.name, "seed": seed,
                     "metrics": final})
    rows.append({"kind": "aggregate", "method": method, "dataset": spec.name,
                 "metrics": {k: _mean_std([f[k] for f in finals]) for k in METRIC_KEYS}})
    path = _out_path(args, f"train-{spec.name or 'dataset'}-{method}.jsonl")
    _write_jsonl(path, rows)
    print(f"wrote {len(rows)} rows to {path}")
    return 0


def read_jsonl(path) -> list:
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: no such file")
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise InputError(f"{path}:{lineno}: malformed JSON ({e.msg})") from None
            if not isinstance(row, dict) or "kind" not in row:
                raise InputError(f"{path}:{lineno}: row has no 'kind' tag")
            rows.append(row)
    if not rows:
        raise InputError(f"{path}: empty file")
    return rows


def summarize(rows) -> tuple[list, list]:
    """Metric table rows and per-epoch mean alignment rates, keyed by method."""
    by_method, order = {}, []
    for r in rows:
        if r["kind"] == "final":
            key = (r.get("dataset", ""), r["method"])
            if key not in by_method:
                by_method[key] = []
                order.append(key)
            by_method[key].append(r["metrics"])
    table = []
    for key in order:
        ms = by_method[key]
        row = {"dataset": key[0], "method": key[1], "n_seeds": len(ms)}
        for k in METRIC_KEYS:
            row[k] = float(np.mean([m[k] for m in ms]))
            row[k + "_std"] = float(np.std([m[k] for m in ms], ddof=1)) if len(ms) > 1 else 0.0
        table.append(row)
    align = {}
    for r in rows:
        if r["kind"] == "epoch" and r.get("align_rate") is not None:
            align.setdefault((r["method"], r["epoch"]), []).append(r["align_rate"])
    align_rows = [{"method": m, "epoch": e, "align_rate": float(np.mean(v))}
                  for (m, e), v in sorted(align.items(), key=lambda kv: (kv[0][0], kv[0][1]))]
    return table, align_rows


def cmd_report(args) -> int:
    rows = []
    for p in args.inputs:
        rows.extend(read_jsonl(p))
    table, align_rows = summarize(rows)
    sims = [r for r in rows if r["kind"] == "summary"]
    if not table and not sims:
        raise InputError("no 'final' or 'summary' rows to report")
    if table:
        print(f"{'dataset':<14}{'method':<22}{'seeds':>6}{'AUC':>16}{'Max-gAUCD':>16}{'Worst-gAUC':>16}")
        for r in table:
            cells = "".join(f"{r[k]:>9.3f}±{r[k + '_std']:<6.3f}" for k in METRIC_KEYS)
            print(f"{r['dataset']:<14}{r['method']:<22}{r['n_seeds']:>6}{cells}")
    if align_rows:
        print("\nalignment rate per epoch (mean over seeds)")
        methods = sorted({r["method"] for r in align_rows})
        for m in methods:
            rates = [r["align_rate"] for r in align_rows if r["method"] == m]
            print(f"  {m}: " + " ".join(f"{v:.2f}" for v in rates))
    if sims:
        print(f"\n{'method':<16}{'inits':>6}{'pareto':>8}{'fair':>6}{'both':>6}")
        for s in sims:
            print(f"{s['method']:<16}{s['n_inits']:>6}{s['n_pareto']:>8}{s['n_fair']:>6}{s['n_ideal']:>6}")
    if args.csv:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            if table:
                writer = csv.DictWriter(fh, fieldnames=list(table[0]))
                writer.writeheader()
                writer.writerows(table)
            else:
                writer = csv.DictWriter(fh, fieldnames=["method", "n_inits", "n_pareto", "n_fair", "n_ideal"],
                                        extrasaction="ignore")
                writer.writeheader()
                writer.writerows(sims)
        print(f"wrote {args.csv}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nashmeta", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="gradient descent on the two-objective toy problem")
    s.add_argument("--method", action="append", choices=syn.METHODS, required=True,
                   help="repeat to run several methods")
    s.add_argument("--inits", type=_parse_inits, default="paper",
                   help="'reference' (alias 'paper') for the six reference starts, or 'x,y;x,y;...'")
    s.add_argument("--steps", type=int, default=1000)
    s.add_argument("--lr", type=float, default=0.1)
    s.add_argument("--bargain-steps", type=int,
                   help="bargaining steps for nbs-two-stage (default: min(100, --steps))")
    s.add_argument("--protocol", choices=PROTOCOLS, default="ltr",
                   help="fallback / stage-2 protocol for the bargaining methods")
    s.add_argument("--record-every", type=int, default=1,
                   help="write every n-th trajectory point (0: endpoints only)")
    s.add_argument("--out", help=f"output JSONL (default: ${OUT_DIR_ENV} or ./runs)")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", parents=[common], help="meta-reweighted MLP training on a tabular dataset")
    t.add_argument("--dataset", required=True, help="spec JSON path or shipped spec name")
    t.add_argument("--data-dir", help="directory holding the CSV named by the spec")
    t.add_argument("--protocol", choices=PROTOCOLS, default="forml")
    t.add_argument("--two-stage", action="store_true", help="bargain during the first epochs")
    t.add_argument("--bargain-epochs", type=int, default=15)
    t.add_argument("--epochs", type=int, default=50)
    t.add_argument("--seeds", type=_seeds, default=[0], help="count N (0..N-1) or comma list")
    t.add_argument("--lr", type=float, help="override the dataset spec default")
    t.add_argument("--dropout", type=float, help="override the dataset spec default")
    t.add_argument("--batch-size", type=int, help="override the dataset spec default")
    t.add_argument("--norm", choices=("l2", "l1"), default="l2")
    t.add_argument("--no-steps", dest="steps", action="store_false",
                   help="omit per-step rows")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("report", parents=[common], help="tabulate metrics from run files")
    r.add_argument("inputs", nargs="+")
    r.add_argument("--csv", help="also write the table as CSV")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InputError, DataError, ValueError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
