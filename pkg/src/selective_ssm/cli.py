"""Command line entry point: ``selective-ssm <command> [options]``.

Commands write machine-readable results (JSON, and CSV with a schema column
and header row) under ``--out`` (default: ``$SELECTIVE_SSM_OUT`` or
``./results``). Exit status: 0 when every threshold the command checks is
met, 1 when one is missed, 2 on usage or configuration errors.

A whole invocation can be stored in a JSON spec file and replayed with
``selective-ssm --spec run.json``; the file holds ``command``, ``args``
(option names without dashes) and optionally ``out`` and ``seeds``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger("selective_ssm")

OUT_ENV = "SELECTIVE_SSM_OUT"
SCHEMA = "selective_ssm/1"
EXIT_OK, EXIT_MISSED, EXIT_USAGE = 0, 1, 2
CONSTRUCTIONS = ("keep_nth", "mqar_mamba", "mqar_mamba2", "mqar_s4d", "induction_heads_dt")
TASKS = ("keep_nth", "mqar", "induction_heads")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# spec files


@dataclass
class ExperimentSpec:
    command: str
    args: dict = field(default_factory=dict)
    out: str | None = None
    seeds: list | None = None

    @classmethod
    def from_json(cls, text: str) -> "ExperimentSpec":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"spec file is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict) or "command" not in doc:
            raise UsageError("spec file needs a 'command' field")
        unknown = set(doc) - {"command", "args", "out", "seeds"}
        if unknown:
            raise UsageError(f"unknown spec fields: {sorted(unknown)}")
        return cls(doc["command"], dict(doc.get("args", {})), doc.get("out"), doc.get("seeds"))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    def to_argv(self) -> list:
        argv = [self.command]
        args = dict(self.args)
        if self.out is not None:
            args["out"] = self.out
        if self.seeds is not None:
            args["seeds"] = self.seeds
        for key in sorted(args):
            val = args[key]
            if key == "construction" and self.command == "verify":
                argv.insert(1, str(val))
                continue
            flag = "--" + key.replace("_", "-")
            if isinstance(val, bool):
                if val:
                    argv.append(flag)
            elif isinstance(val, (list, tuple)):
                argv.append(flag)
                argv.extend(str(v) for v in val)
            elif val is not None:
                argv.extend([flag, str(val)])
        return argv


# ---------------------------------------------------------------------------
# output helpers


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, default=_json_default) + "\n"


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    return "" if v is None else str(v)


def csv_text(columns: list, rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["schema"] + list(columns))
    for row in rows:
        w.writerow([SCHEMA] + [_fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def _write(out: Path, name: str, text: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(text, encoding="utf-8")
    log.info("wrote %s", path)
    return path


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=_json_default).encode()).hexdigest()[:12]


def _limit_threads():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return
    threadpool_limits(1)


# ---------------------------------------------------------------------------
# verify


def _verify_setup(args):
    from . import constructions as cons
    from .tasks import TaskConfig

    name = args.construction
    if name == "keep_nth":
        T = args.t or 50
        vocab = args.vocab or 128
        n = args.position or 5
        block = cons.build_keep_nth(n, T, vocab)
        task = TaskConfig("keep_nth", T=T, vocab_size=vocab, n=n, seed=args.seed)
        return block, task, 1.0, ">="
    if name == "induction_heads_dt":
        vocab = args.vocab or 10
        T = args.t or 100
        block = cons.build_induction_heads_dt(vocab)
        task = TaskConfig("induction_heads", T=T, vocab_size=vocab, p_hard=args.p_hard, gamma=args.gamma,
                          seed=args.seed)
        return block, task, 1.0, ">="
    kappa = args.kappa or 4
    vocab = args.vocab or 16
    T = args.t or 100
    builder = {"mqar_mamba": cons.build_mqar_mamba, "mqar_mamba2": cons.build_mqar_mamba2,
               "mqar_s4d": cons.build_mqar_s4d}[name]
    block = builder(kappa, vocab, mode=args.mode, epsilon=args.epsilon, seed=args.seed)
    task = TaskConfig("mqar", T=T, vocab_size=vocab, kappa=kappa, seed=args.seed)
    if args.ablate_gate:
        if name != "mqar_s4d":
            raise UsageError("--ablate-gate applies to mqar_s4d only")
        return block.without_gate(), task, 2.0 / vocab, "<="
    return block, task, (1.0 if args.mode == "onehot" else args.jl_threshold), ">="


def verify_report(args) -> dict:
    from .mixers import block_to_json
    from .tasks import evaluate_accuracy, make_dataset, stack

    if args.ablate_gate and args.construction != "mqar_s4d":
        raise UsageError("--ablate-gate applies to mqar_s4d only")
    if args.construction not in ("mqar_mamba", "mqar_mamba2", "mqar_s4d") and args.mode != "onehot":
        raise UsageError(f"--mode jl is not defined for {args.construction}")
    block, task, threshold, op = _verify_setup(args)
    instances = make_dataset(task, args.num_instances, "test")
    X, Y, M = stack(instances)
    acc, det = evaluate_accuracy(block, (X, Y, M), n_classes=task.n_classes, batch_size=args.batch_size,
                                 return_details=True)
    met = acc >= threshold if op == ">=" else acc <= threshold
    failures = []
    for row in det["failed_rows"][: args.max_failures]:
        bad = np.nonzero(M[row] & (det["pred"][row] != Y[row]))[0]
        failures.append({"index": int(row), "input": X[row].tolist(), "target": Y[row].tolist(),
                         "prediction": det["pred"][row].tolist(), "wrong_positions": bad.tolist()})
    return {
        "command": "verify",
        "construction": args.construction,
        "ablated_gate": bool(args.ablate_gate),
        "mode": args.mode,
        "task": task.to_dict(),
        "num_instances": args.num_instances,
        "model": block.config() | {"n_parameters": block.n_parameters()},
        "model_hash": config_hash({"model": block_to_json(block)}),
        "accuracy": acc,
        "threshold": threshold,
        "comparison": op,
        "met": bool(met),
        "n_failed_sequences": int(len(det["failed_rows"])),
        "failures": failures,
    }


def cmd_verify(args) -> int:
    rep = verify_report(args)
    out = Path(args.out)
    _write(out, "verify.json", dumps(rep))
    cols = ["construction", "mode", "ablated_gate", "kappa", "vocab", "T", "num_instances", "accuracy",
            "threshold", "met"]
    row = {"construction": rep["construction"], "mode": rep["mode"], "ablated_gate": rep["ablated_gate"],
           "kappa": rep["task"]["kappa"], "vocab": rep["task"]["vocab_size"], "T": rep["task"]["T"],
           "num_instances": rep["num_instances"], "accuracy": rep["accuracy"], "threshold": rep["threshold"],
           "met": rep["met"]}
    _write(out, "verify.csv", csv_text(cols, [row]))
    print(f"{rep['construction']}: accuracy {rep['accuracy']:.6f} ({rep['comparison']} {rep['threshold']:.4g}) "
          f"-> {'met' if rep['met'] else 'MISSED'}")
    return EXIT_OK if rep["met"] else EXIT_MISSED


# ---------------------------------------------------------------------------
# training and sweeps


def _parse_state_sizes(values, vocab: int) -> list:
    out = []
    for v in values:
        s = str(v)
        if s.endswith("V"):
            out.append(int(s[:-1] or 1) * vocab)
        else:
            out.append(int(s))
    return out


def _cells(args) -> list:
    """Every (config, seed) pair of a sweep, in a fixed order."""
    from .tasks import TaskConfig

    if not args.seeds:
        raise UsageError("the seed list is empty")
    cells = []
    kappas = args.kappa if args.task == "mqar" else [None]
    ns = args.n_pos if args.task == "keep_nth" else [None]
    for kind in args.kind:
        for T in args.t:
            for vocab in args.vocab:
                for kappa in kappas:
                    for npos in ns:
                        for d in args.d:
                            for N in _parse_state_sizes(args.state, vocab):
                                task = TaskConfig(args.task, T=T, vocab_size=vocab, kappa=kappa, n=npos,
                                                  p_hard=args.p_hard, gamma=args.gamma, seed=args.data_seed)
                                model = {"kind": kind, "d": d, "N": N, "pe": args.pe,
                                         "simplified": args.simplified}
                                for seed in args.seeds:
                                    optim = {"lr_init": args.lr_init, "lr_final": args.lr_final,
                                             "epochs": args.epochs, "batch_size": args.batch_size,
                                             "wall_clock_budget": None if args.deterministic else args.budget,
                                             "target_val_accuracy": args.target_val_accuracy, "seed": seed}
                                    sizes = {"train": args.train_size, "val": args.val_size,
                                             "test": args.test_size}
                                    cells.append({"task": task.to_dict(), "model": model, "optim": optim,
                                                  "sizes": sizes})
    if not cells:
        raise UsageError("the grid is empty")
    return cells


def run_cell(cell: dict, model_path: str | None = None) -> dict:
    """Train one configuration; returns a flat result row plus the record."""
    _limit_threads()
    from .mixers import block_to_json
    from .tasks import TaskConfig
    from .training import DatasetSizes, OptimConfig, TrainingDiverged, make_model, train

    task = TaskConfig(**cell["task"])
    optim = OptimConfig.desk(**cell["optim"])
    sizes = DatasetSizes(**cell["sizes"])
    m = cell["model"]
    block = make_model(m["kind"], task, m["d"], m["N"], pe=m["pe"], simplified=m["simplified"], seed=optim.seed)
    try:
        final, rec = train(block, task, optim, sizes)
        status = rec.stop_reason
        acc = rec.test_accuracy
        record = rec.to_dict()
    except TrainingDiverged as exc:
        final, status, acc, record = exc.checkpoint, "diverged", 0.0, exc.record.to_dict()
    if model_path:
        Path(model_path).parent.mkdir(parents=True, exist_ok=True)
        Path(model_path).write_text(block_to_json(final), encoding="utf-8")
    cfg_no_seed = {k: v for k, v in cell.items() if k != "optim"} | {
        "optim": {k: v for k, v in cell["optim"].items() if k != "seed"}}
    row = {"config_hash": config_hash(cfg_no_seed), "task": task.kind, "kind": m["kind"], "kappa": task.kappa,
           "vocab": task.vocab_size, "n": task.n, "d": m["d"], "N": m["N"], "T": task.T, "pe": m["pe"],
           "seed": optim.seed, "accuracy": acc, "epochs": record["epochs_run"], "params": block.n_parameters(),
           "stop_reason": status}
    return {"row": row, "record": record}


RUN_COLUMNS = ["config_hash", "task", "kind", "kappa", "vocab", "n", "d", "N", "T", "pe", "seed", "accuracy",
               "epochs", "params", "stop_reason"]
CELL_COLUMNS = ["config_hash", "task", "kind", "kappa", "vocab", "n", "d", "N", "T", "pe", "n_seeds",
                "best_accuracy", "mean_accuracy", "params"]


def theory_bounds(task: str, kinds, kappas, vocabs) -> list:
    """Model widths the closed-form solutions need, per kind and task size."""
    rows = []
    for kind in kinds:
        for vocab in vocabs:
            for kappa in (kappas if task == "mqar" else [None]):
                lv = math.log2(vocab)
                if task == "induction_heads" and kind == "mamba_dt_transpose":
                    d, formula = 2 * vocab, "2*V"
                elif task == "mqar" and kind == "mamba":
                    d, formula = kappa + lv, "kappa+log2(V)"
                elif task == "mqar" and kind == "mamba2":
                    d, formula = math.log2(kappa) + lv, "log2(kappa)+log2(V)"
                elif task == "mqar" and kind == "s4d":
                    d, formula = kappa * lv, "kappa*log2(V)"
                else:
                    continue
                rows.append({"task": task, "kind": kind, "kappa": kappa, "vocab": vocab, "d_bound": float(d),
                             "formula": formula})
    return rows


def _aggregate(results: list) -> list:
    groups = {}
    for r in results:
        groups.setdefault(r["row"]["config_hash"], []).append(r["row"])
    cells = []
    for h, rows in groups.items():
        accs = [r["accuracy"] for r in rows]
        first = rows[0]
        cells.append({k: first[k] for k in CELL_COLUMNS if k in first} | {
            "n_seeds": len(rows), "best_accuracy": max(accs), "mean_accuracy": float(np.mean(accs))})
    return cells


def _run_all(cells: list, jobs: int, model_dir: Path | None) -> list:
    paths = [None if model_dir is None else str(model_dir / f"model_{i:04d}.json") for i in range(len(cells))]
    if jobs <= 1 or len(cells) == 1:
        return [run_cell(c, p) for c, p in zip(cells, paths)]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run_cell, cells, paths))


def cmd_sweep(args) -> int:
    cells = _cells(args)
    out = Path(args.out)
    results = _run_all(cells, args.jobs, out / "models" if args.save_models else None)
    rows = [r["row"] for r in results]
    agg = _aggregate(results)
    _write(out, "sweep_runs.csv", csv_text(RUN_COLUMNS, rows))
    _write(out, "sweep_cells.csv", csv_text(CELL_COLUMNS, agg))
    bounds = theory_bounds(args.task, args.kind, args.kappa, args.vocab)
    _write(out, "sweep_bounds.csv", csv_text(["task", "kind", "kappa", "vocab", "d_bound", "formula"], bounds))
    _write(out, "sweep.json", dumps({"command": "sweep", "cells": agg, "runs": [r["row"] for r in results]}))
    partial = any(r["stop_reason"] in ("budget", "diverged") for r in rows)
    missed = args.threshold is not None and any(c["best_accuracy"] < args.threshold for c in agg)
    for c in agg:
        print(f"{c['kind']} d={c['d']} N={c['N']} vocab={c['vocab']} kappa={c['kappa']}: "
              f"best {c['best_accuracy']:.4f} mean {c['mean_accuracy']:.4f}")
    if partial:
        print("some runs stopped on budget or diverged", file=sys.stderr)
    return EXIT_MISSED if (partial or missed) else EXIT_OK


def cmd_train(args) -> int:
    args.seeds = [args.seed]
    for name in ("kind", "t", "vocab", "kappa", "n_pos", "d", "state"):
        val = getattr(args, name)
        if isinstance(val, list) and len(val) != 1:
            raise UsageError(f"train takes a single value for --{name.replace('_', '-')}")
    cells = _cells(args)
    out = Path(args.out)
    res = run_cell(cells[0], str(out / "model.json"))
    _write(out, "train_run.csv", csv_text(RUN_COLUMNS, [res["row"]]))
    _write(out, "train_run.json", dumps({"command": "train", "row": res["row"], "record": res["record"]}))
    print(f"test accuracy {res['row']['accuracy']:.4f} after {res['row']['epochs']} epochs "
          f"({res['row']['stop_reason']})")
    if res["row"]["stop_reason"] in ("budget", "diverged"):
        return EXIT_MISSED
    if args.threshold is not None and res["row"]["accuracy"] < args.threshold:
        return EXIT_MISSED
    return EXIT_OK


# ---------------------------------------------------------------------------
# analysis commands


def _scalar_params(args, rng):
    from .analysis import ScalarSsm

    N = args.state_size
    if args.random:
        lam = rng.uniform(0, 3.0 / args.t, size=N)
        return ScalarSsm(args.kind, lam, rng.uniform(-1, 1, N),
                         rng.uniform(-1, 1, N) if args.kind == "s6" else None,
                         float(rng.uniform(-1, 1)) if args.kind == "s6" else 0.0,
                         float(rng.uniform(-1, 1)) if args.kind == "s6" else 0.0)
    lam = np.full(N, args.lam)
    return ScalarSsm(args.kind, lam, np.full(N, args.b), np.full(N, args.w_b) if args.kind == "s6" else None,
                     args.w_delta if args.kind == "s6" else 0.0, args.b_delta if args.kind == "s6" else 0.0)


def cmd_sensitivity(args) -> int:
    from .analysis import check_small_rate_bound, sensitivity_report

    rng = np.random.default_rng(args.seed)
    params = _scalar_params(args, rng)
    x = rng.uniform(-1, 1, size=args.t) if args.input == "random" else np.ones(args.t)
    t = args.t
    rows = []
    for n in range(params.N):
        for j in range(1, t):
            rep = sensitivity_report(params, x, t, j, n, args.fd_step)
            rows.append({"t": t, "j": j, "n": n, "analytic": rep.analytic, "fd": rep.fd, "rel_error": rep.rel_error,
                         "decay_exponent": rep.decay_exponent})
    worst = max(r["rel_error"] for r in rows) if rows else 0.0
    summary = {"command": "sensitivity", "kind": params.kind, "T": t, "max_rel_error": worst,
               "tolerance": args.tolerance, "params": {"lam": params.lam, "b_b": params.b_b, "w_b": params.w_b,
                                                       "w_delta": params.w_delta, "b_delta": params.b_delta},
               "input": x}
    if params.kind == "s4d":
        ratios = []
        for n in range(params.N):
            prof = [r["analytic"] for r in rows if r["n"] == n]
            ratios += [prof[i] / prof[i + 1] for i in range(len(prof) - 1) if prof[i + 1] != 0]
        if ratios:
            spread = (max(ratios) - min(ratios)) / max(abs(float(np.mean(ratios))), 1e-300)
            summary["decay_ratio_spread"] = spread
    else:
        lem = check_small_rate_bound(params, x, args.c, strict=False)
        summary["small_rate_check"] = lem.to_dict()
    _write(Path(args.out), "sensitivity.csv",
           csv_text(["t", "j", "n", "analytic", "fd", "rel_error", "decay_exponent"], rows))
    _write(Path(args.out), "sensitivity.json", dumps(summary))
    print(f"max relative error {worst:.3e} (tolerance {args.tolerance:g})")
    return EXIT_OK if worst < args.tolerance else EXIT_MISSED


def _load_model(path: str):
    from .mixers import block_from_json

    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read model file {path}: {exc}") from exc
    try:
        return block_from_json(text)
    except ValueError as exc:
        raise UsageError(f"malformed model file {path}: {exc}") from exc


def cmd_histogram(args) -> int:
    from . import constructions as cons
    from .analysis import decay_histogram
    from .tasks import TaskConfig, make_dataset

    if (args.model is None) == (args.construction is None):
        raise UsageError("give exactly one of --model or --construction")
    if args.construction is not None:
        if args.construction != "keep_nth":
            raise UsageError("histograms are built for the keep_nth construction only")
        block = cons.build_keep_nth(args.position, args.t, args.vocab)
        model_id = f"construction:keep_nth:n={args.position}:T={args.t}:V={args.vocab}"
    else:
        block = _load_model(args.model)
        model_id = f"file:{Path(args.model).name}"
    task = TaskConfig("keep_nth", T=args.t, vocab_size=args.vocab, n=args.position, seed=args.seed)
    insts = make_dataset(task, args.num_instances, "test")
    marker = args.marker or args.position
    hist = decay_histogram(block, insts, bins=args.bins, group_by=args.group_by, marker=marker,
                           model_id=model_id, dataset_id=f"keep_nth:seed={args.seed}:count={args.num_instances}")
    top = {g: hist.proportion(g, 1 - args.edge, 1.0) for g in sorted(hist.counts)}
    bottom = {g: hist.proportion(g, 0.0, args.edge) for g in sorted(hist.counts)}
    summary = {"command": "histogram", "histogram": hist.to_dict(), "top_bin_share": top, "bottom_bin_share": bottom,
               "edge": args.edge, "marker": marker if args.group_by == "timestep" else None}
    ok = True
    if args.min_split is not None:
        if args.group_by != "timestep":
            raise UsageError("--min-split needs --group-by timestep")
        ok = bottom["before"] >= args.min_split and top["after"] >= args.min_split
        summary["min_split"] = args.min_split
        summary["met"] = ok
    _write(Path(args.out), "histogram.csv", hist.to_csv())
    _write(Path(args.out), "histogram.json", dumps(summary))
    for g in sorted(hist.counts):
        print(f"{g}: share in [0,{args.edge}] {bottom[g]:.4f}, share in [{1 - args.edge},1] {top[g]:.4f}")
    return EXIT_OK if ok else EXIT_MISSED


def wavelet_report(jumps, n_max: int, grid_log2: int, fourier_terms: int) -> dict:
    from .analysis import PiecewiseConstant, approx_rate

    values = tuple(float(i % 2) for i in range(len(jumps) + 1))
    target = PiecewiseConstant(tuple(jumps), values)
    Ns = list(range(1, n_max + 1))
    wav = approx_rate(target, Ns, "mamba_wavelet", grid_log2=grid_log2)
    fou = approx_rate(target, Ns, "fourier", fourier_terms=fourier_terms)
    lo, hi = -1.3, -0.7
    below = all(w < f for N, w, f in zip(Ns, wav.sq_errors, fou.sq_errors) if N >= 6)
    checks = {
        "wavelet_slope_in_range": lo <= wav.slope_sq <= hi,
        "fourier_slope_in_range": lo <= fou.slope_sq <= hi,
        "wavelet_below_fourier_from_6": below,
    }
    return {"command": "wavelet", "target": target.descriptor(), "slope_range": [lo, hi],
            "mamba_wavelet": wav.to_dict(), "fourier": fou.to_dict(), "checks": checks, "met": all(checks.values())}


def cmd_wavelet(args) -> int:
    rep = wavelet_report(args.jump, args.n_max, args.grid_log2, args.fourier_terms)
    rows = []
    for method in ("mamba_wavelet", "fourier"):
        for N, e in zip(rep[method]["N"], rep[method]["sq_errors"]):
            rows.append({"method": method, "N": N, "sq_error": e})
    _write(Path(args.out), "wavelet.csv", csv_text(["method", "N", "sq_error"], rows))
    _write(Path(args.out), "wavelet.json", dumps(rep))
    print(f"wavelet slope {rep['mamba_wavelet']['slope_sq']:.3f}, fourier slope {rep['fourier']['slope_sq']:.3f}")
    for k, v in rep["checks"].items():
        print(f"  {k}: {'yes' if v else 'NO'}")
    return EXIT_OK if rep["met"] else EXIT_MISSED


def cmd_gen(args) -> int:
    from .tasks import TaskConfig, dump_ndjson, make_dataset

    task = TaskConfig(args.task, T=args.t[0], vocab_size=args.vocab[0], kappa=args.kappa[0] if args.kappa else None,
                      n=args.n_pos[0] if args.n_pos else None, p_hard=args.p_hard, gamma=args.gamma,
                      seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_ndjson(make_dataset(task, args.count, args.split), out / f"{args.task}_{args.split}.ndjson")
    print(f"wrote {args.count} {args.task} instances")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _common(p):
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded numerics; wall-clock budgets are ignored so reruns are identical")
    p.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV} or ./results)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _task_opts(p):
    p.add_argument("--task", choices=TASKS, required=True, help="synthetic task")
    p.add_argument("--t", type=int, nargs="+", default=[50], help="sequence length(s)")
    p.add_argument("--vocab", type=int, nargs="+", default=[16], help="task vocabulary size(s)")
    p.add_argument("--kappa", type=int, nargs="+", default=[4], help="MQAR key count(s)")
    p.add_argument("--n-pos", type=int, nargs="+", default=[5], help="Keep n-th position(s), 1-based")
    p.add_argument("--p-hard", type=float, default=0.0, help="induction heads: share of hard sequences")
    p.add_argument("--gamma", type=float, default=0.1, help="induction heads: hard-position window")


def _model_opts(p):
    p.add_argument("--kind", nargs="+", default=["mamba"],
                   choices=["s4d", "mamba", "mamba2", "mamba_dt_transpose"], help="mixer kind(s)")
    p.add_argument("--d", type=int, nargs="+", default=[32], help="embedding width(s)")
    p.add_argument("--state", nargs="+", default=["8"],
                   help="state size(s) N; a suffix V multiplies by the vocabulary, e.g. 4V")
    p.add_argument("--pe", action=argparse.BooleanOptionalAction, default=True, help="positional channel")
    p.add_argument("--simplified", action=argparse.BooleanOptionalAction, default=True,
                   help="embedding + SSM + readout only (no conv, no gate)")
    p.add_argument("--epochs", type=int, default=300, help="maximum epochs")
    p.add_argument("--batch-size", type=int, default=64, help="minibatch size")
    p.add_argument("--lr-init", type=float, default=0.03, help="initial learning rate")
    p.add_argument("--lr-final", type=float, default=1e-6, help="final learning rate")
    p.add_argument("--train-size", type=int, default=20_000, help="training sequences")
    p.add_argument("--val-size", type=int, default=1_000, help="validation sequences")
    p.add_argument("--test-size", type=int, default=10_000, help="test sequences")
    p.add_argument("--budget", type=float, default=1800.0, help="wall-clock seconds per run")
    p.add_argument("--target-val-accuracy", type=float, default=None,
                   help="stop once validation accuracy reaches this value")
    p.add_argument("--data-seed", type=int, default=0, help="seed of the generated datasets")
    p.add_argument("--threshold", type=float, default=None, help="exit 1 if accuracy ends below this")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selective-ssm", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--spec", help="JSON spec file holding a full invocation")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("verify", help="check a closed-form construction against the task oracle")
    p.add_argument("construction", choices=CONSTRUCTIONS)
    p.add_argument("--kappa", type=int, help="MQAR keys (default 4)")
    p.add_argument("--vocab", type=int, help="vocabulary size")
    p.add_argument("--mode", choices=["onehot", "jl"], default="onehot", help="token embedding of MQAR builds")
    p.add_argument("--epsilon", type=float, default=0.1, help="JL distortion")
    p.add_argument("--jl-threshold", type=float, default=0.99, help="accuracy required in jl mode")
    p.add_argument("--t", type=int, help="sequence length")
    p.add_argument("--n", dest="position", type=int, help="Keep n-th position (1-based)")
    p.add_argument("-n", "--num-instances", dest="num_instances", type=int, default=1000,
                   help="number of test sequences")
    p.add_argument("--p-hard", type=float, default=0.0, help="induction heads: share of hard sequences")
    p.add_argument("--gamma", type=float, default=0.1, help="induction heads: hard-position window")
    p.add_argument("--ablate-gate", action="store_true", help="mqar_s4d: remove the gate (negative control)")
    p.add_argument("--batch-size", type=int, default=250, help="evaluation batch size")
    p.add_argument("--max-failures", type=int, default=10, help="failed sequences dumped in the report")
    _common(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sweep", help="train every grid cell for every seed")
    _task_opts(p)
    _model_opts(p)
    p.add_argument("--seeds", type=int, nargs="*", default=[0, 1, 2], help="training seeds")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--save-models", action="store_true", help="write every trained model")
    _common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("train", help="train a single configuration")
    _task_opts(p)
    _model_opts(p)
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sensitivity", help="state sensitivity to past inputs, analytic vs finite differences")
    p.add_argument("--kind", choices=["s4d", "s6"], default="s6", help="time-invariant or selective model")
    p.add_argument("--t", type=int, default=32, help="sequence length (sensitivities of h_T)")
    p.add_argument("--state-size", type=int, default=1, help="state components")
    p.add_argument("--lam", type=float, default=0.1, help="rate λ")
    p.add_argument("--b", type=float, default=1.0, help="input coefficient bias")
    p.add_argument("--w-b", type=float, default=0.0, help="input coefficient weight (s6)")
    p.add_argument("--w-delta", type=float, default=1.0, help="Δ weight (s6)")
    p.add_argument("--b-delta", type=float, default=0.0, help="Δ bias (s6)")
    p.add_argument("--random", action="store_true", help="draw the parameters from --seed instead")
    p.add_argument("--input", choices=["random", "ones"], default="random", help="input sequence")
    p.add_argument("--fd-step", type=float, default=1e-6, help="central difference step")
    p.add_argument("--tolerance", type=float, default=1e-5, help="largest accepted relative error")
    p.add_argument("--c", type=float, default=1.0, help="constant of the small-rate check")
    _common(p)
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("histogram", help="histogram of the decay factors exp(-λΔ)")
    p.add_argument("--model", help="model file written by train or sweep")
    p.add_argument("--construction", choices=["keep_nth"], help="use a closed-form model instead")
    p.add_argument("--t", type=int, default=50, help="sequence length")
    p.add_argument("--vocab", type=int, default=128, help="vocabulary size")
    p.add_argument("--n", dest="position", type=int, default=5, help="Keep n-th position")
    p.add_argument("-n", "--num-instances", dest="num_instances", type=int, default=200, help="sequences")
    p.add_argument("--bins", type=int, default=20, help="number of bins on [0, 1]")
    p.add_argument("--group-by", choices=["timestep", "sequence_length"], default="timestep",
                   help="split at --marker, or pool everything under one sequence-length group")
    p.add_argument("--marker", type=int, help="first step of the 'after' group (default: --n)")
    p.add_argument("--edge", type=float, default=0.05, help="width of the reported end bins")
    p.add_argument("--min-split", type=float, help="require this share low before and high after the marker")
    _common(p)
    p.set_defaults(func=cmd_histogram)

    p = sub.add_parser("wavelet", help="approximation rates of realized wavelets and Fourier series")
    p.add_argument("--jump", type=float, nargs="+", default=[0.5], help="jump locations in (0, 1)")
    p.add_argument("--n-max", type=int, default=10, help="largest number of terms / scales")
    p.add_argument("--grid-log2", type=int, default=16, help="quadrature grid has 2^k panels")
    p.add_argument("--fourier-terms", type=int, default=1 << 16, help="Fourier coefficients used for tails")
    _common(p)
    p.set_defaults(func=cmd_wavelet)

    p = sub.add_parser("gen", help="write a task dataset as NDJSON")
    _task_opts(p)
    p.add_argument("--split", choices=["train", "val", "test"], default="test", help="seed namespace to draw from")
    p.add_argument("--count", type=int, default=1000, help="number of sequences")
    _common(p)
    p.set_defaults(func=cmd_gen)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if argv[:1] == ["--spec"] or (argv and argv[0].startswith("--spec=")):
            path = argv[1] if argv[0] == "--spec" else argv[0].split("=", 1)[1]
            if argv[0] == "--spec" and len(argv) < 2:
                raise UsageError("--spec needs a file")
            try:
                spec = ExperimentSpec.from_json(Path(path).read_text(encoding="utf-8"))
            except OSError as exc:
                raise UsageError(f"cannot read spec file: {exc}") from exc
            argv = spec.to_argv() + argv[2 if argv[0] == "--spec" else 1:]
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.out is None:
            args.out = os.environ.get(OUT_ENV, "results")
        if args.deterministic:
            _limit_threads()
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
