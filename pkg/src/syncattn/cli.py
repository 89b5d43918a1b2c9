"""Command line: params, inspect, verify, bench, train-demo.

Exit codes: 0 success, 1 verification or training failure, 2 usage error,
3 I/O error. Every file written is listed in that run's manifest.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import bench as B
from . import model as M
from . import ssa
from . import verify as V
from .engine import SeededRng, Tensor

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
THREAD_ENV = "SYNCATTN_THREADS"


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    subcommand: str
    config: dict
    seed: int
    version: str = __version__
    timestamp: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    outputs: list[str] = field(default_factory=list)
    threads: str | None = field(default_factory=B.thread_count)

    def write(self, directory: Path) -> Path:
        path = directory / f"{self.subcommand}_manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, default=str))
        return path


def _outdir(path) -> Path:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    if not os.access(d, os.W_OK):
        raise PermissionError(f"output directory {d} is not writable")
    return d


def _echo(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


# ---------------------------------------------------------------------------

def cmd_params(args) -> int:
    try:
        tf = M.count_params(M.BlockConfig(args.dim, args.heads, args.ffn_mult, block_kind="transformer"))
        osn = M.count_params(M.BlockConfig(args.dim, args.heads, args.ffn_mult, block_kind="osn"))
    except ssa.ConfigError as exc:
        raise UsageError(str(exc)) from exc
    rows = [("Transformer", tf), ("OSN", osn), ("difference", osn - tf)]
    for name, n in rows:
        print(f"{name:<12}{n:>14,}")
    result = {"dim": args.dim, "heads": args.heads, "ffn_mult": args.ffn_mult,
              "transformer": tf, "osn": osn, "difference": osn - tf}
    if args.out:
        d = _outdir(args.out)
        man = RunManifest("params", _echo(args), args.seed)
        p = d / "params.json"
        p.write_text(json.dumps(result, indent=2))
        man.outputs.append(str(p))
        man.write(d)
    else:
        print(json.dumps(result))
    return EXIT_OK


def cmd_inspect(args) -> int:
    try:
        cfg = M.BlockConfig(args.dim, args.heads, dropout_p=0.0)
    except ssa.ConfigError as exc:
        raise UsageError(str(exc)) from exc
    if args.head is not None and not 0 <= args.head < args.heads:
        raise UsageError(f"--head must lie in [0, {args.heads})")
    if args.seq_len < 1:
        raise UsageError("--seq-len must be >= 1")
    d = _outdir(args.out)
    rng = SeededRng(args.seed)
    params = M.init_params(cfg, rng.spawn(1))
    x = Tensor(rng.spawn(2).normal(args.seq_len * args.dim).reshape(args.seq_len, args.dim))
    _, art = M.osn_block_forward(x, params, "eval", return_artifacts=True)
    man = RunManifest("inspect", _echo(args), args.seed)
    paths = art.write_csv(d, prefix="sync")
    if args.head is not None:
        for h, p in enumerate(paths):
            if h != args.head:
                p.unlink()
        paths = [paths[args.head]]
    man.outputs += [str(p) for p in paths]
    r_path = d / "order_parameter.csv"
    with r_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["head", "r"])
        for h, r in enumerate(art.r.data):
            w.writerow([h, repr(float(r))])
    man.outputs.append(str(r_path))
    S = art.S.data
    diag = np.diagonal(S, axis1=-2, axis2=-1)
    summary = {
        "heads": art.summary(),
        "nonzero_fraction": float(art.nonzero_fraction().mean()),
        "diagonal_is_one": bool(np.all(np.abs(diag - 1.0) <= 1e-6)),
        "max_asymmetry": float(np.abs(S - np.swapaxes(S, -1, -2)).max()),
        "seq_len": args.seq_len,
    }
    s_path = d / "summary.json"
    s_path.write_text(json.dumps(summary, indent=2))
    man.outputs.append(str(s_path))
    man.write(d)
    for row in summary["heads"]:
        print(f"head {row['head']}: r={row['r']:.4f} nonzero={row['nonzero_fraction']:.3f}")
    return EXIT_OK


def _failing(report: dict) -> list[str]:
    if "checks" in report:
        return [k for k, v in report["checks"].items() if not v]
    return [report["suite"]]


def cmd_verify(args) -> int:
    names = V.suite_names(args.suite)
    d = _outdir(args.out) if args.out else None
    man = RunManifest("verify", _echo(args), args.seed)
    failed = []
    for name in names:
        rep = V.run_suite(name, seed=args.seed)
        status = "PASS" if rep["pass"] else "FAIL"
        print(f"[{status}] {name}")
        if not rep["pass"]:
            bad = _failing(rep)
            failed.append(name)
            print(f"  failing: {', '.join(bad)}", file=sys.stderr)
        if d is not None:
            man.outputs.append(str(V.write_report(rep, d)))
    if d is not None:
        man.write(d)
    return EXIT_OK if not failed else EXIT_FAIL


def _bench_config(args) -> B.BenchConfig:
    conf: dict = {}
    if args.config:
        try:
            conf = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"bad config file: {exc}") from exc
    flags = {"lens": args.lens, "trials": args.trials, "warmup": args.warmup, "batch": args.batch,
             "variants": args.variants, "k": args.k, "precision": args.precision,
             "D": args.dim, "H": args.heads}
    conf.update({k: v for k, v in flags.items() if v is not None})
    if args.extended:
        conf["lens"] = tuple(conf.get("lens", B.DEFAULT_LENS)) + B.EXTENDED_LENS
    if isinstance(conf.get("batch"), dict):
        conf["batch"] = {int(k): int(v) for k, v in conf["batch"].items()}
    conf["seed"] = args.seed
    try:
        return B.BenchConfig(**conf)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def cmd_bench(args) -> int:
    cfg = _bench_config(args)
    d = _outdir(args.out)

    def show(r):
        if r.skipped:
            print(f"warning: {r.variant} N={r.N} skipped (out of memory)", file=sys.stderr)
        else:
            print(f"{r.variant:<12} N={r.N:<5} B={r.B} mean={r.mean_ms:9.2f} ms "
                  f"peak={r.peak_elements:,}")

    records = B.run_bench(cfg, on_record=show)
    man = RunManifest("bench", {"flags": _echo(args), "resolved": cfg.to_dict()}, args.seed)
    man.config["precision"] = cfg.precision
    man.outputs.append(str(B.write_csv(records, d / "bench.csv")))
    man.outputs.append(str(B.write_records_json(records, d / "bench_records.json")))
    if len(cfg.lens) >= 3:
        fits = {v: {m: asdict(f) for m, f in fs.items()} for v, fs in B.fit_scaling(records).items()}
        p = d / "bench_scaling.json"
        p.write_text(json.dumps({"fits": fits, "memory_model": B.memory_model_check(records, cfg.H, cfg.k)},
                                indent=2))
        man.outputs.append(str(p))
    man.write(d)
    return EXIT_OK


def cmd_train_demo(args) -> int:
    d = _outdir(args.out)
    task = V.ToyTask(seed=args.seed)
    man = RunManifest("train-demo", _echo(args), args.seed)
    log_path = d / "train_log.csv"
    cols = ["step", "loss", "spearman_rho", "nonzero_fraction"]
    fh = log_path.open("w", newline="")
    writer = csv.writer(fh)
    writer.writerow(cols)
    man.outputs.append(str(log_path))

    def on_log(row):
        writer.writerow([row["step"]] + [repr(float(row[c])) for c in cols[1:]])
        fh.flush()
        print(f"step {row['step']:>5}  loss {row['loss']:.4f}  rho {row['spearman_rho']:+.4f}")

    try:
        res = V.toy_train(task, V.toy_config("osn"), steps=args.steps, lr=args.lr, seed=args.seed,
                          on_log=on_log)
        model, code = res.model, EXIT_OK
    except V.TrainingDiverged as exc:
        print(f"training diverged: {exc}; keeping the partial log", file=sys.stderr)
        model, code = exc.last_good, EXIT_FAIL
    finally:
        fh.close()
    bin_p, json_p = M.save_params(model.tensors, d / "checkpoint")
    man.outputs += [str(bin_p), str(json_p)]
    man.write(d)
    return code


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    def common(out=None):
        # a fresh parent per subcommand: argparse shares actions between children
        c = argparse.ArgumentParser(add_help=False)
        c.add_argument("--seed", type=int, default=42, help="64-bit seed (default 42)")
        c.add_argument("--out", default=out, help=f"output directory (default {out})")
        return c

    p = argparse.ArgumentParser(prog="syncattn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("params", parents=[common()], help="parameter counts")
    sp.add_argument("--dim", type=int, default=512)
    sp.add_argument("--heads", type=int, default=8)
    sp.add_argument("--ffn-mult", type=int, default=4)
    sp.set_defaults(func=cmd_params)

    sp = sub.add_parser("inspect", parents=[common("inspect_out")], help="dump synchronization matrices")
    sp.add_argument("--seq-len", type=int, default=128)
    sp.add_argument("--dim", type=int, default=512)
    sp.add_argument("--heads", type=int, default=8)
    sp.add_argument("--head", type=int, default=None, help="dump only this head")
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("verify", parents=[common()], help="run verification suites")
    sp.add_argument("--suite", default="all", choices=["all", *V.SUITES])
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("bench", parents=[common("bench_out")], help="latency and allocation benchmark")
    sp.add_argument("--config", help="JSON file with BenchConfig fields")
    sp.add_argument("--lens", type=int, nargs="+")
    sp.add_argument("--trials", type=int)
    sp.add_argument("--warmup", type=int)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--variants", nargs="+", choices=B.VARIANTS)
    sp.add_argument("--k", type=int)
    sp.add_argument("--dim", type=int)
    sp.add_argument("--heads", type=int)
    sp.add_argument("--precision", choices=["float32", "float64"])
    sp.add_argument("--extended", action="store_true", help="also run N=2048 and 4096")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("train-demo", parents=[common("train_out")], help="toy masked-reconstruction run")
    sp.add_argument("--steps", type=int, default=1000)
    sp.add_argument("--lr", type=float, default=1.0)
    sp.set_defaults(func=cmd_train_demo)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    env_threads = os.environ.get(THREAD_ENV)
    if env_threads is not None and not env_threads.isdigit():
        print(f"error: {THREAD_ENV} must be a positive integer", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
