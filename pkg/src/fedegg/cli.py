"""Command-line entry point: single runs, ablation sweeps, theory checks and partition statistics."""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .config import ConfigError, format_config, load_config
from .data import dirichlet_partition, iid_partition, max_class_share
from .engine import (
    SimulationConfig,
    metrics_to_csv,
    run_offline_pretrain,
    run_simulation,
    tail_score,
)
from .numerics import derive_stream
from .theory import THEORY_COLUMNS, verify_instances, verify_running_example

__all__ = ["main", "build_parser"]


class UsageError(Exception):
    pass


def _floats(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _alphas(text: str) -> List[Optional[float]]:
    out = []
    for x in text.split(","):
        x = x.strip()
        if not x:
            continue
        if x.lower() == "iid":
            out.append(None)
            continue
        try:
            out.append(float(x))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected numbers or 'iid', got {x!r}") from None
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedegg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="key=value run configuration")
        p.add_argument("--out", required=True, help="output directory (created if absent)")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--workers", type=int, help="worker threads for client updates")
        p.add_argument("--force", action="store_true", help="overwrite existing output files")

    common(sub.add_parser("run", help="one simulation"))
    p = sub.add_parser("sweep-tau", help="one guided run per gate threshold")
    common(p)
    p.add_argument("--taus", type=_floats, required=True)
    p = sub.add_parser("sweep-alpha", help="one run per Dirichlet concentration ('iid' allowed)")
    common(p)
    p.add_argument("--alphas", type=_alphas, required=True)
    p = sub.add_parser("sweep-participation", help="one run per sampled fraction of clients")
    common(p)
    p.add_argument("--rates", type=_floats, required=True)
    p = sub.add_parser("offline-vs-online", help="guided run against pretrain-then-plain run")
    common(p)
    p.add_argument("--pretrain-steps", type=int, required=True)
    p = sub.add_parser("verify-theory", help="check the one-step bound on random quadratic instances")
    common(p, config=False)
    p.add_argument("--trials", type=int, default=100_000, help="Monte Carlo trials for the noisy checks")
    p.add_argument("--instances", type=int, default=1000, help="noiseless random instances")
    p = sub.add_parser("partition-stats", help="per-client label histograms of a Dirichlet split")
    common(p, config=False)
    p.add_argument("--alpha", type=_alphas, required=True, help="concentration, or 'iid'")
    p.add_argument("--clients", type=int, required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--per-class", type=int, default=500)
    return parser


class _Output:
    """Collects files for one command; refuses to clobber unless forced."""

    def __init__(self, out: str, force: bool):
        self.dir = Path(out)
        self.force = force

    def check(self, names: Iterable[str]) -> None:
        if self.dir.exists() and not self.dir.is_dir():
            raise UsageError(f"{self.dir} exists and is not a directory")
        if not self.force:
            clash = [n for n in names if (self.dir / n).exists()]
            if clash:
                raise UsageError(f"refusing to overwrite {', '.join(clash)} in {self.dir} (use --force)")
        self.dir.mkdir(parents=True, exist_ok=True)

    def write(self, name: str, text: str) -> None:
        with open(self.dir / name, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def _table(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(_cell(v) for v in r))
    return "\n".join(lines) + "\n"


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _label(v) -> str:
    return "iid" if v is None else repr(float(v))


def _load(args) -> SimulationConfig:
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.workers is not None:
        changes["workers"] = args.workers
    return cfg.replace(**changes) if changes else cfg


def _snapshot(cfg: SimulationConfig, note: str = "") -> str:
    head = "".join(f"# {line}\n" for line in note.splitlines())
    return head + format_config(cfg)


def _summary_row(metrics, cfg: SimulationConfig):
    w = cfg.tail_window
    return [tail_score(metrics, w, "test_acc"), tail_score(metrics, w, "mean_local_loss")]


def _cmd_run(args) -> int:
    cfg = _load(args)
    out = _Output(args.out, args.force)
    out.check(["metrics.csv", "resolved_config.txt"])
    out.write("resolved_config.txt", _snapshot(cfg))
    metrics = run_simulation(cfg)
    out.write("metrics.csv", metrics_to_csv(metrics))
    return 0


def _sweep(args, name: str, values, make_cfg, note: str) -> int:
    base = _load(args)
    cfgs = [make_cfg(base, v) for v in values]
    files = [f"metrics_{name}_{_label(v)}.csv" for v in values]
    out = _Output(args.out, args.force)
    out.check(files + ["summary.csv", "resolved_config.txt"])
    out.write("resolved_config.txt", _snapshot(base, note))
    rows = []
    for v, cfg, fname in zip(values, cfgs, files):
        metrics = run_simulation(cfg)
        out.write(fname, metrics_to_csv(metrics))
        rows.append([_label(v), cfg.sampled, *_summary_row(metrics, cfg)])
    out.write("summary.csv", _table([name, "sampled", "tail_test_acc", "tail_train_loss"], rows))
    return 0


def _cmd_sweep_tau(args) -> int:
    def make(cfg, tau):
        g = cfg.guidance
        if g is None:
            raise UsageError("sweep-tau needs guidance.enabled=true in the config")
        return cfg.replace(guidance=dataclasses.replace(g, tau_override=tau))

    note = "sweep-tau: guidance.tau=" + ",".join(_label(t) for t in args.taus)
    return _sweep(args, "tau", args.taus, make, note)


def _cmd_sweep_alpha(args) -> int:
    note = "sweep-alpha: partition.alpha=" + ",".join(_label(a) for a in args.alphas)
    return _sweep(args, "alpha", args.alphas, lambda cfg, a: cfg.replace(alpha=a), note)


def _cmd_sweep_participation(args) -> int:
    for r in args.rates:
        if not 0.0 < r <= 1.0:
            raise UsageError(f"participation rate {r} outside (0, 1]")

    def make(cfg, r):
        return cfg.replace(sampled=max(1, min(cfg.num_clients, int(round(r * cfg.num_clients)))))

    note = "sweep-participation: clients.sampled=round(rate*clients.total) for rate in " + ",".join(
        _label(r) for r in args.rates
    )
    return _sweep(args, "rate", args.rates, make, note)


def _cmd_offline_vs_online(args) -> int:
    cfg = _load(args)
    if cfg.guidance is None:
        raise UsageError("offline-vs-online needs guidance.enabled=true in the config")
    if args.pretrain_steps < 0:
        raise UsageError("--pretrain-steps must be nonnegative")
    out = _Output(args.out, args.force)
    out.check(["online.csv", "offline.csv", "summary.csv", "resolved_config.txt"])
    out.write("resolved_config.txt", _snapshot(cfg, f"offline-vs-online: pretrain_steps={args.pretrain_steps}"))
    online = run_simulation(cfg)
    out.write("online.csv", metrics_to_csv(online))
    offline = run_offline_pretrain(cfg, args.pretrain_steps)
    out.write("offline.csv", metrics_to_csv(offline))
    rows = [["online", *_summary_row(online, cfg)], ["offline", *_summary_row(offline, cfg)]]
    out.write("summary.csv", _table(["variant", "tail_test_acc", "tail_train_loss"], rows))
    return 0


def _cmd_verify_theory(args) -> int:
    if args.trials < 2 or args.instances < 0:
        raise UsageError("need --trials >= 2 and --instances >= 0")
    seed = 0 if args.seed is None else args.seed
    out = _Output(args.out, args.force)
    out.check(["theory.csv", "summary.txt", "resolved_config.txt"])
    out.write(
        "resolved_config.txt",
        f"command=verify-theory\nseed={seed}\ninstances={args.instances}\ntrials={args.trials}\n"
        "dims=1,2,10\nsigma_g_running=0.5,1.0\natol=1e-09\n",
    )
    rows = verify_instances(args.instances, seed) + verify_running_example((0.5, 1.0), args.trials, seed)
    out.write("theory.csv", _table(THEORY_COLUMNS, ([r[c] for c in THEORY_COLUMNS] for r in rows)))
    failed = [r for r in rows if not r["holds"]]
    summary = f"checked={len(rows)} held={len(rows) - len(failed)} violated={len(failed)}\n"
    summary += "".join(f"violation instance={r['instance_id']}\n" for r in failed)
    summary += "PASS\n" if not failed else "FAIL\n"
    out.write("summary.txt", summary)
    print(summary, end="")
    return 0 if not failed else 1


def _cmd_partition_stats(args) -> int:
    if len(args.alpha) != 1:
        raise UsageError("--alpha takes a single value")
    alpha = args.alpha[0]
    if args.clients < 1 or args.classes < 1 or args.per_class < 1:
        raise UsageError("--clients, --classes and --per-class must be positive")
    seed = 0 if args.seed is None else args.seed
    out = _Output(args.out, args.force)
    out.check(["partition.csv", "resolved_config.txt"])
    out.write(
        "resolved_config.txt",
        f"command=partition-stats\nseed={seed}\nalpha={_label(alpha)}\nclients={args.clients}\n"
        f"classes={args.classes}\nper_class={args.per_class}\n",
    )
    labels = np.repeat(np.arange(args.classes), args.per_class)
    rng = derive_stream(seed, "partition")
    if alpha is None:
        part = iid_partition(labels, args.clients, rng)
    else:
        part = dirichlet_partition(labels, args.clients, alpha, rng)
    shares = max_class_share(labels, part)
    rows = []
    for k, idx in enumerate(part.client_indices):
        hist = np.bincount(labels[np.asarray(idx, dtype=np.int64)], minlength=args.classes)
        rows.append([k, len(idx), float(shares[k]), *hist.tolist()])
    header = ["client", "size", "max_class_share"] + [f"class_{c}" for c in range(args.classes)]
    out.write("partition.csv", _table(header, rows))
    return 0


COMMANDS = {
    "run": _cmd_run,
    "sweep-tau": _cmd_sweep_tau,
    "sweep-alpha": _cmd_sweep_alpha,
    "sweep-participation": _cmd_sweep_participation,
    "offline-vs-online": _cmd_offline_vs_online,
    "verify-theory": _cmd_verify_theory,
    "partition-stats": _cmd_partition_stats,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError, ValueError, OSError) as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
