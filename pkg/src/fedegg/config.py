"""Flat ``key=value`` run configuration: parsing, validation and snapshots.

Blank lines and anything after ``#`` are ignored. Every key must be known;
a typo is an error that names the key and line. ``format_config`` writes
every key, so its output replays the run exactly.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Callable, Dict, Tuple

from .engine import DataConfig, GuideSetConfig, ModelConfig, SimulationConfig
from .guidance import GuidanceConfig
from .numerics import PiecewiseSchedule
from .strategies import StrategyConfig

__all__ = ["ConfigError", "KEYS", "parse_config", "load_config", "format_config"]


class ConfigError(ValueError):
    def __init__(self, message: str, key: str = "", line: int = 0):
        where = f"line {line}: " if line else ""
        what = f"{key}: " if key else ""
        super().__init__(f"{where}{what}{message}")
        self.key = key
        self.line = line


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _int(text: str) -> int:
    return int(text)


def _float(text: str) -> float:
    v = float(text)
    if math.isnan(v):
        raise ValueError("NaN is not allowed")
    return v


def _opt(conv: Callable[[str], object], none_word: str):
    def parse(text: str):
        return None if text.lower() == none_word else conv(text)
    return parse


def _str(text: str) -> str:
    return text


# key -> (parser, default text)
KEYS: Dict[str, Tuple[Callable[[str], object], str]] = {
    "seed": (_int, "0"),
    "rounds": (_int, "300"),
    "clients.total": (_int, "100"),
    "clients.sampled": (_int, "20"),
    "strategy.kind": (_str, "fedavg"),
    "strategy.local_steps": (_int, "5"),
    "strategy.batch_size": (_int, "32"),
    "strategy.eta": (PiecewiseSchedule.parse, "1:0.01,100:0.001,200:0.0001"),
    "strategy.mu_prox": (_float, "0.0"),
    "partition.alpha": (_opt(_float, "iid"), "0.1"),
    "guidance.enabled": (_bool, "false"),
    "guidance.rho": (_float, "2.0"),
    "guidance.iota": (_float, "-0.5"),
    "guidance.log_base": (_float, "2.0"),
    "guidance.beta": (_float, "0.9"),
    "guidance.Tg": (_int, "1"),
    "guidance.batch_size": (_int, "64"),
    "guidance.gamma": (_opt(PiecewiseSchedule.parse, "eta"), "eta"),
    "guidance.cos_floor": (_float, "1e-06"),
    "guidance.loss_floor": (_float, "1e-12"),
    "guidance.tau": (_opt(_float, "auto"), "auto"),
    "guidance.mode": (_str, "LH"),
    "guidance.overlap": (_opt(_float, "auto"), "auto"),
    "guidance.size_per_class": (_opt(_int, "auto"), "auto"),
    "data.source": (_str, "synthetic"),
    "data.classes": (_int, "10"),
    "data.dim": (_int, "32"),
    "data.train_per_class": (_int, "500"),
    "data.test_per_class": (_int, "100"),
    "data.spread": (_float, "1.0"),
    "data.shift": (_float, "1.0"),
    "data.train_path": (_str, ""),
    "data.test_path": (_str, ""),
    "data.guide_path": (_str, ""),
    "model.kind": (_str, "logreg"),
    "model.hidden": (_int, "32"),
    "eval.every": (_int, "1"),
    "eval.tail_window": (_int, "50"),
    "run.workers": (_int, "1"),
    "run.record_wall_time": (_bool, "false"),
}


def _build(v: dict) -> SimulationConfig:
    guidance = None
    if v["guidance.enabled"]:
        guidance = GuidanceConfig(
            rho=v["guidance.rho"],
            iota=v["guidance.iota"],
            log_base=v["guidance.log_base"],
            beta=v["guidance.beta"],
            T_g=v["guidance.Tg"],
            batch_size=v["guidance.batch_size"],
            gamma_schedule=v["guidance.gamma"],
            cos_floor=v["guidance.cos_floor"],
            loss_floor=v["guidance.loss_floor"],
            tau_override=v["guidance.tau"],
        )
    return SimulationConfig(
        num_clients=v["clients.total"],
        sampled=v["clients.sampled"],
        rounds=v["rounds"],
        strategy=StrategyConfig(
            kind=v["strategy.kind"],
            local_steps=v["strategy.local_steps"],
            batch_size=v["strategy.batch_size"],
            eta_schedule=v["strategy.eta"],
            mu_prox=v["strategy.mu_prox"],
        ),
        guidance=guidance,
        guide_set=GuideSetConfig(
            mode=v["guidance.mode"],
            overlap=v["guidance.overlap"],
            size_per_class=v["guidance.size_per_class"],
        ),
        alpha=v["partition.alpha"],
        data=DataConfig(
            source=v["data.source"],
            classes=v["data.classes"],
            dim=v["data.dim"],
            train_per_class=v["data.train_per_class"],
            test_per_class=v["data.test_per_class"],
            spread=v["data.spread"],
            shift=v["data.shift"],
            train_path=v["data.train_path"],
            test_path=v["data.test_path"],
            guide_path=v["data.guide_path"],
        ),
        model=ModelConfig(kind=v["model.kind"], hidden=v["model.hidden"]),
        seed=v["seed"],
        eval_every=v["eval.every"],
        tail_window=v["eval.tail_window"],
        workers=v["run.workers"],
        record_wall_time=v["run.record_wall_time"],
    )


def parse_config(text: str) -> SimulationConfig:
    values = {k: parse(default) for k, (parse, default) in KEYS.items()}
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected key=value", line=lineno)
        key, _, val = (s.strip() for s in line.partition("="))
        if key not in KEYS:
            raise ConfigError("unknown key", key, lineno)
        if key in seen:
            raise ConfigError(f"duplicate key (first set on line {seen[key]})", key, lineno)
        seen[key] = lineno
        try:
            values[key] = KEYS[key][0](val)
        except ValueError as exc:
            raise ConfigError(f"bad value {val!r} ({exc})", key, lineno) from None
    try:
        return _build(values)
    except ValueError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None


def load_config(path) -> SimulationConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_config(cfg: SimulationConfig) -> str:
    """Every key with its resolved value; ``parse_config`` of this gives ``cfg`` back."""
    g = cfg.guidance or GuidanceConfig()
    s, d, gs = cfg.strategy, cfg.data, cfg.guide_set
    rows = [
        ("seed", cfg.seed),
        ("rounds", cfg.rounds),
        ("clients.total", cfg.num_clients),
        ("clients.sampled", cfg.sampled),
        ("strategy.kind", s.kind),
        ("strategy.local_steps", s.local_steps),
        ("strategy.batch_size", s.batch_size),
        ("strategy.eta", s.eta_schedule),
        ("strategy.mu_prox", float(s.mu_prox)),
        ("partition.alpha", "iid" if cfg.alpha is None else float(cfg.alpha)),
        ("guidance.enabled", cfg.guidance is not None),
        ("guidance.rho", float(g.rho)),
        ("guidance.iota", float(g.iota)),
        ("guidance.log_base", float(g.log_base)),
        ("guidance.beta", float(g.beta)),
        ("guidance.Tg", g.T_g),
        ("guidance.batch_size", g.batch_size),
        ("guidance.gamma", "eta" if g.gamma_schedule is None else g.gamma_schedule),
        ("guidance.cos_floor", float(g.cos_floor)),
        ("guidance.loss_floor", float(g.loss_floor)),
        ("guidance.tau", "auto" if g.tau_override is None else float(g.tau_override)),
        ("guidance.mode", gs.mode),
        ("guidance.overlap", "auto" if gs.overlap is None else float(gs.overlap)),
        ("guidance.size_per_class", "auto" if gs.size_per_class is None else gs.size_per_class),
        ("data.source", d.source),
        ("data.classes", d.classes),
        ("data.dim", d.dim),
        ("data.train_per_class", d.train_per_class),
        ("data.test_per_class", d.test_per_class),
        ("data.spread", float(d.spread)),
        ("data.shift", float(d.shift)),
        ("data.train_path", d.train_path),
        ("data.test_path", d.test_path),
        ("data.guide_path", d.guide_path),
        ("model.kind", cfg.model.kind),
        ("model.hidden", cfg.model.hidden),
        ("eval.every", cfg.eval_every),
        ("eval.tail_window", cfg.tail_window),
        ("run.workers", cfg.workers),
        ("run.record_wall_time", cfg.record_wall_time),
    ]
    return "".join(f"{k}={_fmt(v)}\n" for k, v in rows)
