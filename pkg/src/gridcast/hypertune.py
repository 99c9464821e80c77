"""HyperBand search with training epochs as the budget."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError, NonFiniteError, SearchError, TrainingError
from .models import BIAS_KINDS, TRConfig, init_params
from .training import TrainConfig, train

TRACE_COLUMNS = [
    "trial_id", "bracket", "rung", "budget_epochs", "lr", "n_layers", "hidden_channels",
    "kernel_size", "history", "bias_combination", "val_mse", "status",
]


def format_biases(biases) -> str:
    return "+".join(b for b in BIAS_KINDS if b in biases) or "none"


def parse_biases(text: str) -> tuple:
    text = text.strip()
    if text in ("", "none"):
        return ()
    parts = tuple(p.strip() for p in text.split("+"))
    bad = [p for p in parts if p not in BIAS_KINDS]
    if bad:
        raise ConfigurationError(f"unknown bias tables {bad}; use {'+'.join(BIAS_KINDS)} or none")
    return tuple(b for b in BIAS_KINDS if b in parts)


@dataclass(frozen=True)
class SearchSpace:
    learning_rate: tuple = (1e-4, 1e-1)
    n_layers: tuple = (1, 2, 3)
    hidden_channels: tuple = (8, 16, 32)
    kernel_size: tuple = (1, 3)
    history: tuple = (2, 4, 6)
    bias_combination: tuple = (("LxH", "WxH", "M"), ("LxH",), ("WxH", "M"), ())

    def validate(self):
        lo, hi = self.learning_rate
        if not 0 < lo <= hi:
            raise ConfigurationError(f"learning-rate range {self.learning_rate} must be positive")
        for name in ("n_layers", "hidden_channels", "kernel_size", "history", "bias_combination"):
            if not getattr(self, name):
                raise ConfigurationError(f"search set {name} is empty")


@dataclass(frozen=True)
class TrialConfig:
    lr: float
    n_layers: int
    hidden_channels: int
    kernel_size: int
    history: int
    biases: tuple

    def tr_config(self, channels):
        return TRConfig(self.n_layers, self.hidden_channels, self.history, "elu",
                        self.kernel_size, channels)


def sample_config(space: SearchSpace, rng) -> TrialConfig:
    space.validate()
    lo, hi = space.learning_rate
    lr = float(math.exp(rng.uniform(math.log(lo), math.log(hi)))) if lo < hi else float(lo)
    pick = lambda options: options[int(rng.integers(len(options)))]
    return TrialConfig(
        lr=lr,
        n_layers=int(pick(space.n_layers)),
        hidden_channels=int(pick(space.hidden_channels)),
        kernel_size=int(pick(space.kernel_size)),
        history=int(pick(space.history)),
        biases=tuple(pick(space.bias_combination)),
    )


@dataclass(frozen=True)
class Bracket:
    s: int
    rungs: tuple  # ((n_configs, budget), ...)

    @property
    def n_trials(self):
        return sum(n for n, _ in self.rungs)

    @property
    def epochs(self):
        return sum(n * r for n, r in self.rungs)


def hyperband_schedule(R: int, eta: int = 3) -> list[Bracket]:
    """Brackets s = s_max..0 with successive-halving rungs.

    Bracket s starts n = ceil((s_max+1)/(s+1) * eta^s) configs at budget
    R * eta^-s; rung i keeps floor(n / eta^i) of them at budget R * eta^(i-s).
    Budgets are rounded to whole epochs (at least one).
    """
    if R < 1 or eta < 2 or int(R) != R or int(eta) != eta:
        raise ConfigurationError(f"HyperBand needs integer R >= 1 and eta >= 2, got R={R}, eta={eta}")
    s_max = 0
    while eta ** (s_max + 1) <= R:
        s_max += 1
    brackets = []
    for s in range(s_max, -1, -1):
        n = -(-((s_max + 1) * eta**s) // (s + 1))
        rungs = []
        for i in range(s + 1):
            n_i = n // eta**i
            r_i = max(1, round(R * eta ** (i - s)))
            rungs.append((n_i, r_i))
        brackets.append(Bracket(s, tuple(rungs)))
    return brackets


@dataclass
class TrialRecord:
    trial_id: int
    bracket: int
    rung: int
    budget: int
    config: TrialConfig
    val_mse: float
    status: str
    seed: int

    def row(self):
        c = self.config
        return [self.trial_id, self.bracket, self.rung, self.budget, repr(c.lr), c.n_layers,
                c.hidden_channels, c.kernel_size, c.history, format_biases(c.biases),
                repr(self.val_mse), self.status]


def trial_seed(master_seed: int, trial_id: int) -> int:
    return int(np.random.SeedSequence([master_seed, trial_id]).generate_state(1)[0])


def _score(evaluator, config, budget, seed):
    try:
        loss = float(evaluator(config, budget, seed))
    except (TrainingError, NonFiniteError, FloatingPointError):
        return math.inf, "diverged"
    if not math.isfinite(loss):
        return math.inf, "diverged"
    return loss, "ok"


def successive_halving(configs, rungs, evaluator, master_seed=0, bracket=0, first_id=0,
                       threads=1) -> list[TrialRecord]:
    """Run one bracket; ``configs`` are indexed by trial id from ``first_id``."""
    alive = [(first_id + k, c) for k, c in enumerate(configs)]
    records = []
    for rung, (n_keep, budget) in enumerate(rungs):
        alive = alive[:n_keep] if rung == 0 else alive

        def run(item):
            tid, cfg = item
            seed = trial_seed(master_seed, tid)
            return TrialRecord(tid, bracket, rung, budget, cfg, *_score(evaluator, cfg, budget, seed), seed)

        if threads > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(threads) as pool:
                done = list(pool.map(run, alive))
        else:
            done = [run(a) for a in alive]
        records.extend(done)
        if rung + 1 < len(rungs):
            ranked = sorted(done, key=lambda r: (r.val_mse, r.trial_id))
            keep = [r for r in ranked[:rungs[rung + 1][0]] if r.status == "ok"]
            alive = [(r.trial_id, r.config) for r in keep]
            if not alive:
                break
    return records


def run_search(space: SearchSpace, evaluator, R=27, eta=3, seed=0, threads=1, sampler=None):
    """Execute every HyperBand bracket; returns (best record, trace)."""
    space.validate()
    sampler = sampler or (lambda tid: sample_config(
        space, np.random.default_rng(np.random.SeedSequence([seed, tid, 1]))))
    trace = []
    next_id = 0
    for b in hyperband_schedule(R, eta):
        n0 = b.rungs[0][0]
        configs = [sampler(next_id + k) for k in range(n0)]
        trace.extend(successive_halving(configs, b.rungs, evaluator, seed, b.s, next_id, threads))
        next_id += n0
    ok = [r for r in trace if r.status == "ok"]
    if not ok:
        raise SearchError("every trial diverged")
    best = min(ok, key=lambda r: (r.val_mse, r.trial_id))
    return best, trace


def trace_csv(trace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for r in trace:
        w.writerow(r.row())
    return buf.getvalue()


def training_evaluator(dataset, train_days, val_days, slots, base: TrainConfig = TrainConfig(),
                       n_hour_bins=12):
    """Evaluator that trains from scratch for ``budget`` epochs and reports the best val MSE."""

    def evaluate(config: TrialConfig, budget: int, seed: int) -> float:
        params = init_params(config.tr_config(dataset.channels), seed, dataset.grid,
                             config.biases, n_hour_bins)
        run = TrainConfig(**{**asdict(base), "learning_rate": config.lr, "max_epochs": budget,
                             "seed": seed})
        _, log = train(params, dataset, train_days, val_days, run, slots)
        return min(log.val_mse)

    return evaluate
