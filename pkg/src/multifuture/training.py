"""Losses, the adaptive optimizer, and the training driver.

The belief head trains with per-step cross entropy against the true future
cell; the offset head trains with smooth-L1 against the per-cell deltas to
the true location, imposed at every cell. Multi-scale runs sum both terms
per scale. The combined objective adds an L2 penalty over all trainable
parameters. Feedback during training is always the predicted soft belief.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import nn_core as nn
from .autodiff import Var
from .errors import ConfigError, TrainingDivergenceError
from .gridworld import GridSpec, offset_targets, quantize_trajectory
from .model import Forecaster, ModelConfig, ScaleRollout
from .scenegen import Scenario, ScenarioSet

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    lambda1: float = 0.1
    lambda2: float = 0.001
    lr: float = 0.3
    rho: float = 0.95
    eps: float = 1e-6
    epochs: int = 100
    batch_size: int = 1
    seed: int = 0
    optimizer: str = "adadelta"  # or "sgd"
    early_stop_patience: Optional[int] = None
    early_stop_min_delta: float = 1e-5

    def __post_init__(self):
        if self.lambda1 <= 0 or self.lr <= 0:
            raise ConfigError("lambda1 and lr must be positive")
        if self.lambda2 < 0:
            raise ConfigError("lambda2 must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.optimizer not in ("adadelta", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class LossBreakdown:
    l_cls: float
    l_reg: float
    l_wd: float
    lambda1: float
    lambda2: float

    @property
    def total(self) -> float:
        return self.l_cls + self.lambda1 * self.l_reg + self.lambda2 * self.l_wd


# ---------------------------------------------------------------------------
# Loss terms


def loss_cls(beliefs: Sequence[Var], gt_cells: Sequence[int]) -> Var:
    """Mean over timesteps of -log belief at the true cell (floored)."""
    if len(beliefs) != len(gt_cells):
        raise ValueError(
            f"{len(beliefs)} predicted steps vs {len(gt_cells)} target cells"
        )
    total = None
    for belief, idx in zip(beliefs, gt_cells):
        flat = ad.reshape(belief, (belief.data.size,))
        picked = ad.clamp_min(flat[int(idx) : int(idx) + 1], PROB_FLOOR)
        term = -ad.vsum(ad.log(picked))
        total = term if total is None else total + term
    return ad.mul(total, 1.0 / len(gt_cells))


def loss_reg(offset_fields: Sequence[Var], targets: Sequence[np.ndarray]) -> Var:
    """Smooth-L1 between predicted and target offsets, at every cell.

    Per cell the two coordinate errors are summed; the result is averaged
    over cells and timesteps.
    """
    if len(offset_fields) != len(targets):
        raise ValueError(
            f"{len(offset_fields)} predicted steps vs {len(targets)} target fields"
        )
    total = None
    cells = offset_fields[0].data.shape[0] * offset_fields[0].data.shape[1]
    for pred, tgt in zip(offset_fields, targets):
        if pred.data.shape != tgt.shape:
            raise ValueError(f"offset shape mismatch: {pred.data.shape} vs {tgt.shape}")
        term = ad.vsum(ad.smooth_l1(ad.sub(pred, np.asarray(tgt, dtype=pred.dtype))))
        total = term if total is None else total + term
    return ad.mul(total, 1.0 / (len(targets) * cells))


def weight_decay_term(tape: nn.ParamTape) -> Var:
    """Sum of squares of every trainable parameter, through the tape."""
    total = None
    for name in tape.store.trainable_names():
        v = tape.var(name)
        term = ad.vsum(ad.mul(v, v))
        total = term if total is None else total + term
    if total is None:
        return Var(np.zeros((), dtype=tape.store.dtype))
    return total


@dataclass
class ScaleTargets:
    cells: List[int]
    offsets: Optional[List[np.ndarray]]


def build_targets(
    model: Forecaster, scenario: Scenario, future: Sequence[Tuple[float, float]],
    strict_bounds: bool = False,
) -> Dict[str, ScaleTargets]:
    out = {}
    for scale in model.config.scales:
        grid = model.scale_grid(scenario, scale)
        cells = quantize_trajectory(grid, future, clamp=not strict_bounds)
        offs = None
        if model.config.use_fine_decoder:
            offs = [offset_targets(grid, p) for p in future]
        out[scale] = ScaleTargets(cells, offs)
    return out


def total_loss(
    rollouts: Dict[str, ScaleRollout],
    targets: Dict[str, ScaleTargets],
    tape: nn.ParamTape,
    cfg: TrainConfig,
) -> Tuple[Var, LossBreakdown]:
    """Combined objective; multi-scale sums the per-scale data terms."""
    cls_total = None
    reg_total = None
    for scale, roll in rollouts.items():
        tgt = targets[scale]
        c = loss_cls(roll.beliefs, tgt.cells)
        cls_total = c if cls_total is None else cls_total + c
        if roll.offsets is not None:
            r = loss_reg(roll.offsets, tgt.offsets)
            reg_total = r if reg_total is None else reg_total + r
    wd = weight_decay_term(tape)
    loss = cls_total + ad.mul(wd, cfg.lambda2)
    if reg_total is not None:
        loss = loss + ad.mul(reg_total, cfg.lambda1)
    breakdown = LossBreakdown(
        l_cls=float(cls_total.data),
        l_reg=float(reg_total.data) if reg_total is not None else 0.0,
        l_wd=float(wd.data),
        lambda1=cfg.lambda1,
        lambda2=cfg.lambda2,
    )
    return loss, breakdown


# ---------------------------------------------------------------------------
# Optimizers


class Adadelta:
    """Adaptive per-parameter updates from running squared-gradient and
    squared-update averages; the learning rate scales the proposed step."""

    def __init__(self, store: nn.ParameterStore, lr=0.3, rho=0.95, eps=1e-6):
        self.store = store
        self.lr = lr
        self.rho = rho
        self.eps = eps
        self.acc_grad: Dict[str, np.ndarray] = {
            n: np.zeros_like(store[n].data) for n in store.trainable_names()
        }
        self.acc_upd: Dict[str, np.ndarray] = {
            n: np.zeros_like(store[n].data) for n in store.trainable_names()
        }

    def step(self, grads: Dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            p = self.store[name]
            if not p.trainable:
                continue
            eg = self.acc_grad[name]
            eu = self.acc_upd[name]
            eg *= self.rho
            eg += (1 - self.rho) * g * g
            delta = -np.sqrt((eu + self.eps) / (eg + self.eps)) * g
            eu *= self.rho
            eu += (1 - self.rho) * delta * delta
            p.data = p.data + self.lr * delta.astype(p.data.dtype)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        out = {}
        for n, a in self.acc_grad.items():
            out[f"opt.acc_grad.{n}"] = a
        for n, a in self.acc_upd.items():
            out[f"opt.acc_upd.{n}"] = a
        return out

    def load_state(self, arrays: Dict[str, np.ndarray]) -> None:
        for n in self.acc_grad:
            self.acc_grad[n] = np.asarray(
                arrays[f"opt.acc_grad.{n}"], dtype=self.acc_grad[n].dtype
            )
            self.acc_upd[n] = np.asarray(
                arrays[f"opt.acc_upd.{n}"], dtype=self.acc_upd[n].dtype
            )


class Sgd:
    """Plain gradient descent, for configs that swap the update rule."""

    def __init__(self, store: nn.ParameterStore, lr=0.3, **_):
        self.store = store
        self.lr = lr

    def step(self, grads: Dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            p = self.store[name]
            if p.trainable:
                p.data = p.data - self.lr * g.astype(p.data.dtype)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {}

    def load_state(self, arrays: Dict[str, np.ndarray]) -> None:
        pass


def make_optimizer(cfg: TrainConfig, store: nn.ParameterStore):
    if cfg.optimizer == "adadelta":
        return Adadelta(store, lr=cfg.lr, rho=cfg.rho, eps=cfg.eps)
    return Sgd(store, lr=cfg.lr)


# ---------------------------------------------------------------------------
# Training driver


@dataclass
class TrainResult:
    model: Forecaster
    history: List[LossBreakdown]
    optimizer_state: Dict[str, np.ndarray]
    epochs_run: int
    stopped_early: bool = False


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7919, epoch]))
    return rng.permutation(n)


def train(
    scenario_set: ScenarioSet,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    on_epoch=None,
    resume_values: Optional[Dict[str, np.ndarray]] = None,
    resume_opt_state: Optional[Dict[str, np.ndarray]] = None,
    start_epoch: int = 0,
    strict_bounds: bool = False,
) -> TrainResult:
    """Fit a model to every (scenario, future) pair in the set.

    Deterministic given the seed: parameter init, sample order, and updates
    all derive from it. Raises TrainingDivergenceError when the loss stops
    being finite.
    """
    if len(scenario_set.scenarios) == 0:
        raise ConfigError("training set is empty")
    model = Forecaster(model_cfg, seed=train_cfg.seed)
    if resume_values is not None:
        for name, value in resume_values.items():
            model.store.set_value(name, value)
    optimizer = make_optimizer(train_cfg, model.store)
    if resume_opt_state:
        optimizer.load_state(resume_opt_state)

    samples = [
        (si, ji)
        for si, s in enumerate(scenario_set.scenarios)
        for ji in range(s.n_futures)
    ]
    history: List[LossBreakdown] = []
    last_finite: Optional[float] = None
    best = math.inf
    since_best = 0
    stopped = False

    for epoch in range(start_epoch, start_epoch + train_cfg.epochs):
        order = _epoch_order(train_cfg.seed, epoch, len(samples))
        acc: Dict[str, np.ndarray] = {}
        acc_count = 0
        epoch_losses: List[LossBreakdown] = []
        for pos, sample_idx in enumerate(order):
            si, ji = samples[sample_idx]
            scenario = scenario_set.scenarios[si]
            future = scenario.futures[ji]
            tape = nn.ParamTape(model.store)
            rollouts = model.rollout(
                scenario, steps=len(future), tape=tape, strict_bounds=strict_bounds
            )
            targets = build_targets(model, scenario, future, strict_bounds)
            loss, breakdown = total_loss(rollouts, targets, tape, train_cfg)
            if not math.isfinite(breakdown.total):
                raise TrainingDivergenceError(epoch, last_finite)
            last_finite = breakdown.total
            epoch_losses.append(breakdown)
            ad.backward(loss)
            for name, g in tape.grads().items():
                if name in acc:
                    acc[name] += g
                else:
                    acc[name] = g.copy()
            acc_count += 1
            if acc_count == train_cfg.batch_size or pos == len(order) - 1:
                optimizer.step({n: g / acc_count for n, g in acc.items()})
                acc = {}
                acc_count = 0
        mean = LossBreakdown(
            l_cls=float(np.mean([b.l_cls for b in epoch_losses])),
            l_reg=float(np.mean([b.l_reg for b in epoch_losses])),
            l_wd=float(np.mean([b.l_wd for b in epoch_losses])),
            lambda1=train_cfg.lambda1,
            lambda2=train_cfg.lambda2,
        )
        history.append(mean)
        if on_epoch is not None:
            on_epoch(epoch, mean)
        if train_cfg.early_stop_patience is not None:
            if mean.total < best - train_cfg.early_stop_min_delta:
                best = mean.total
                since_best = 0
            else:
                since_best += 1
                if since_best >= train_cfg.early_stop_patience:
                    stopped = True
                    break

    return TrainResult(
        model=model,
        history=history,
        optimizer_state=optimizer.state_arrays(),
        epochs_run=start_epoch + len(history),
        stopped_early=stopped,
    )


def write_loss_csv(history: Iterable[LossBreakdown], path: str, start_epoch: int = 0) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "l_cls", "l_reg", "l_wd", "total"])
        for i, b in enumerate(history, start=start_epoch):
            writer.writerow([i, repr(b.l_cls), repr(b.l_reg), repr(b.l_wd), repr(b.total)])
