"""Single-future greedy decoding and diverse beam search.

Both decoders run with hard feedback here: each hypothesis re-rolls the
belief decoder conditioned on its own chosen cells (one-hot feedback), so
sibling hypotheses see beliefs consistent with their prefixes. Diversity
uses an intra-parent rank penalty: when a parent's expansions are ordered
by transition probability, the r-th best candidate is docked gamma0 * r
during selection. Selection ranks by the penalized accumulated score;
the returned ranking uses pure accumulated log-probability.

With gamma0 = 0 the search is exact top-K over whole sequences, and with
K = 1 it degenerates to greedy search.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import ShapeError
from .gridworld import GridSpec, cell_center
from .model import FINE_SCALE, EncoderState, Forecaster
from .scenegen import Scenario


class BeliefProcess(Protocol):
    """Sequential belief provider driven by hard cell feedback."""

    @property
    def n_cells(self) -> int: ...

    def initial_state(self): ...

    def step(self, state, prev_cell: int) -> Tuple[object, np.ndarray]:
        """Advance one step given the previously chosen cell; returns the
        new state and a flat probability vector over cells."""
        ...


class ModelBeliefProcess:
    """Belief decoder of a trained model on one scenario's fine grid."""

    def __init__(self, model: Forecaster, scenario: Scenario,
                 enc: Optional[EncoderState] = None, scale: str = FINE_SCALE):
        self.model = model
        self.scenario = scenario
        self.scale = scale
        self.grid = model.scale_grid(scenario, scale)
        with ad.no_grad():
            if enc is None:
                enc = model.encode_history(scenario)
            h, c, s_bar, _ = model._scale_init(scenario, scale, enc)
        self._init = (h, c)
        self._s_bar = s_bar

    @property
    def n_cells(self) -> int:
        return self.grid.n_cells

    def initial_state(self):
        return self._init

    def step(self, state, prev_cell: int):
        h, c = state
        onehot = np.zeros((self.grid.rows, self.grid.cols), dtype=self.model.store.dtype)
        onehot[prev_cell // self.grid.cols, prev_cell % self.grid.cols] = 1.0
        with ad.no_grad():
            h, c, belief = self.model.coarse_step(
                self.scale, h, c, Var(onehot), self._s_bar
            )
        return (h, c), belief.data.reshape(-1)


class FixedBeliefProcess:
    """Per-step beliefs independent of feedback; handy for exact oracles."""

    def __init__(self, step_probs: Sequence[np.ndarray]):
        self._probs = [np.asarray(p, dtype=np.float64).reshape(-1) for p in step_probs]

    @property
    def n_cells(self) -> int:
        return self._probs[0].size

    def initial_state(self):
        return 0

    def step(self, state, prev_cell: int):
        return state + 1, self._probs[state]


@dataclass
class Beam:
    cells: Tuple[int, ...]
    log_prob: float  # sum of log transition probabilities, no penalties
    score: float  # accumulated selection score including penalties
    rank: int = 0


def _log_probs(probs: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(probs)


def greedy_decode(process: BeliefProcess, start_cell: int, steps: int
                  ) -> Tuple[List[int], float, List[np.ndarray]]:
    """Argmax cell per step (ties to the lowest index), hard feedback."""
    state = process.initial_state()
    prev = start_cell
    cells: List[int] = []
    beliefs: List[np.ndarray] = []
    logp = 0.0
    for _ in range(steps):
        state, probs = process.step(state, prev)
        idx = int(np.argmax(probs))
        logp += float(_log_probs(probs)[idx])
        cells.append(idx)
        beliefs.append(probs)
        prev = idx
    return cells, logp, beliefs


def diverse_beam_search(
    process: BeliefProcess,
    start_cell: int,
    k: int,
    gamma0: float,
    steps: int,
) -> List[Beam]:
    """Top-K sequence search with an intra-parent rank diversity penalty."""
    if k < 1 or steps < 1:
        raise ValueError("k and steps must be >= 1")
    if gamma0 < 0:
        raise ValueError("gamma0 must be >= 0")
    n = process.n_cells
    if float(k) > float(n) ** steps:
        raise ValueError(
            f"cannot produce {k} distinct sequences from {n} cells over {steps} steps"
        )

    @dataclass
    class _Hyp:
        cells: Tuple[int, ...]
        last: int
        log_prob: float
        score: float
        state: object

    beams = [_Hyp((), start_cell, 0.0, 0.0, process.initial_state())]
    for _ in range(steps):
        candidates = []
        for parent in beams:  # rank order from the previous selection
            state, probs = process.step(parent.state, parent.last)
            logp = _log_probs(probs)
            sib_rank = np.empty(n, dtype=np.int64)
            sib_rank[np.argsort(-logp, kind="stable")] = np.arange(n)
            for i in range(n):
                candidates.append(
                    _Hyp(
                        cells=parent.cells + (i,),
                        last=i,
                        log_prob=parent.log_prob + float(logp[i]),
                        score=parent.score + float(logp[i]) - gamma0 * float(sib_rank[i]),
                        state=state,
                    )
                )
        candidates.sort(key=lambda hyp: (-hyp.score, hyp.cells))
        beams = candidates[:k]

    beams.sort(key=lambda hyp: (-hyp.log_prob, hyp.cells))
    return [
        Beam(cells=b.cells, log_prob=b.log_prob, score=b.score, rank=r)
        for r, b in enumerate(beams)
    ]


# ---------------------------------------------------------------------------
# Trajectory assembly and scenario-level prediction


@dataclass
class PredictionSet:
    scenario_id: str
    trajectories: List[List[Tuple[float, float]]]
    log_probs: List[float]
    beliefs: Optional[List[np.ndarray]] = None  # soft-rollout beliefs, for NLL
    scale: str = FINE_SCALE
    out_of_cell_offsets: int = 0  # diagnostic: offsets larger than half a cell

    @property
    def k(self) -> int:
        return len(self.trajectories)


def assemble_trajectories(
    beams: Sequence[Beam],
    offset_fields: Optional[Sequence[np.ndarray]],
    grid: GridSpec,
) -> Tuple[List[List[Tuple[float, float]]], int]:
    """Cell centers plus per-cell offsets for each beam's chosen cells.

    Without offset fields (fine decoder disabled) points are exact cell
    centers. Returns the trajectories and a diagnostic count of offsets
    whose magnitude exceeds half the cell extents.
    """
    if offset_fields is not None and beams and len(offset_fields) < len(beams[0].cells):
        raise ValueError(
            f"{len(offset_fields)} offset fields for {len(beams[0].cells)} decoded steps"
        )
    out = []
    oob = 0
    half_w, half_h = grid.cell_w / 2.0, grid.cell_h / 2.0
    for beam in beams:
        traj = []
        for t, idx in enumerate(beam.cells):
            x, y = cell_center(grid, idx)
            if offset_fields is not None:
                dx, dy = offset_fields[t][idx // grid.cols, idx % grid.cols]
                if abs(dx) > half_w or abs(dy) > half_h:
                    oob += 1
                x, y = x + float(dx), y + float(dy)
            traj.append((x, y))
        out.append(traj)
    return out, oob


def predict_scenario(
    model: Forecaster,
    scenario: Scenario,
    k: int = 20,
    gamma0: float = 1.0,
    steps: Optional[int] = None,
    keep_beliefs: bool = True,
) -> PredictionSet:
    """Full inference for one scenario on the fine scale.

    Runs the soft-feedback rollout once (belief sequence for likelihood
    evaluation plus the shared offset fields; the offset decoder evolves
    independently of cell choices, so one rollout serves every beam), then
    the hard-feedback beam search for the K trajectories.
    """
    if steps is None:
        steps = max(model.config.max_pred_len, scenario.max_future_len())
    with ad.no_grad():
        enc = model.encode_history(scenario)
        rollout = model.rollout(scenario, steps=steps, enc=enc)[FINE_SCALE]
    offset_fields = None
    if rollout.offsets is not None:
        offset_fields = [o.data for o in rollout.offsets]
    process = ModelBeliefProcess(model, scenario, enc=enc)
    start = int(np.argmax(model.seed_belief(scenario, FINE_SCALE)))
    beams = diverse_beam_search(process, start, k=k, gamma0=gamma0, steps=steps)
    trajectories, oob = assemble_trajectories(beams, offset_fields, rollout.grid)
    return PredictionSet(
        scenario_id=scenario.scenario_id,
        trajectories=trajectories,
        log_probs=[b.log_prob for b in beams],
        beliefs=[b.data.copy() for b in rollout.beliefs] if keep_beliefs else None,
        scale=FINE_SCALE,
        out_of_cell_offsets=oob,
    )


def greedy_predict(model: Forecaster, scenario: Scenario,
                   steps: Optional[int] = None) -> PredictionSet:
    """Single most-likely trajectory (beam search with K=1, no penalty)."""
    return predict_scenario(model, scenario, k=1, gamma0=0.0, steps=steps)


# ---------------------------------------------------------------------------
# Prediction files (JSON Lines)


def write_predictions(predictions: Sequence[PredictionSet], path: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for p in predictions:
            record = {
                "scenario_id": p.scenario_id,
                "K": p.k,
                "trajectories": [[[x, y] for x, y in t] for t in p.trajectories],
                "log_probs": list(p.log_probs),
            }
            fh.write(json.dumps(record, separators=(",", ":")))
            fh.write("\n")
    os.replace(tmp, path)


def read_predictions(path: str) -> Dict[str, PredictionSet]:
    out: Dict[str, PredictionSet] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            pred = PredictionSet(
                scenario_id=str(obj["scenario_id"]),
                trajectories=[
                    [(float(x), float(y)) for x, y in t] for t in obj["trajectories"]
                ],
                log_probs=[float(v) for v in obj["log_probs"]],
            )
            out[pred.scenario_id] = pred
    return out
