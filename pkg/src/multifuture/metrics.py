"""Displacement-error and likelihood metrics with variable-length futures.

Every ground-truth future is scored after truncating the prediction to the
future's own length. Per-future minima (over the K predictions) are
averaged over all futures of all scenarios, so scenarios contribute
weight proportional to their future count. The grid-quantized negative
log-likelihood reads the belief at a fixed horizon and scores the cell
containing the true point.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .gridworld import GridSpec, quantize_point

PROB_FLOOR = 1e-12

Trajectory = Sequence[Tuple[float, float]]


def _dists(pred: Trajectory, gt: Trajectory) -> np.ndarray:
    p = np.asarray(pred[: len(gt)], dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    return np.sqrt(((p - g) ** 2).sum(axis=1))


def ade_fde(pred: Trajectory, gt: Trajectory) -> Tuple[float, float]:
    """Mean and final Euclidean error after truncating pred to gt's length."""
    if len(gt) == 0:
        raise ValueError("ground-truth trajectory is empty")
    if len(pred) < len(gt):
        raise ValueError(
            f"prediction ({len(pred)} steps) shorter than ground truth ({len(gt)})"
        )
    d = _dists(pred, gt)
    return float(d.mean()), float(d[-1])


def min_ade_fde_k(
    preds: Sequence[Trajectory], gts: Sequence[Trajectory]
) -> Tuple[float, float]:
    """Best-of-K errors, averaged over ground-truth futures.

    The minimizing prediction is chosen independently for the average and
    the final-step error.
    """
    if len(preds) == 0 or len(gts) == 0:
        raise ValueError("need at least one prediction and one ground truth")
    ades, fdes = [], []
    for gt in gts:
        pair_errors = [ade_fde(p, gt) for p in preds]
        ades.append(min(a for a, _ in pair_errors))
        fdes.append(min(f for _, f in pair_errors))
    return float(np.mean(ades)), float(np.mean(fdes))


def nll(
    belief_sequence: Sequence[np.ndarray],
    gts: Sequence[Trajectory],
    grid: GridSpec,
    horizons: Sequence[int],
) -> Dict[int, Optional[float]]:
    """Negative log belief of the true cell at each horizon (frames ahead).

    Futures shorter than a horizon are skipped; a horizon nobody reaches is
    reported as None rather than zero.
    """
    out: Dict[int, Optional[float]] = {}
    for tau in horizons:
        if tau < 1:
            raise ValueError(f"horizon must be >= 1 frame, got {tau}")
        vals = []
        for gt in gts:
            if len(gt) < tau:
                continue
            if tau > len(belief_sequence):
                raise ValueError(
                    f"belief sequence has {len(belief_sequence)} steps, "
                    f"horizon {tau} requested"
                )
            belief = belief_sequence[tau - 1]
            idx = quantize_point(grid, gt[tau - 1])
            p = float(belief.reshape(-1)[idx])
            vals.append(-math.log(max(p, PROB_FLOOR)))
        out[tau] = float(np.mean(vals)) if vals else None
    return out


def horizons_from_seconds(seconds: Sequence[float], fps: float) -> List[int]:
    """Frame offsets for horizons given in seconds, rounding half up."""
    return [max(1, int(math.floor(s * fps + 0.5))) for s in seconds]


# ---------------------------------------------------------------------------
# Scenario-collection aggregation


@dataclass
class EvalReport:
    ade: float
    fde: float
    min_ade_k: float
    min_fde_k: float
    nll_at: Dict[int, Optional[float]] = field(default_factory=dict)
    n_scenarios: int = 0
    n_futures: int = 0
    k: int = 0
    nll_skipped: Dict[int, int] = field(default_factory=dict)
    units: str = "scene_units"

    def to_json(self) -> dict:
        return {
            "ade": self.ade,
            "fde": self.fde,
            "min_ade_k": self.min_ade_k,
            "min_fde_k": self.min_fde_k,
            "nll_at": {str(k): v for k, v in self.nll_at.items()},
            "counts": {
                "scenarios": self.n_scenarios,
                "futures": self.n_futures,
                "k": self.k,
            },
            "nll_skipped": {str(k): v for k, v in self.nll_skipped.items()},
            "units": self.units,
        }

    def table(self) -> str:
        lines = [
            f"scenarios={self.n_scenarios} futures={self.n_futures} K={self.k} units={self.units}",
            f"{'metric':<12}{'value':>12}",
            f"{'ADE':<12}{self.ade:>12.4f}",
            f"{'FDE':<12}{self.fde:>12.4f}",
            f"{'minADE_K':<12}{self.min_ade_k:>12.4f}",
            f"{'minFDE_K':<12}{self.min_fde_k:>12.4f}",
        ]
        for tau in sorted(self.nll_at):
            v = self.nll_at[tau]
            label = f"NLL@{tau}f"
            lines.append(
                f"{label:<12}{v:>12.4f}" if v is not None else f"{label:<12}{'absent':>12}"
            )
        return "\n".join(lines)


def duplicate_to_k(preds: Sequence[Trajectory], k: int) -> List[Trajectory]:
    """Single-output models are scored at K by duplicating their output."""
    preds = list(preds)
    if len(preds) == 1 and k > 1:
        return preds * k
    return preds


@dataclass
class ScenarioEval:
    """Inputs for one scenario's contribution to a report."""

    futures: Sequence[Trajectory]
    predictions: Sequence[Trajectory]  # ordered best-first
    beliefs: Optional[Sequence[np.ndarray]] = None
    grid: Optional[GridSpec] = None


def evaluate(
    items: Sequence[ScenarioEval],
    k: int,
    horizons: Sequence[int] = (),
) -> EvalReport:
    """Pool per-future errors across scenarios into one report.

    ADE/FDE score the best-ranked prediction against every future;
    minADE/minFDE take per-future minima over the K predictions (single
    predictions are duplicated to K first).
    """
    if not items:
        raise ValueError("nothing to evaluate")
    ades, fdes, min_ades, min_fdes = [], [], [], []
    nll_samples: Dict[int, List[float]] = {tau: [] for tau in horizons}
    nll_skipped: Dict[int, int] = {tau: 0 for tau in horizons}
    n_futures = 0
    for item in items:
        preds = duplicate_to_k(item.predictions, k)
        top = preds[0]
        for gt in item.futures:
            a, f = ade_fde(top, gt)
            ades.append(a)
            fdes.append(f)
            n_futures += 1
        ma, mf = min_ade_fde_k(preds, item.futures)
        min_ades += [ma] * len(item.futures)
        min_fdes += [mf] * len(item.futures)
        if item.beliefs is not None and item.grid is not None and horizons:
            per = nll(item.beliefs, item.futures, item.grid, horizons)
            for tau in horizons:
                if per[tau] is not None:
                    reached = [gt for gt in item.futures if len(gt) >= tau]
                    nll_samples[tau] += [per[tau]] * len(reached)
                    nll_skipped[tau] += len(item.futures) - len(reached)
                else:
                    nll_skipped[tau] += len(item.futures)
    report = EvalReport(
        ade=float(np.mean(ades)),
        fde=float(np.mean(fdes)),
        min_ade_k=float(np.mean(min_ades)),
        min_fde_k=float(np.mean(min_fdes)),
        nll_at={
            tau: (float(np.mean(v)) if v else None) for tau, v in nll_samples.items()
        },
        n_scenarios=len(items),
        n_futures=n_futures,
        k=k,
        nll_skipped=nll_skipped,
    )
    return report


def write_report_json(reports: Mapping[str, EvalReport], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({name: r.to_json() for name, r in reports.items()}, fh, indent=2,
                  sort_keys=True)
        fh.write("\n")
