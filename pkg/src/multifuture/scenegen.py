"""Semantic scene maps, the scenario data model, and a deterministic
procedural generator of multi-future fork scenarios.

A scenario is one controlled agent: an observed history that ends at a
fork point, J ground-truth future continuations toward distinct
destinations, and a class-labeled scene map at grid resolution. Scenario
files are JSON Lines (one scenario per line, schema version 1) with a
"<name>.meta.json" sidecar recording the generator seed and config.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, GenerationError, ScenarioParseError, ScenarioVersionError
from .gridworld import GridSpec, Point2, quantize_point

SCHEMA_VERSION = 1

#: Class palette. Generation only cares about walkable vs impassable;
#: the rest exists to give scenes texture at the documented class count.
CLASS_NAMES = (
    "sidewalk",
    "road",
    "grass",
    "terrain",
    "crosswalk",
    "parking",
    "pedestrian_area",
    "curb",
    "vehicle",
    "building",
    "wall",
    "fence",
    "water",
)
K_CLASSES_DEFAULT = len(CLASS_NAMES)  # 13
IMPASSABLE_CLASSES = frozenset(
    CLASS_NAMES.index(n) for n in ("vehicle", "building", "wall", "fence", "water")
)

VIEW_TAGS = ("deg45_a", "deg45_b", "deg45_c", "topdown")


@dataclass(frozen=True)
class SemanticMap:
    """Per-cell class labels at grid resolution."""

    grid: GridSpec
    labels: Tuple[Tuple[int, ...], ...]  # rows x cols, row-major
    k_classes: int = K_CLASSES_DEFAULT

    def __post_init__(self):
        if len(self.labels) != self.grid.rows or any(
            len(row) != self.grid.cols for row in self.labels
        ):
            raise ConfigError("label array shape does not match grid")
        arr = self.labels_array()
        if arr.min() < 0 or arr.max() >= self.k_classes:
            raise ConfigError(
                f"labels must lie in [0, {self.k_classes}), got range "
                f"[{arr.min()}, {arr.max()}]"
            )

    def labels_array(self) -> np.ndarray:
        return np.asarray(self.labels, dtype=np.int64)

    @classmethod
    def from_array(cls, grid: GridSpec, labels: np.ndarray, k_classes: int = K_CLASSES_DEFAULT):
        rows = tuple(tuple(int(v) for v in row) for row in np.asarray(labels))
        return cls(grid, rows, k_classes)


def one_hot_semantic(m: SemanticMap) -> np.ndarray:
    """(rows, cols, K) one-hot encoding of the class labels."""
    labels = m.labels_array()
    out = np.zeros((m.grid.rows, m.grid.cols, m.k_classes), dtype=np.float64)
    rr, cc = np.meshgrid(np.arange(m.grid.rows), np.arange(m.grid.cols), indexing="ij")
    out[rr, cc, labels] = 1.0
    return out


def temporal_average(maps: Sequence[np.ndarray]) -> np.ndarray:
    """Frame-mean of a sequence of one-hot (rows, cols, K) maps."""
    if len(maps) == 0:
        raise ValueError("temporal_average needs at least one frame")
    first = maps[0].shape
    if any(m.shape != first for m in maps):
        raise ValueError("temporal_average frames must share one shape")
    return np.mean(np.stack(maps, axis=0), axis=0)


@dataclass(frozen=True)
class Scenario:
    """One controlled-agent instance with J alternative futures."""

    scenario_id: str
    fine_grid: GridSpec
    coarse_grid: GridSpec
    semantic_maps: Tuple[SemanticMap, ...]  # one per history frame, or one static
    history: Tuple[Point2, ...]
    futures: Tuple[Tuple[Point2, ...], ...]
    destinations: Tuple[Point2, ...]
    view_tag: str = "topdown"
    fps: float = 2.5

    def __post_init__(self):
        if len(self.history) < 1:
            raise ConfigError("scenario needs at least one history frame")
        if len(self.futures) < 1 or any(len(f) == 0 for f in self.futures):
            raise ConfigError("scenario needs at least one non-empty future")
        if len(self.semantic_maps) not in (1, len(self.history)):
            raise ConfigError(
                "semantic_maps must hold one static map or one map per history frame"
            )
        if self.view_tag not in VIEW_TAGS:
            raise ConfigError(f"unknown view tag {self.view_tag!r}")

    @property
    def n_futures(self) -> int:
        return len(self.futures)

    def maps_for_frames(self) -> List[SemanticMap]:
        if len(self.semantic_maps) == 1:
            return [self.semantic_maps[0]] * len(self.history)
        return list(self.semantic_maps)

    def max_future_len(self) -> int:
        return max(len(f) for f in self.futures)


@dataclass(frozen=True)
class ScenarioSet:
    scenarios: Tuple[Scenario, ...]
    seed: int
    config: Dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [s.scenario_id for s in self.scenarios]
        if len(set(ids)) != len(ids):
            raise ConfigError("scenario ids must be unique")


# ---------------------------------------------------------------------------
# Generator


@dataclass(frozen=True)
class GeneratorConfig:
    """Geometry family for fork scenarios.

    Distances are in scene units; the default fine grid uses unit cells so
    one unit is one fine cell extent.
    """

    rows: int = 36
    cols: int = 18
    coarse_rows: int = 18
    coarse_cols: int = 9
    h: int = 8
    j: int = 2
    n_destinations: int = 2
    sigma: float = 0.0
    max_pred_len: int = 26
    fps: float = 2.5
    speed: float = 1.0  # units per frame along history and futures
    fork_jitter: float = 0.5
    dest_spread_deg: float = 55.0  # half-angle of the destination fan
    dest_jitter: float = 0.5
    k_classes: int = K_CLASSES_DEFAULT
    decor_density: float = 0.08  # fraction of off-path cells made impassable
    clearance: float = 1.0  # min distance from any path point to impassable cells
    max_retries: int = 25

    def __post_init__(self):
        if self.j < 1:
            raise ConfigError("need at least one future per scenario (j >= 1)")
        if self.n_destinations < self.j:
            raise ConfigError("need at least as many destinations as futures")
        if self.h < 1:
            raise ConfigError("history length must be >= 1")
        if self.sigma < 0:
            raise ConfigError("noise level must be >= 0")
        if self.max_pred_len < 1:
            raise ConfigError("max_pred_len must be >= 1")

    def fine_grid(self) -> GridSpec:
        return GridSpec(self.rows, self.cols, (0.0, 0.0), 1.0, 1.0, scale_id=0)

    def coarse_grid(self) -> GridSpec:
        return GridSpec(
            self.coarse_rows,
            self.coarse_cols,
            (0.0, 0.0),
            self.cols / self.coarse_cols,
            self.rows / self.coarse_rows,
            scale_id=1,
        )

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "GeneratorConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown generator config keys: {sorted(unknown)}")
        return cls(**obj)


def _segment_points(a: np.ndarray, b: np.ndarray, step: float, max_len: int) -> np.ndarray:
    """Points after a along the segment a->b at spacing <= step, capped."""
    dist = float(np.linalg.norm(b - a))
    n = max(1, int(math.ceil(dist / step)))
    n = min(n, max_len)
    ts = np.arange(1, n + 1) / max(1, int(math.ceil(dist / step)))
    ts = np.minimum(ts, 1.0)
    return a + ts[:, None] * (b - a)


def _inside(cfg: GeneratorConfig, p: np.ndarray, margin: float = 0.5) -> bool:
    return (
        margin <= p[0] <= cfg.cols - margin and margin <= p[1] <= cfg.rows - margin
    )


def generate_forking_scenario(cfg: GeneratorConfig, rng_seed: int) -> Scenario:
    """Deterministically build one fork scenario for (config, seed).

    The history runs straight at constant speed and ends at a fork point;
    each future is a (noisy) piecewise-linear path to its own destination.
    Impassable scene decor is placed only at cells with ``clearance`` to
    every trajectory point, so all paths stay on walkable cells by
    construction. Raises GenerationError when the geometry cannot be
    satisfied after bounded retries.
    """
    fine = cfg.fine_grid()
    coarse = cfg.coarse_grid()
    for attempt in range(cfg.max_retries):
        rng = np.random.default_rng([int(rng_seed), attempt])
        scenario = _try_generate(cfg, fine, coarse, rng, rng_seed)
        if scenario is not None:
            return scenario
    raise GenerationError(
        f"could not satisfy generator config after {cfg.max_retries} retries "
        f"(seed {rng_seed})"
    )


def _try_generate(cfg, fine, coarse, rng, rng_seed) -> Optional[Scenario]:
    center = np.array([cfg.cols / 2.0, cfg.rows / 2.0])
    fork = center + rng.uniform(-cfg.fork_jitter, cfg.fork_jitter, size=2)

    heading = rng.uniform(0.0, 2 * math.pi)
    direction = np.array([math.cos(heading), math.sin(heading)])
    steps = (np.arange(cfg.h - 1, -1, -1)) * cfg.speed
    history = fork[None, :] - steps[:, None] * direction[None, :]
    if cfg.sigma > 0 and cfg.h > 1:
        history[:-1] += rng.normal(0.0, cfg.sigma, size=(cfg.h - 1, 2))
    if not all(_inside(cfg, p) for p in history):
        return None

    spread = math.radians(cfg.dest_spread_deg)
    if cfg.n_destinations == 1:
        angles = np.array([heading])
    else:
        angles = heading + np.linspace(-spread, spread, cfg.n_destinations)
    angles = angles + rng.uniform(-0.08, 0.08, size=angles.shape)
    reach = cfg.speed * min(cfg.max_pred_len, max(4, cfg.max_pred_len // 2))
    destinations = []
    for a in angles:
        for _ in range(8):
            dist = rng.uniform(0.6 * reach, reach)
            d = fork + dist * np.array([math.cos(a), math.sin(a)])
            if _inside(cfg, d, margin=1.0):
                destinations.append(d)
                break
        else:
            return None

    futures = []
    dest_order = rng.permutation(cfg.n_destinations)[: cfg.j]
    for j in sorted(dest_order):
        pts = _segment_points(fork, destinations[j], cfg.speed, cfg.max_pred_len)
        if cfg.sigma > 0 and len(pts) > 1:
            pts = pts.copy()
            pts[:-1] += rng.normal(0.0, cfg.sigma, size=(len(pts) - 1, 2))
        if not all(_inside(cfg, p, margin=0.05) for p in pts):
            return None
        futures.append(pts)

    labels = _paint_scene(cfg, rng, history, futures, destinations)
    if labels is None:
        return None

    semantic = SemanticMap.from_array(fine, labels, cfg.k_classes)
    return Scenario(
        scenario_id=f"fork-{rng_seed:010d}",
        fine_grid=fine,
        coarse_grid=coarse,
        semantic_maps=(semantic,),
        history=tuple((float(x), float(y)) for x, y in history),
        futures=tuple(
            tuple((float(x), float(y)) for x, y in pts) for pts in futures
        ),
        destinations=tuple((float(x), float(y)) for x, y in destinations),
        view_tag=VIEW_TAGS[int(rng.integers(len(VIEW_TAGS)))],
        fps=cfg.fps,
    )


def _paint_scene(cfg, rng, history, futures, destinations) -> Optional[np.ndarray]:
    """Base walkable surface, a few walkable patches, impassable decor."""
    sidewalk = CLASS_NAMES.index("sidewalk")
    road = CLASS_NAMES.index("road")
    grass = CLASS_NAMES.index("grass")
    building = CLASS_NAMES.index("building")

    labels = np.full((cfg.rows, cfg.cols), sidewalk, dtype=np.int64)
    if cfg.k_classes > grass:
        for cls in (road, grass):
            r0 = int(rng.integers(0, cfg.rows))
            c0 = int(rng.integers(0, cfg.cols))
            rh = int(rng.integers(1, max(2, cfg.rows // 3)))
            cw = int(rng.integers(1, max(2, cfg.cols // 3)))
            labels[r0 : r0 + rh, c0 : c0 + cw] = cls

    all_points = np.concatenate([history] + futures + [np.asarray(destinations)])
    centers_x = (np.arange(cfg.cols) + 0.5)[None, :]
    centers_y = (np.arange(cfg.rows) + 0.5)[:, None]
    min_d2 = np.full((cfg.rows, cfg.cols), np.inf)
    for px, py in all_points:
        d2 = (centers_x - px) ** 2 + (centers_y - py) ** 2
        np.minimum(min_d2, d2, out=min_d2)
    # A cell is eligible for decor when even its nearest path point keeps
    # clearance to every point of the cell (half-diagonal plus margin).
    guard = (cfg.clearance + math.sqrt(0.5)) ** 2
    eligible = np.argwhere(min_d2 > guard)
    if len(eligible) == 0:
        return None
    n_decor = max(1, int(round(cfg.decor_density * len(eligible))))
    picks = eligible[rng.choice(len(eligible), size=min(n_decor, len(eligible)), replace=False)]
    if cfg.k_classes <= building:
        return None
    labels[picks[:, 0], picks[:, 1]] = building
    return labels


def walkable_mask(m: SemanticMap) -> np.ndarray:
    """(rows, cols) bool map of cells an agent may occupy."""
    labels = m.labels_array()
    mask = np.ones_like(labels, dtype=bool)
    for cls in IMPASSABLE_CLASSES:
        mask &= labels != cls
    return mask


def generate_scenario_set(cfg: GeneratorConfig, seed: int, n: int) -> ScenarioSet:
    """n scenarios with per-scenario seeds derived from (seed, index)."""
    scenarios = []
    for i in range(n):
        child = int(np.random.SeedSequence([int(seed), i]).generate_state(1)[0])
        scenarios.append(generate_forking_scenario(cfg, child))
    return ScenarioSet(tuple(scenarios), int(seed), cfg.to_json())


# ---------------------------------------------------------------------------
# Serialization (JSON Lines, one scenario per line)


def _scenario_to_json(s: Scenario) -> dict:
    return {
        "v": SCHEMA_VERSION,
        "scenario_id": s.scenario_id,
        "fine_grid": s.fine_grid.to_json(),
        "coarse_grid": s.coarse_grid.to_json(),
        "semantic_maps": [
            {
                "grid": m.grid.to_json(),
                "k_classes": m.k_classes,
                "labels": [list(row) for row in m.labels],
            }
            for m in s.semantic_maps
        ],
        "history": [[x, y] for x, y in s.history],
        "futures": [[[x, y] for x, y in f] for f in s.futures],
        "destinations": [[x, y] for x, y in s.destinations],
        "view_tag": s.view_tag,
        "fps": s.fps,
    }


_REQUIRED_FIELDS = (
    "v",
    "scenario_id",
    "fine_grid",
    "coarse_grid",
    "semantic_maps",
    "history",
    "futures",
    "destinations",
    "view_tag",
    "fps",
)


def _scenario_from_json(obj: dict, line: int) -> Scenario:
    for key in _REQUIRED_FIELDS:
        if key not in obj:
            raise ScenarioParseError(f"missing field {key!r}", line=line)
    if obj["v"] != SCHEMA_VERSION:
        raise ScenarioVersionError(
            f"unsupported scenario schema version {obj['v']!r}", line=line
        )
    try:
        maps = tuple(
            SemanticMap(
                GridSpec.from_json(m["grid"]),
                tuple(tuple(int(v) for v in row) for row in m["labels"]),
                int(m["k_classes"]),
            )
            for m in obj["semantic_maps"]
        )
        return Scenario(
            scenario_id=str(obj["scenario_id"]),
            fine_grid=GridSpec.from_json(obj["fine_grid"]),
            coarse_grid=GridSpec.from_json(obj["coarse_grid"]),
            semantic_maps=maps,
            history=tuple((float(x), float(y)) for x, y in obj["history"]),
            futures=tuple(
                tuple((float(x), float(y)) for x, y in f) for f in obj["futures"]
            ),
            destinations=tuple((float(x), float(y)) for x, y in obj["destinations"]),
            view_tag=str(obj["view_tag"]),
            fps=float(obj["fps"]),
        )
    except (KeyError, TypeError, ValueError, ConfigError) as exc:
        raise ScenarioParseError(f"invalid scenario record: {exc}", line=line) from exc


def write_scenarios(sset: ScenarioSet, path: str) -> None:
    """Write JSON Lines plus the "<name>.meta.json" sidecar, atomically."""
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for s in sset.scenarios:
            fh.write(json.dumps(_scenario_to_json(s), separators=(",", ":")))
            fh.write("\n")
    os.replace(tmp, path)
    meta = {"v": SCHEMA_VERSION, "seed": sset.seed, "config": sset.config,
            "count": len(sset.scenarios)}
    meta_tmp = path + ".meta.json.tmp"
    with open(meta_tmp, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(meta_tmp, _meta_path(path))


def _meta_path(path: str) -> str:
    return path + ".meta.json"


def read_scenarios(path: str) -> ScenarioSet:
    """Parse a scenario file; any malformed line fails the whole read."""
    scenarios = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            if not line.endswith("\n"):
                raise ScenarioParseError("truncated final line", line=line_no)
            try:
                obj = json.loads(stripped)
            except json.JSONDecodeError as exc:
                raise ScenarioParseError(f"invalid JSON: {exc.msg}", line=line_no) from exc
            if not isinstance(obj, dict):
                raise ScenarioParseError("record is not an object", line=line_no)
            scenarios.append(_scenario_from_json(obj, line_no))
    seed = 0
    config: Dict = {}
    meta_file = _meta_path(path)
    if os.path.exists(meta_file):
        with open(meta_file, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        seed = int(meta.get("seed", 0))
        config = meta.get("config", {})
        expected = meta.get("count")
        if expected is not None and expected != len(scenarios):
            raise ScenarioParseError(
                f"file holds {len(scenarios)} scenarios but sidecar records {expected}"
            )
    return ScenarioSet(tuple(scenarios), seed, config)
