import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multifuture import gridworld as gw
from multifuture import scenegen as sg
from multifuture.errors import (
    ConfigError,
    GenerationError,
    ScenarioParseError,
    ScenarioVersionError,
)


def small_cfg(**overrides):
    base = dict(
        rows=12, cols=12, coarse_rows=6, coarse_cols=6, h=8, j=2,
        n_destinations=2, sigma=0.0, max_pred_len=10, speed=0.8,
    )
    base.update(overrides)
    return sg.GeneratorConfig(**base)


# ---------------------------------------------------------------------------
# Semantic maps


def test_one_hot_constant_map():
    grid = gw.GridSpec(3, 4)
    m = sg.SemanticMap.from_array(grid, np.zeros((3, 4), dtype=int), k_classes=3)
    oh = sg.one_hot_semantic(m)
    assert oh.shape == (3, 4, 3)
    assert np.all(oh[:, :, 0] == 1) and np.all(oh[:, :, 1:] == 0)


def test_one_hot_sums_and_argmax_round_trip():
    grid = gw.GridSpec(5, 6)
    labels = np.random.default_rng(3).integers(0, 13, size=(5, 6))
    m = sg.SemanticMap.from_array(grid, labels)
    oh = sg.one_hot_semantic(m)
    assert np.all(oh.sum(axis=2) == 1)
    assert np.array_equal(oh.argmax(axis=2), labels)


def test_semantic_map_validates_labels():
    grid = gw.GridSpec(2, 2)
    with pytest.raises(ConfigError):
        sg.SemanticMap.from_array(grid, np.array([[0, 13], [0, 0]]))


def test_temporal_average_idempotent_on_static_maps():
    grid = gw.GridSpec(4, 4)
    m = sg.SemanticMap.from_array(grid, np.random.default_rng(0).integers(0, 13, (4, 4)))
    oh = sg.one_hot_semantic(m)
    avg = sg.temporal_average([oh] * 8)
    assert np.allclose(avg, oh)


def test_temporal_average_two_point_mean():
    grid = gw.GridSpec(2, 2)
    a = sg.one_hot_semantic(sg.SemanticMap.from_array(grid, np.zeros((2, 2), int), 3))
    flipped = np.zeros((2, 2), int)
    flipped[0, 0] = 1
    b = sg.one_hot_semantic(sg.SemanticMap.from_array(grid, flipped, 3))
    avg = sg.temporal_average([a, b])
    assert avg[0, 0, 0] == 0.5 and avg[0, 0, 1] == 0.5
    assert avg[1, 1, 0] == 1.0


def test_temporal_average_rejects_empty_and_ragged():
    with pytest.raises(ValueError):
        sg.temporal_average([])
    with pytest.raises(ValueError):
        sg.temporal_average([np.zeros((2, 2, 3)), np.zeros((2, 3, 3))])


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_temporal_average_class_sums_property(seed):
    rng = np.random.default_rng(seed)
    grid = gw.GridSpec(3, 3)
    maps = [
        sg.one_hot_semantic(sg.SemanticMap.from_array(grid, rng.integers(0, 13, (3, 3))))
        for _ in range(rng.integers(1, 6))
    ]
    avg = sg.temporal_average(maps)
    assert np.allclose(avg.sum(axis=2), 1.0)
    assert avg.min() >= 0 and avg.max() <= 1


# ---------------------------------------------------------------------------
# Generator


def test_generator_deterministic():
    cfg = small_cfg(sigma=0.15)
    a = sg.generate_forking_scenario(cfg, 7)
    b = sg.generate_forking_scenario(cfg, 7)
    assert a == b


def test_generator_noiseless_paths_are_linear_and_diverge():
    cfg = small_cfg(sigma=0.0)
    s = sg.generate_forking_scenario(cfg, 11)
    assert s.n_futures == 2
    fork = np.asarray(s.history[-1])
    ends = []
    for fut, dest_like in zip(s.futures, (None, None)):
        pts = np.asarray(fut)
        # Collinearity: every segment direction matches the overall one.
        full = pts[-1] - fork
        for p in pts:
            rel = p - fork
            cross = full[0] * rel[1] - full[1] * rel[0]
            assert abs(cross) < 1e-9
        ends.append(tuple(pts[-1]))
    assert ends[0] != ends[1]
    # The two futures split immediately after the shared fork.
    assert not np.allclose(s.futures[0][0], s.futures[1][0])


def test_generator_futures_end_at_destinations_when_reachable():
    cfg = small_cfg(sigma=0.0)
    s = sg.generate_forking_scenario(cfg, 19)
    dests = {tuple(np.round(d, 6)) for d in s.destinations}
    for fut in s.futures:
        assert tuple(np.round(fut[-1], 6)) in dests


def test_generator_validity_scan_100_seeds():
    cfg = small_cfg(sigma=0.1)
    for seed in range(100):
        s = sg.generate_forking_scenario(cfg, seed)
        mask = sg.walkable_mask(s.semantic_maps[0])
        grid = s.fine_grid
        for fut in s.futures:
            for cell in gw.quantize_trajectory(grid, fut):
                assert mask[cell // grid.cols, cell % grid.cols], (seed, fut)
        labels = s.semantic_maps[0].labels_array()
        assert len(np.unique(labels)) >= 2
        assert len(fut) <= cfg.max_pred_len
        assert len(s.history) == cfg.h


def test_generator_unsatisfiable_config_reports_seed():
    cfg = small_cfg(rows=4, cols=4, speed=9.0, max_pred_len=3, max_retries=3)
    with pytest.raises(GenerationError, match="seed 5"):
        sg.generate_forking_scenario(cfg, 5)


def test_generator_config_validation():
    with pytest.raises(ConfigError):
        small_cfg(j=0)
    with pytest.raises(ConfigError):
        small_cfg(j=3, n_destinations=2)
    with pytest.raises(ConfigError):
        small_cfg(sigma=-0.1)


def test_scenario_set_unique_ids():
    cfg = small_cfg()
    s = sg.generate_forking_scenario(cfg, 1)
    with pytest.raises(ConfigError):
        sg.ScenarioSet((s, s), 1, {})


# ---------------------------------------------------------------------------
# Files


def test_write_read_round_trip(tmp_path):
    cfg = small_cfg(sigma=0.2)
    sset = sg.generate_scenario_set(cfg, seed=3, n=3)
    path = str(tmp_path / "scenarios.jsonl")
    sg.write_scenarios(sset, path)
    back = sg.read_scenarios(path)
    assert back == sset


def test_write_is_byte_deterministic(tmp_path):
    cfg = small_cfg()
    sset = sg.generate_scenario_set(cfg, seed=3, n=2)
    p1, p2 = str(tmp_path / "a.jsonl"), str(tmp_path / "b.jsonl")
    sg.write_scenarios(sset, p1)
    sg.write_scenarios(sset, p2)
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_missing_futures_field_names_it(tmp_path):
    cfg = small_cfg()
    sset = sg.generate_scenario_set(cfg, seed=3, n=1)
    path = str(tmp_path / "s.jsonl")
    sg.write_scenarios(sset, path)
    lines = open(path).read().splitlines()
    record = json.loads(lines[0])
    del record["futures"]
    with open(path, "w") as fh:
        fh.write(json.dumps(record) + "\n")
    with pytest.raises(ScenarioParseError, match="futures"):
        sg.read_scenarios(path)


def test_truncated_file_rejected_without_partial_set(tmp_path):
    cfg = small_cfg()
    sset = sg.generate_scenario_set(cfg, seed=3, n=2)
    path = str(tmp_path / "s.jsonl")
    sg.write_scenarios(sset, path)
    raw = open(path, "rb").read()
    with open(path, "wb") as fh:
        fh.write(raw[: len(raw) // 2])
    with pytest.raises(ScenarioParseError):
        sg.read_scenarios(path)


def test_version_mismatch(tmp_path):
    cfg = small_cfg()
    sset = sg.generate_scenario_set(cfg, seed=3, n=1)
    path = str(tmp_path / "s.jsonl")
    sg.write_scenarios(sset, path)
    record = json.loads(open(path).read().splitlines()[0])
    record["v"] = 99
    with open(path, "w") as fh:
        fh.write(json.dumps(record) + "\n")
    with pytest.raises(ScenarioVersionError):
        sg.read_scenarios(path)


def test_bad_json_line_number(tmp_path):
    path = str(tmp_path / "s.jsonl")
    with open(path, "w") as fh:
        fh.write('{"v": 1}\n')
        fh.write("not json\n")
    with pytest.raises(ScenarioParseError) as err:
        sg.read_scenarios(path)
    assert err.value.line == 1  # first record is already invalid (missing fields)


def test_meta_sidecar_round_trips_config(tmp_path):
    cfg = small_cfg(sigma=0.3)
    sset = sg.generate_scenario_set(cfg, seed=9, n=1)
    path = str(tmp_path / "s.jsonl")
    sg.write_scenarios(sset, path)
    back = sg.read_scenarios(path)
    assert back.seed == 9
    assert sg.GeneratorConfig.from_json(back.config) == cfg
