import json

import numpy as np
import pytest

from roadfirst.dataset import check_overlaps, join_records, load_csv, load_schema, map_to_segments, segments_from_frame
from roadfirst.syngen import GenConfig, GenConfigError, PlantedEffect, generate, load_gen_config, write_dataset


def test_zero_effects_hit_base_rate():
    data = generate(GenConfig(n_crashes=50_000, effects=[], seed=3))
    for factor, rate in data.truth["base_rates"].items():
        assert abs(data.crash[factor].mean() - rate) <= 0.02


def test_hour_window_effect_is_visible():
    # logistic truth: inside p = 0.24, outside p = 0.05
    window = PlantedEffect("hour", "alcohol", 6.0, kind="window", low=23.0, high=4.0)
    data = generate(GenConfig(n_crashes=50_000, effects=[window], seed=4))
    hour = data.crash["hour"]
    inside = (hour >= 23.0) | (hour < 4.0)
    y = data.crash["alcohol"]
    assert y[inside].mean() / y[~inside].mean() >= 3


def test_truth_records_effects():
    data = generate(GenConfig(n_crashes=2000, seed=5))
    feats = {e["model_feature"] for e in data.truth["effects"]}
    assert {"hour", "rural", "light=dark_unlit", "curve"} <= feats
    for e in data.truth["effects"]:
        assert 0 < e["active_fraction"] < 1


def test_same_seed_same_bytes(tmp_path):
    cfg = GenConfig(n_crashes=1500, seed=7)
    a = write_dataset(generate(cfg), tmp_path / "a")
    b = write_dataset(generate(cfg), tmp_path / "b")
    for name in a:
        assert a[name].read_bytes() == b[name].read_bytes()
    c = write_dataset(generate(GenConfig(n_crashes=1500, seed=8)), tmp_path / "c")
    assert a["crash"].read_bytes() != c["crash"].read_bytes()


def test_written_tables_load_join_and_map(tmp_path):
    paths = write_dataset(generate(GenConfig(n_crashes=1200, seed=9)), tmp_path)
    frames = {t: load_csv(paths[t], load_schema(paths["schema"], t))
              for t in ("crash", "unit", "person", "segments")}
    joined = join_records(frames["crash"], frames["unit"], frames["person"], ["crash_id"])
    assert joined.n_rows == frames["crash"].n_rows
    segments, cols = segments_from_frame(frames["segments"])
    check_overlaps(segments)
    mapped = map_to_segments(joined, segments, cols)
    assert mapped.n_rows == joined.n_rows
    truth = json.loads(paths["truth"].read_text())
    assert truth["n_crashes"] == 1200


def test_every_crash_lies_on_its_segment():
    data = generate(GenConfig(n_crashes=3000, seed=10))
    by_route = {}
    for s in data.segments:
        by_route.setdefault(s.route_id, []).append((s.begin_mp, s.end_mp))
    for r, m in zip(data.crash["route_id"], data.crash["milepost"]):
        assert any(b <= m < e for b, e in by_route[r])


@pytest.mark.parametrize("bad", [
    {"n_crashes": 10},
    {"base_rates": {"alcohol": 1.5}},
    {"effects": [PlantedEffect("nope", "alcohol", 2.0)]},
    {"effects": [PlantedEffect("rural", "unknown_factor", 2.0, level="1")]},
    {"effects": [PlantedEffect("surface", "alcohol", 2.0, level="dirt")]},
    {"effects": [PlantedEffect("surface", "alcohol", 2.0, kind="window", low=0, high=1)]},
])
def test_config_errors(bad):
    with pytest.raises(GenConfigError):
        generate(GenConfig(**bad))


def test_effect_multiplier_must_be_positive():
    with pytest.raises(GenConfigError):
        PlantedEffect("rural", "alcohol", 0.0, level="1")


def test_yaml_config(tmp_path):
    p = tmp_path / "gen.yaml"
    p.write_text("generate:\n  n_crashes: 500\n  seed: 2\n  effects:\n"
                 "    - {feature: rural, factor: alcohol, multiplier: 3.0, level: '1'}\n")
    cfg = load_gen_config(p)
    assert cfg.n_crashes == 500 and len(cfg.effects) == 1
    p.write_text("n_crashes: 500\nbogus: 1\n")
    with pytest.raises(GenConfigError, match="bogus"):
        load_gen_config(p)


def test_units_and_persons_reference_crashes():
    data = generate(GenConfig(n_crashes=800, seed=11))
    ids = set(data.crash["crash_id"])
    assert set(data.unit["crash_id"]) == ids
    assert set(data.person["crash_id"]) == ids
    extra = data.unit.n_rows - data.crash.n_rows
    assert 0 < extra < data.crash.n_rows
    assert np.all(data.unit["unit_no"][: data.crash.n_rows] == "1")
