import csv
import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from scoredistill import harness
from scoredistill.config import ExperimentConfig, default_config, load_config
from scoredistill.errors import ConfigurationError, DivergenceError
from scoredistill.harness import (consistency_gap, consistency_gap_curve, guidance_variance, mode_distance,
                                  particle_mode_distances, run, windowed_variance)
from scoredistill.records import csv_header, emit, load_record
from scoredistill.scene import SceneParams
from scoredistill.target import Prompt

SMALL = dict(plan={"n_total": 60, "T_cut": 12}, scene={"particles": 8}, metrics_window=5)


def small(**kw):
    return default_config(**{**SMALL, **kw})


@pytest.fixture(scope="module")
def record():
    return run(small(seed=3))


def test_zero_iterations():
    rec = run(small(plan={"n_total": 0, "T_cut": 0}))
    assert rec.n_rows == 0 and not rec.failed
    assert rec.metrics["mode_distance"] == rec.metrics["initial_mode_distance"]
    assert np.isnan(rec.metrics["guidance_variance"]) and np.isnan(rec.metrics["consistency_gap"])


def test_record_shape_and_hash(record):
    cfg = small(seed=3)
    assert record.n_rows == 60 * 8
    assert record.config_hash == cfg.config_hash()
    assert record.config == cfg.to_dict()
    assert record.per_iteration("theta").shape == (60, 8, 2)
    assert set(record.metrics) >= {"mode_distance", "guidance_variance", "consistency_gap"}


def test_determinism(record):
    again = run(small(seed=3))
    assert again == record
    assert run(small(seed=4)) != record


def test_dual_phase_rows(record):
    phase = record.per_iteration("phase")[:, 0]
    est = record.per_iteration("estimator")[:, 0]
    s, t = record.per_iteration("s")[:, 0], record.per_iteration("t")[:, 0]
    assert list(phase[:13]) == ["geometry"] * 13 and set(phase[13:]) == {"appearance"}
    assert set(est[:13]) == {"sds_lcm"} and set(est[13:]) == {"sds_lcm_gc"}
    np.testing.assert_array_equal(t[:13], s[:13])
    np.testing.assert_array_equal(t[13:], np.minimum(2 * s[13:], 1000))
    assert s[0] == 980 and s[12] == 350 and s[13] == 350 and s[-1] == 20


def test_estimators_share_streams():
    cams = {}
    for name in ("sds_ddpm", "sds_lcm", "sds_lcm_gc", "ism", "vsd"):
        rec = run(small(estimator=name, plan={"n_total": 30, "T_cut": 6, "noise_policy": "fresh"}))
        assert not rec.failed
        cams[name] = rec.columns["camera"]
    first = cams.pop("sds_ddpm")
    for c in cams.values():
        np.testing.assert_array_equal(c, first)


def test_divergence_yields_partial_record(monkeypatch, tmp_path):
    calls = {"n": 0}
    real = harness.apply_guidance_all

    def flaky(*args):
        calls["n"] += 1
        if calls["n"] == 10:
            raise DivergenceError("non-finite gradient for particles [0]")
        return real(*args)

    monkeypatch.setattr(harness, "apply_guidance_all", flaky)
    rec = run(small(), out_dir=tmp_path)
    assert rec.failed and "non-finite" in rec.failure
    assert rec.n_iters == 9
    saved = load_record(tmp_path / f"{rec.config_hash}.partial.json")
    assert saved == rec


# -- metrics ---------------------------------------------------------------------

def test_guidance_variance_examples(rng):
    assert guidance_variance(np.tile([1.0, 2.0], (50, 1)), 10) == 0.0
    trace = rng.normal(size=(10_000, 2))
    assert guidance_variance(trace, 20) == pytest.approx(2.0, rel=0.05)
    with pytest.raises(ConfigurationError):
        guidance_variance(trace, 1)
    with pytest.raises(ConfigurationError):
        guidance_variance(trace[:5], 10)


def test_windowed_variance_brute_force(rng):
    trace = rng.normal(size=(30, 3, 2))
    got = windowed_variance(trace, 7)
    want = [np.mean([np.trace(np.cov(trace[i:i + 7, p].T)) for p in range(3)]) for i in range(24)]
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_mode_distance_examples(bimodal):
    right = Prompt((1,))
    assert mode_distance(SceneParams([[3.0, 0.0]]), bimodal, right) == 0.0
    assert mode_distance(SceneParams([[-3.0, 0.0]]), bimodal, right) == 6.0
    assert mode_distance(SceneParams([[-3.0, 0.0]]), bimodal, Prompt((0, 1))) == 0.0
    with pytest.raises(ConfigurationError):
        mode_distance(SceneParams([[0.0, 0.0]]), bimodal, Prompt(()))


def test_mode_distance_matches_scan(rng):
    from scoredistill.target import MixtureTarget
    tgt = MixtureTarget(np.full(4, 0.25), rng.uniform(-5, 5, size=(4, 2)), np.ones(4))
    pts = rng.uniform(-6, 6, size=(300, 2))
    prompt = Prompt((0, 2, 3))
    scan = [min(np.hypot(*(p - tgt.means[k])) for k in prompt.selected) for p in pts]
    np.testing.assert_allclose(particle_mode_distances(pts, tgt, prompt), scan, rtol=1e-14)


def test_consistency_gap_tail(record):
    gaps = record.per_iteration("x0_gap")
    assert consistency_gap(record) == pytest.approx(gaps[54:].mean(), rel=1e-14)
    curve = consistency_gap_curve(record)
    assert curve.shape == (5,)
    assert curve.mean() == pytest.approx(gaps[30:].mean(axis=1).mean(), rel=1e-12)


# -- persistence -------------------------------------------------------------------

def test_empty_record_csv_is_header_only(tmp_path):
    rec = run(small(plan={"n_total": 0, "T_cut": 0}))
    path = emit(rec, "csv", tmp_path / "empty.csv")
    lines = path.read_text().splitlines()
    assert lines == [",".join(csv_header(2))]


def test_csv_rows_are_exact(record, tmp_path):
    path = emit(record, "csv", tmp_path / "run.csv")
    with path.open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == record.n_rows
    assert list(rows[0]) == csv_header(2)
    np.testing.assert_array_equal([float(r["grad_norm"]) for r in rows], record.columns["grad_norm"])
    np.testing.assert_array_equal([float(r["theta_1"]) for r in rows], record.columns["theta"][:, 1])
    assert rows[0]["phase"] == "geometry" and rows[-1]["estimator"] == "sds_lcm_gc"


def test_json_round_trip(record, tmp_path):
    path = emit(record, "json", tmp_path / "run.json")
    back = load_record(path)
    assert back == record
    assert json.loads(path.read_text())["config_hash"] == record.config_hash


def test_svg_has_two_labelled_series(record, tmp_path):
    path = emit(record, "svg", tmp_path / "run.svg")
    root = ET.parse(path).getroot()
    text = " ".join(t for t in root.itertext())
    assert "mode_distance" in text and "guidance_variance" in text
    assert root.tag.endswith("svg")
    series = [e for e in root.iter() if (e.get("id") or "").startswith("line2d")]
    assert len(series) >= 2


def test_emit_errors(record, tmp_path):
    with pytest.raises(ConfigurationError):
        emit(record, "parquet", tmp_path / "x")
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError, match="file"):
        emit(record, "csv", blocker / "inner.csv")


# -- configuration ---------------------------------------------------------------

def test_config_round_trip(tmp_path):
    cfg = small(seed=8, estimator="ism")
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    path = tmp_path / "c.yaml"
    import yaml
    path.write_text(yaml.safe_dump(cfg.to_dict()))
    assert load_config(path).config_hash() == cfg.config_hash()


@pytest.mark.parametrize("bad", [dict(estimator="csd"), dict(prompt="middle"), dict(omega="snr"),
                                 dict(plan={"T_cut": 5000}), dict(colour="red"),
                                 dict(scene={"particles": 0}), dict(metrics_window=1)])
def test_config_rejects(bad):
    with pytest.raises(ConfigurationError):
        default_config(**bad)
