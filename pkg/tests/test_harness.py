import csv
import json

import numpy as np
import pytest
from scipy import stats

from scmdetect import harness
from scmdetect.detectors import DEFAULT_DETECTORS, LE, Detector
from scmdetect.harness import (
    ExperimentConfig,
    HistogramStudy,
    PowerTable,
    SignalSpec,
    run_histogram_study,
    run_mpfit_study,
    run_power_experiment,
    run_spike_study,
    write_manifest,
)
from scmdetect.rmt import mp_edges
from scmdetect.tsgen import FirRandomSphere

SMALL = ((256, 6, 16), (400, 8, 20))


def small_config(**kw):
    base = dict(
        rows=SMALL,
        signal=SignalSpec(target_gamma=1.5),
        n_calibration_trials=200,
        n_power_trials=100,
        seed=3,
        name="small",
    )
    base.update(kw)
    return ExperimentConfig(**base)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ---------------------------------------------------------------- configuration


@pytest.mark.parametrize(
    "rows, match",
    [
        (((256, 6, 15),), "B must be even"),
        (((16, 6, 16),), "B \\+ 1 must not exceed N"),
        (((256, 17, 16),), "c = M/\\(B\\+1\\) < 1"),
        ((), "at least one"),
    ],
)
def test_config_rejects_bad_rows(rows, match):
    with pytest.raises(ValueError, match=match):
        ExperimentConfig(rows=rows)


def test_config_rejects_other_errors():
    with pytest.raises(ValueError, match="exceeds M"):
        ExperimentConfig(rows=((256, 2, 16),), signal=SignalSpec("fir_random_sphere", target_gamma=1.0, ratios=(1, 1, 1)))
    with pytest.raises(ValueError, match="k <= M"):
        ExperimentConfig(rows=((256, 2, 16),), detectors=("le3",))
    with pytest.raises(ValueError):
        ExperimentConfig(rows=SMALL, theta=1.0)
    with pytest.raises(ValueError):
        ExperimentConfig(rows=SMALL, alpha=0.0)
    with pytest.raises(ValueError):
        ExperimentConfig(rows=SMALL, spec_version=2)
    with pytest.raises(ValueError, match="unknown config keys"):
        ExperimentConfig.from_dict({"rows": [[256, 6, 16]], "bogus": 1})


def test_signal_modes_are_exclusive():
    with pytest.raises(ValueError, match="mutually exclusive"):
        SignalSpec(target_gamma=1.0, C=0.1)
    with pytest.raises(ValueError, match="mutually exclusive"):
        SignalSpec("fir_random_sphere", target_gamma=1.0, amplitudes=(0.1,))
    with pytest.raises(ValueError):
        SignalSpec()
    with pytest.raises(ValueError):
        SignalSpec("spam", C=0.1)
    assert SignalSpec("fir_random_sphere", amplitudes=(0.2, 0.1)).rank == 2


def test_config_round_trip(tmp_path):
    cfg = small_config(detectors=("le1", "le2", "mcc"), stride=2)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    back = ExperimentConfig.load(path)
    assert back == cfg
    assert back.digest() == cfg.digest()
    assert cfg.with_overrides(seed=9, stride=None).seed == 9
    assert cfg.with_overrides(seed=9).digest() != cfg.digest()


def test_packaged_configs_load():
    from importlib import resources

    for entry in resources.files("scmdetect.configs").iterdir():
        if entry.name.endswith(".json") and entry.name != "simulate.json":
            ExperimentConfig.from_dict(json.loads(entry.read_text()))


# ---------------------------------------------------------------- power experiment


def test_power_table_shape_and_csv(tmp_path):
    table = run_power_experiment(small_config())
    assert len(table.rows) == 2 and all(r.error is None for r in table.rows)
    for r in table.rows:
        assert r.null_statistics.shape == (200, 4)
        for d in DEFAULT_DETECTORS:
            cell = r.cells[d]
            assert 0 <= cell.power <= 1 and cell.n_trials == 100
            assert cell.se == pytest.approx(np.sqrt(cell.power * (1 - cell.power) / 100))
    table.write_csv(tmp_path / "t.csv")
    rows = read_csv(tmp_path / "t.csv")
    assert tuple(rows[0]) == PowerTable.CSV_FIELDS
    assert len(rows) == 1 + 2 * 4
    back = PowerTable.from_dict(json.loads(json.dumps(table.to_dict())))
    back.write_csv(tmp_path / "u.csv")
    assert (tmp_path / "t.csv").read_bytes() == (tmp_path / "u.csv").read_bytes()


def test_power_requires_signal():
    with pytest.raises(ValueError):
        run_power_experiment(ExperimentConfig(rows=SMALL))


@pytest.mark.slow
def test_zero_amplitude_gives_alpha():
    cfg = ExperimentConfig(
        rows=((128, 4, 16),), signal=SignalSpec(C=0.0),
        n_calibration_trials=4000, n_power_trials=4000, seed=11,
    )
    table = run_power_experiment(cfg)
    for d in DEFAULT_DETECTORS:
        # difference of two independent binomial estimates around 0.05
        assert abs(table.rows[0].cells[d].power - 0.05) <= 0.015


def test_deterministic_across_workers(tmp_path):
    cfg = small_config(n_calibration_trials=60, n_power_trials=30, alpha=0.2)
    a = run_power_experiment(cfg, workers=1)
    b = run_power_experiment(cfg, workers=2)
    a.write_csv(tmp_path / "a.csv")
    b.write_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert np.array_equal(a.rows[1].alt_statistics, b.rows[1].alt_statistics)


def test_row_failure_is_isolated(monkeypatch, tmp_path):
    real = harness._row_plan

    def flaky(config, row_index):
        if row_index == 0:
            raise RuntimeError("boom")
        return real(config, row_index)

    monkeypatch.setattr(harness, "_row_plan", flaky)
    table = run_power_experiment(small_config(n_calibration_trials=50, n_power_trials=20, alpha=0.2))
    assert table.rows[0].error == "RuntimeError: boom" and not table.rows[0].cells
    assert table.rows[1].error is None and len(table.rows[1].cells) == 4
    table.write_csv(tmp_path / "t.csv")
    rows = read_csv(tmp_path / "t.csv")
    assert rows[1][-1] == "RuntimeError: boom" and rows[1][4] == ""
    assert rows[5][-1] == ""


def test_budget_counts_completed_trials(monkeypatch):
    real = harness.aggregate_statistics

    def sometimes(block, *args, **kw):
        if block.seed[2] == harness.H1 and block.seed[3] % 4 == 0:
            raise FloatingPointError("injected")
        return real(block, *args, **kw)

    monkeypatch.setattr(harness, "aggregate_statistics", sometimes)
    cfg = small_config(rows=SMALL[:1], n_calibration_trials=50, n_power_trials=20, alpha=0.2)
    row = run_power_experiment(cfg).rows[0]
    assert row.error is None
    assert all(c.n_trials == 15 for c in row.cells.values())
    assert len(row.trial_errors) == 5 and "injected" in row.trial_errors[0]
    assert np.isnan(row.alt_statistics[0]).all()


def test_type1_column():
    cfg = small_config(rows=SMALL[:1], n_calibration_trials=100, n_power_trials=10, n_type1_trials=50, alpha=0.1)
    row = run_power_experiment(cfg).rows[0]
    for cell in row.cells.values():
        assert cell.n_type1 == 50 and 0 <= cell.type1 <= 1
    assert row.fresh_statistics.shape == (50, 4)


def test_seed_isolation():
    cfg = ExperimentConfig(rows=((128, 4, 16),), signal=SignalSpec(C=0.0), n_calibration_trials=1000,
                           n_power_trials=0, seed=5, detectors=("le1",))
    s = run_power_experiment(cfg).rows[0].null_statistics[:, 0]
    # lag-1 correlation between consecutive trials and across hypotheses
    r = np.corrcoef(s[:-1], s[1:])[0, 1]
    assert abs(r) < 4 / np.sqrt(s.size)
    assert np.unique(s).size == s.size


def test_fir_filters_redrawn_per_trial_unless_fixed():
    spec = SignalSpec("fir_random_sphere", target_gamma=2.0, ratios=(1.0, 0.0), L=2)
    cfg = small_config(rows=SMALL[:1], signal=spec)
    plan = harness._row_plan(cfg, 0)
    a = harness._resolve_signal(plan, (3, 0, 1, 0))
    b = harness._resolve_signal(plan, (3, 0, 1, 1))
    assert isinstance(a, FirRandomSphere)
    assert not np.allclose(a.taps(6), b.taps(6))
    fixed = harness._row_plan(small_config(rows=SMALL[:1], signal=SignalSpec(
        "fir_random_sphere", target_gamma=2.0, ratios=(1.0, 0.0), L=2, fixed_filter=True)), 0)
    a = harness._resolve_signal(fixed, (3, 0, 1, 0))
    b = harness._resolve_signal(fixed, (3, 0, 1, 1))
    assert np.array_equal(a.taps(6), b.taps(6))
    # per-trial amplitude puts the peak of gamma_1 + gamma_2 on the target
    from scmdetect.rmt import gamma_spectrum
    from scmdetect.spectral import FrequencyGrid

    g = gamma_spectrum(plan.noise, a, FrequencyGrid(256), k_max=2)
    assert g.peak_sum() == pytest.approx(2.0, rel=1e-9)


# ---------------------------------------------------------------- studies


def test_spike_study_outputs(tmp_path):
    cfg = ExperimentConfig(rows=((512, 8, 32),), signal=SignalSpec(target_gamma=2.0), seed=2)
    st = run_spike_study(cfg, n_reps=4)
    assert st.freq_index == 0 and st.gamma_star == pytest.approx(2.0)
    c = 8 / 33
    assert st.phi_star == pytest.approx(3.0 * (2.0 + c) / 2.0)
    assert st.lambda1.shape == (4,)
    st.write_csv(tmp_path / "s.csv")
    rows = read_csv(tmp_path / "s.csv")
    assert rows[0] == ["rep", "freq_index", "nu_star", "lambda1", "phi_gamma"]
    assert [r[0] for r in rows[1:]] == ["0", "1", "2", "3", "mean", "std"]
    st.write_curve_csv(tmp_path / "c.csv")
    curve = read_csv(tmp_path / "c.csv")
    assert len(curve) == 1 + 512
    assert float(curve[1][5]) == pytest.approx(mp_edges(c)[1])
    # the rep-0 curve at nu* equals the rep-0 spike value
    assert float(curve[1][2]) == pytest.approx(st.lambda1[0], rel=1e-8)


def test_spike_study_zero_reps(tmp_path):
    cfg = ExperimentConfig(rows=((512, 8, 32),), signal=SignalSpec(target_gamma=2.0))
    st = run_spike_study(cfg, n_reps=0)
    st.write_csv(tmp_path / "s.csv")
    assert [r[0] for r in read_csv(tmp_path / "s.csv")[1:]] == ["mean", "std"]


def test_mpfit_smoke(tmp_path):
    cfg = ExperimentConfig(rows=((256, 4, 16),), seed=1)
    st = run_mpfit_study(cfg, n_reps=3)
    assert st.sup_distances.shape == (3,)
    cv = st.curves
    for f in (cv.f_min, cv.f_max, cv.mp):
        assert np.all(np.diff(f) >= -1e-12)
        assert f[-1] == pytest.approx(1.0)
    assert np.all(cv.f_min <= cv.f_max)
    st.write_csv(tmp_path / "m.csv")
    assert read_csv(tmp_path / "m.csv")[0] == ["rep", "sup_distance"]


def test_mpfit_exclude_spikes_drops_top_eigenvalue():
    sig = SignalSpec(C=0.5)
    a = run_mpfit_study(ExperimentConfig(rows=((256, 4, 16),), signal=sig, seed=1), n_reps=1)
    b = run_mpfit_study(ExperimentConfig(rows=((256, 4, 16),), signal=sig, seed=1, exclude_spikes=True), n_reps=1)
    # with one eigenvalue per frame removed the staircase has steps of 1/3
    assert set(np.round(b.curves.f_max * 3, 9)) <= {0.0, 1.0, 2.0, 3.0}
    assert set(np.round(a.curves.f_max * 4, 9)) <= {0.0, 1.0, 2.0, 3.0, 4.0}


def test_histogram_zero_reps(tmp_path):
    st = run_histogram_study(ExperimentConfig(rows=((256, 4, 16),), signal=SignalSpec(C=0.05)), n_reps=0)
    st.write_csv(tmp_path / "h.csv")
    st.write_samples_csv(tmp_path / "s.csv")
    assert read_csv(tmp_path / "h.csv") == [["bin_left", "bin_right", "count_h0", "count_h1"]]
    assert read_csv(tmp_path / "s.csv") == [["rep", "statistic_h0", "statistic_h1"]]


def test_histogram_bins():
    st = HistogramStudy(np.array([1.01, 1.02, 1.07]), np.array([1.12, np.nan, 1.02]))
    edges, c0, c1 = st.bins()
    assert np.allclose(edges, [1.0, 1.05, 1.1, 1.15])
    assert c0.tolist() == [2, 1, 0] and c1.tolist() == [1, 0, 1]


@pytest.mark.slow
def test_histogram_zero_signal_same_law():
    cfg = ExperimentConfig(rows=((128, 4, 16),), signal=SignalSpec(C=0.0), seed=4)
    st = run_histogram_study(cfg, n_reps=2000)
    assert stats.ks_2samp(st.h0, st.h1).pvalue > 0.01


def test_histogram_separates_hypotheses():
    cfg = ExperimentConfig(rows=((1000, 10, 20),), signal=SignalSpec(target_gamma=3.0), seed=4)
    st = run_histogram_study(cfg, n_reps=30)
    assert np.median(st.h1) > np.median(st.h0)
    assert st.threshold == pytest.approx(mp_edges(10 / 21)[1])


def test_manifest(tmp_path):
    cfg = small_config()
    write_manifest(tmp_path / "m.json", cfg, "ok", ["a.csv"], 1.5, 2, {"note": 1})
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["status"] == "ok" and doc["config_digest"] == cfg.digest()
    assert doc["seed"] == 3 and doc["outputs"] == ["a.csv"] and doc["note"] == 1
    write_manifest(tmp_path / "n.json", None, "failed")
    assert json.loads((tmp_path / "n.json").read_text())["status"] == "failed"


def test_row_subset_keeps_row_seeds():
    cfg = small_config(n_calibration_trials=40, n_power_trials=10, alpha=0.25)
    full = run_power_experiment(cfg)
    part = run_power_experiment(cfg, row_indices=[1])
    assert len(part.rows) == 1 and part.rows[0].M == 8
    assert np.array_equal(part.rows[0].null_statistics, full.rows[1].null_statistics)
    assert np.array_equal(part.rows[0].alt_statistics, full.rows[1].alt_statistics)
