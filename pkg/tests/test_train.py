import numpy as np
import pytest

import ledsense.train as train_mod
from ledsense.data import Split, build_synthetic_dataset, load_object_stack, split
from ledsense.errors import TrainingDivergedError, ValidationError
from ledsense.optics import MicroscopeConfig, pupil_support
from ledsense.train import (
    Hyperparams,
    Metrics,
    Regime,
    RunSummary,
    evaluate,
    init_physical,
    project_constraints,
    run_sweep,
    train_regime,
    write_summary_csv,
)


class TestRegime:
    def test_flags(self):
        assert not Regime.DO.train_pupil and not Regime.DO.train_illumination
        assert Regime.PO.train_pupil and not Regime.PO.train_illumination
        assert not Regime.IO.train_pupil and Regime.IO.train_illumination
        assert Regime.PIO.train_pupil and Regime.PIO.train_illumination

    def test_from_name(self):
        assert Regime.from_name("pio") is Regime.PIO
        with pytest.raises(ValidationError) as err:
            Regime.from_name("XX")
        assert "DO" in str(err.value) and "PIO" in str(err.value)


class TestHyperparams:
    def test_validation(self):
        with pytest.raises(ValidationError):
            Hyperparams(batch_size=0)
        with pytest.raises(ValidationError):
            Hyperparams(epochs=0)
        with pytest.raises(ValidationError):
            Hyperparams(noise_sigma_frac=-0.1)
        with pytest.raises(ValidationError):
            Hyperparams(digital_lr=-1)
        Hyperparams(physical_lr=0.0)  # zero disables the physical optimizer


class TestMetrics:
    def test_formulas(self):
        m = Metrics(tp=95, fn=5, tn=98, fp=2)
        assert m.sensitivity == pytest.approx(95.0)
        assert m.specificity == pytest.approx(98.0)
        assert m.accuracy == pytest.approx(96.5)

    def test_perfect_predictor(self):
        labels = np.array([0, 1] * 10)
        m = Metrics.from_predictions(labels, labels.copy())
        assert (m.accuracy, m.sensitivity, m.specificity) == (100.0, 100.0, 100.0)

    def test_constant_predictor_on_balanced_split(self):
        labels = np.array([0, 1] * 10)
        m = Metrics.from_predictions(labels, np.zeros(20, int))
        assert m.accuracy == 50.0
        assert m.sensitivity == 0.0
        assert m.specificity == 100.0

    def test_single_class_marker_not_nan(self):
        m = Metrics.from_predictions(np.zeros(5, int), np.zeros(5, int))
        assert m.sensitivity is None
        assert m.specificity == 100.0


class _ConstantModel:
    """Evaluation stub: always predicts class 0 regardless of the capture."""

    def forward_batch(self, images):
        out = np.zeros((images.shape[0], 2))
        out[:, 0] = 0.9
        out[:, 1] = 0.1
        return out


class TestEvaluate:
    def test_constant_predictor_metrics(self, micro_dataset, micro_config):
        params = init_physical(Regime.DO, micro_config, np.random.default_rng(0))
        m = evaluate(_ConstantModel(), params, micro_dataset, Split.TEST, micro_config)
        labels = [micro_dataset.records[i].label
                  for i in micro_dataset.split_indices(Split.TEST)]
        assert m.accuracy == pytest.approx(100.0 * labels.count(0) / len(labels))
        assert m.sensitivity == 0.0
        assert m.specificity == 100.0

    def test_single_class_subset(self, micro_dataset, micro_config):
        params = init_physical(Regime.DO, micro_config, np.random.default_rng(0))
        idx = [i for i, r in enumerate(micro_dataset.records) if r.label == 0][:6]
        m = evaluate(_ConstantModel(), params, micro_dataset, idx, micro_config)
        assert m.sensitivity is None and m.specificity == 100.0

    def test_empty_split_rejected(self, micro_dataset, micro_config):
        params = init_physical(Regime.DO, micro_config, np.random.default_rng(0))
        with pytest.raises(ValidationError):
            evaluate(_ConstantModel(), params, micro_dataset, [], micro_config)


class TestInitPhysical:
    def test_do_exact_defaults(self, micro_config):
        p = init_physical(Regime.DO, micro_config, np.random.default_rng(0))
        expected_w = np.zeros(micro_config.n_leds)
        expected_w[0] = 1.0
        np.testing.assert_array_equal(p.led_weights, expected_w)
        np.testing.assert_array_equal(p.pupil, pupil_support(micro_config).astype(float))

    def test_io_jitters_weights_only(self, micro_config):
        p = init_physical(Regime.IO, micro_config, np.random.default_rng(0))
        np.testing.assert_array_equal(p.pupil, pupil_support(micro_config).astype(float))
        base = np.zeros(micro_config.n_leds)
        base[0] = 1.0
        d = p.led_weights - base
        assert np.all(np.abs(d) <= 0.01 + 1e-12)
        assert np.any(d != 0)

    def test_po_jitters_pupil_only(self, micro_config):
        p = init_physical(Regime.PO, micro_config, np.random.default_rng(0))
        base = np.zeros(micro_config.n_leds)
        base[0] = 1.0
        np.testing.assert_array_equal(p.led_weights, base)
        support = pupil_support(micro_config)
        assert np.any(p.pupil[support] != 1.0)
        assert np.all(p.pupil[~support] == 0.0)

    def test_pio_jitters_both(self, micro_config):
        p = init_physical(Regime.PIO, micro_config, np.random.default_rng(0))
        assert np.any(p.led_weights != 0)
        support = pupil_support(micro_config)
        assert np.any(p.pupil[support] != 1.0)
        p.validate()  # feasible after projection

    def test_deterministic(self, micro_config):
        a = init_physical(Regime.PIO, micro_config, np.random.default_rng(3))
        b = init_physical(Regime.PIO, micro_config, np.random.default_rng(3))
        np.testing.assert_array_equal(a.led_weights, b.led_weights)
        np.testing.assert_array_equal(a.pupil, b.pupil)


class TestProjectConstraints:
    def test_clamps(self, micro_config):
        p = init_physical(Regime.DO, micro_config, np.random.default_rng(0))
        p.led_weights[0] = 1.7
        p.led_weights[1] = -3.0
        p.pupil[p.pupil_support][0]  # noqa: B018
        inside = np.argwhere(p.pupil_support)[0]
        p.pupil[tuple(inside)] = -0.2
        project_constraints(p)
        assert p.led_weights[0] == 1.0
        assert p.led_weights[1] == -1.0
        assert p.pupil[tuple(inside)] == 0.0
        p.validate()

    def test_zeroes_outside_support(self, micro_config):
        p = init_physical(Regime.DO, micro_config, np.random.default_rng(0))
        outside = np.argwhere(~p.pupil_support)[0]
        p.pupil[tuple(outside)] = 0.5
        project_constraints(p)
        assert p.pupil[tuple(outside)] == 0.0

    def test_idempotent(self, micro_config):
        p = init_physical(Regime.PIO, micro_config, np.random.default_rng(1))
        once = project_constraints(p.copy())
        twice = project_constraints(once.copy())
        np.testing.assert_array_equal(once.led_weights, twice.led_weights)
        np.testing.assert_array_equal(once.pupil, twice.pupil)


def micro_hyper(**kw):
    defaults = dict(digital_lr=1e-3, physical_lr=1e-2, batch_size=8, epochs=2,
                    noise_sigma_frac=0.01, seed=0)
    defaults.update(kw)
    return Hyperparams(**defaults)


class TestTrainRegime:
    @pytest.mark.parametrize("regime", list(Regime))
    def test_freeze_and_projection_contracts(self, regime, micro_dataset, micro_config):
        frozen_snapshots = {}

        def on_step(step, params):
            if step == 0:
                frozen_snapshots["w"] = params.led_weights.copy()
                frozen_snapshots["p"] = params.pupil.copy()
            if not regime.train_illumination:
                assert params.led_weights.tobytes() == frozen_snapshots["w"].tobytes()
            if not regime.train_pupil:
                assert params.pupil.tobytes() == frozen_snapshots["p"].tobytes()
            assert params.led_weights.min() >= -1 and params.led_weights.max() <= 1
            assert params.pupil.min() >= 0 and params.pupil.max() <= 1
            assert np.all(params.pupil[~params.pupil_support] == 0)

        train_regime(regime, micro_dataset, micro_config, micro_hyper(), on_step=on_step)

    def test_io_pupil_bitwise_unchanged(self, micro_dataset, micro_config):
        result = train_regime(Regime.IO, micro_dataset, micro_config, micro_hyper())
        expected = pupil_support(micro_config).astype(float)
        assert result.params.pupil.tobytes() == expected.tobytes()

    def test_pio_zero_physical_lr_keeps_init(self, micro_dataset, micro_config):
        result = train_regime(
            Regime.PIO, micro_dataset, micro_config, micro_hyper(physical_lr=0.0)
        )
        expected = init_physical(Regime.PIO, micro_config, np.random.default_rng(0))
        assert result.params.led_weights.tobytes() == expected.led_weights.tobytes()
        assert result.params.pupil.tobytes() == expected.pupil.tobytes()

    def test_reproducible(self, micro_dataset, micro_config):
        a = train_regime(Regime.IO, micro_dataset, micro_config, micro_hyper())
        b = train_regime(Regime.IO, micro_dataset, micro_config, micro_hyper())
        assert a.metrics["test"].to_dict() == b.metrics["test"].to_dict()
        assert a.params.led_weights.tobytes() == b.params.led_weights.tobytes()
        assert a.history == b.history

    def test_history_and_fractions(self, micro_dataset, micro_config):
        r = train_regime(Regime.PO, micro_dataset, micro_config, micro_hyper())
        assert len(r.history) == 2
        assert all(np.isfinite(h["train_loss"]) for h in r.history)
        assert 0.0 <= r.pupil_transmission <= 1.0
        assert 0.0 <= r.led_emission <= 1.0

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reported(self, micro_dataset, micro_config):
        with pytest.raises(TrainingDivergedError) as err:
            train_regime(
                Regime.DO, micro_dataset, micro_config,
                micro_hyper(digital_lr=1e18, epochs=3),
            )
        assert err.value.diagnostics["grad_norms"]["digital"] >= 0


class TestRunSweep:
    def test_counts_and_summary(self, micro_dataset, micro_config, tmp_path):
        summaries = run_sweep(
            ["DO", "IO"], 2, micro_dataset, micro_config, micro_hyper(),
            ratios=(0.6, 0.2, 0.2), split_seed=5, out_dir=tmp_path,
        )
        assert len(summaries) == 2
        assert all(s.n_seeds == 2 for s in summaries)
        csv_text = (tmp_path / "summary.csv").read_text()
        assert csv_text.splitlines()[0].startswith("regime,")
        assert len(csv_text.splitlines()) == 3
        assert (tmp_path / "DO" / "seed0000" / "run.json").exists()
        assert (tmp_path / "DO" / "seed0000" / "pupil.f32").exists()
        assert (tmp_path / "DO" / "seed0000" / "checkpoint" / "checkpoint.json").exists()

    def test_mean_matches_recomputation(self, micro_dataset, micro_config):
        summaries = run_sweep(["DO"], 2, micro_dataset, micro_config, micro_hyper())
        s = summaries[0]
        accs = [e["metrics"].accuracy for e in s.per_seed]
        mean, _ = s.stat("accuracy")
        assert abs(mean - float(np.mean(accs))) < 1e-12

    def test_min_seeds(self, micro_dataset, micro_config):
        with pytest.raises(ValidationError):
            run_sweep(["DO"], 1, micro_dataset, micro_config, micro_hyper())

    def test_identical_metrics_zero_std(self):
        m = Metrics(tp=10, tn=10, fp=0, fn=0)
        s = RunSummary(
            regime=Regime.DO,
            per_seed=[{"seed": 0, "metrics": m}, {"seed": 1, "metrics": m}],
        )
        mean, std = s.stat("accuracy")
        assert mean == 100.0 and std == 0.0

    def test_failed_runs_excluded_and_flagged(self, micro_dataset, micro_config,
                                              tmp_path, monkeypatch):
        real = train_mod.train_regime

        def flaky(regime, *args, **kwargs):
            if regime is Regime.IO:
                raise RuntimeError("injected failure")
            return real(regime, *args, **kwargs)

        monkeypatch.setattr(train_mod, "train_regime", flaky)
        summaries = train_mod.run_sweep(
            ["DO", "IO"], 2, micro_dataset, micro_config, micro_hyper(),
            out_dir=tmp_path,
        )
        by_regime = {s.regime: s for s in summaries}
        assert by_regime[Regime.DO].n_seeds == 2
        assert by_regime[Regime.IO].n_seeds == 0
        assert len(by_regime[Regime.IO].failures) == 2
        text = (tmp_path / "summary.csv").read_text()
        assert "# partial" in text

    def test_summary_bytes_reproducible(self, micro_dataset, micro_config, tmp_path):
        for d in ("a", "b"):
            run_sweep(
                ["DO", "PO"], 2, micro_dataset, micro_config, micro_hyper(),
                out_dir=tmp_path / d, meta={"config_hash": "deadbeef"},
            )
        assert (tmp_path / "a" / "summary.csv").read_bytes() == (
            tmp_path / "b" / "summary.csv"
        ).read_bytes()


class TestDeskScaleSmoke:
    def test_do_beats_chance_on_small_desk_dataset(self, tmp_path):
        config = MicroscopeConfig()  # full desk geometry: grid 256, 25 LEDs
        build_synthetic_dataset(10, 8, config.grid_n, seed=17, out_dir=tmp_path,
                                canvas_n=64)
        ds = load_object_stack(tmp_path)
        split(ds, (0.7, 0.15, 0.15), seed=2)
        hyper = Hyperparams(epochs=30, batch_size=16, seed=1)
        result = train_regime(Regime.DO, ds, config, hyper)
        assert result.metrics["test"].accuracy > 50.0
