"""Training harness: the four optimization regimes, metrics and seed sweeps.

A regime decides which physical parameter groups (LED weights, pupil mask)
are trained jointly with the CNN.  Every run is a deterministic function of
(regime, seed, hyperparameters, dataset); frozen groups are never written to.
"""

from __future__ import annotations

import enum
import json
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, Split, load_object_stack, split as split_dataset
from .engine import CaptureEngine
from .errors import GeometryError, NumericError, TrainingDivergedError, ValidationError
from .nn import Adam, DigitalModel, Tensor, init_params, save_checkpoint
from .optics import (
    MicroscopeConfig,
    PhysicalParams,
    build_led_array,
    pupil_support,
)

EVAL_SEED_STRIDE = 1_000_003  # eval noise stream: seed * stride + 17


class Regime(enum.Enum):
    DO = "DO"
    PO = "PO"
    IO = "IO"
    PIO = "PIO"

    @property
    def train_pupil(self) -> bool:
        return self in (Regime.PO, Regime.PIO)

    @property
    def train_illumination(self) -> bool:
        return self in (Regime.IO, Regime.PIO)

    @classmethod
    def from_name(cls, name: str) -> "Regime":
        try:
            return cls(name.upper())
        except ValueError:
            valid = ", ".join(r.value for r in cls)
            raise ValidationError(f"unknown regime {name!r}; valid regimes: {valid}") from None


@dataclass(frozen=True)
class Hyperparams:
    digital_lr: float = 1e-3
    physical_lr: float = 1e-2
    batch_size: int = 16
    epochs: int = 30
    noise_sigma_frac: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.digital_lr < 0 or self.physical_lr < 0:
            raise ValidationError("learning rates must be >= 0 (0 disables the group)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValidationError("batch_size and epochs must be >= 1")
        if self.noise_sigma_frac < 0:
            raise ValidationError("noise_sigma_frac must be >= 0")

    def to_dict(self):
        return {
            "digital_lr": self.digital_lr,
            "physical_lr": self.physical_lr,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "noise_sigma_frac": self.noise_sigma_frac,
            "seed": self.seed,
        }


@dataclass
class Metrics:
    """Confusion counts and derived percentage rates (class 1 = positive)."""

    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def accuracy(self) -> float:
        total = self.tp + self.tn + self.fp + self.fn
        return 100.0 * (self.tp + self.tn) / total

    @property
    def sensitivity(self) -> float | None:
        pos = self.tp + self.fn
        return 100.0 * self.tp / pos if pos else None

    @property
    def specificity(self) -> float | None:
        neg = self.tn + self.fp
        return 100.0 * self.tn / neg if neg else None

    @classmethod
    def from_predictions(cls, labels: np.ndarray, preds: np.ndarray) -> "Metrics":
        labels = np.asarray(labels)
        preds = np.asarray(preds)
        return cls(
            tp=int(np.sum((labels == 1) & (preds == 1))),
            tn=int(np.sum((labels == 0) & (preds == 0))),
            fp=int(np.sum((labels == 0) & (preds == 1))),
            fn=int(np.sum((labels == 1) & (preds == 0))),
        )

    def to_dict(self):
        return {
            "tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn,
            "accuracy": self.accuracy,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
        }


@dataclass
class RunResult:
    regime: Regime
    seed: int
    metrics: dict[str, Metrics]
    params: PhysicalParams
    model: DigitalModel
    history: list[dict]
    eval_seed: int
    pupil_transmission: float
    led_emission: float


@dataclass
class RunSummary:
    regime: Regime
    per_seed: list[dict]  # {"seed", "metrics": Metrics, ...}
    failures: list[dict] = field(default_factory=list)

    @property
    def n_seeds(self) -> int:
        return len(self.per_seed)

    def stat(self, name: str) -> tuple[float | None, float | None]:
        """(mean, sample std) of a metric over seeds; None if any is undefined."""
        vals = [getattr(e["metrics"], name) for e in self.per_seed]
        if not vals or any(v is None for v in vals):
            return None, None
        mean = float(np.mean(vals))
        std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        return mean, std


# -- physical initialization -----------------------------------------------------


def init_physical(regime: Regime, config: MicroscopeConfig,
                  rng: np.random.Generator) -> PhysicalParams:
    """Default physical layer: center LED on, clear pupil.

    Trainable groups receive +-0.01 uniform jitter to break symmetry; frozen
    groups keep the exact defaults.
    """
    leds = build_led_array(config)
    center = next((i for i, led in enumerate(leds) if led.shift_px == (0, 0)), None)
    if center is None:
        raise GeometryError("LED array has no axial (zero-shift) LED for the default pattern")
    weights = np.zeros(len(leds), dtype=np.float64)
    weights[center] = 1.0
    support = pupil_support(config)
    pupil = support.astype(np.float64)
    if regime.train_illumination:
        weights += rng.uniform(-0.01, 0.01, size=weights.shape)
    if regime.train_pupil:
        pupil[support] += rng.uniform(-0.01, 0.01, size=int(support.sum()))
    params = PhysicalParams(led_weights=weights, pupil=pupil, pupil_support=support)
    return project_constraints(params)


def project_constraints(params: PhysicalParams) -> PhysicalParams:
    """Clamp weights to [-1, 1] and the pupil to [0, 1] on its support; idempotent."""
    np.clip(params.led_weights, -1.0, 1.0, out=params.led_weights)
    np.clip(params.pupil, 0.0, 1.0, out=params.pupil)
    params.pupil[~params.pupil_support] = 0.0
    return params


# -- evaluation -------------------------------------------------------------------


def evaluate(
    model: DigitalModel,
    params: PhysicalParams,
    dataset: Dataset,
    which: Split | list[int],
    config: MicroscopeConfig,
    noise_sigma_frac: float = 0.0,
    rng: np.random.Generator | None = None,
    engine: CaptureEngine | None = None,
    batch_size: int = 64,
) -> Metrics:
    """Argmax classification metrics over one split (or explicit indices)."""
    indices = dataset.split_indices(which) if isinstance(which, Split) else list(which)
    if not indices:
        raise ValidationError("cannot evaluate an empty split")
    if engine is None:
        engine = CaptureEngine(config, build_led_array(config))
    if rng is None:
        rng = np.random.default_rng(0)
    labels = np.array([dataset.records[i].label for i in indices])
    preds = np.empty(len(indices), dtype=int)
    for k in range(0, len(indices), batch_size):
        chunk = np.asarray(indices[k : k + batch_size])
        objs = dataset.batch_objects(chunk)
        captures, _ = engine.forward_batch(
            objs, params, noise_sigma_frac, rng, sample_indices=chunk
        )
        probs = model.forward_batch(captures)
        preds[k : k + len(chunk)] = probs.argmax(axis=1)
    return Metrics.from_predictions(labels, preds)


# -- training ----------------------------------------------------------------------


def _grad_norms(model: DigitalModel, groups: dict[str, Tensor]) -> dict[str, float]:
    out = {}
    total = 0.0
    for t in model.params().values():
        if t.grad is not None:
            total += float(np.sum(t.grad.astype(np.float64) ** 2))
    out["digital"] = math.sqrt(total)
    for name, t in groups.items():
        if t.grad is not None:
            out[name] = float(np.linalg.norm(t.grad))
    return out


def train_regime(
    regime: Regime,
    dataset: Dataset,
    config: MicroscopeConfig,
    hyper: Hyperparams,
    eval_noise: bool = True,
    on_step=None,
    dtype=np.float32,
    cache_budget_bytes: float = 3e9,
) -> RunResult:
    """Train one (regime, seed) job end to end and return the restored-best run.

    Per step: simulate captures, CNN forward/backward, Adam on the digital
    layers, then (for trainable physical groups) chain the input gradient
    into weight/pupil gradients, Adam, and constraint projection.  The
    checkpoint with the best validation accuracy (earliest epoch on ties) is
    restored before the final evaluation.
    """
    regime = Regime(regime)
    train_idx = dataset.split_indices(Split.TRAIN)
    val_idx = dataset.split_indices(Split.VAL)
    test_idx = dataset.split_indices(Split.TEST)
    if not train_idx or not val_idx or not test_idx:
        raise ValidationError("dataset must have non-empty train/val/test splits")

    rng = np.random.default_rng(hyper.seed)
    eval_seed = hyper.seed * EVAL_SEED_STRIDE + 17
    params = init_physical(regime, config, rng)
    cdtype = np.complex128 if np.dtype(dtype) == np.float64 else np.complex64
    model = init_params(hyper.seed, sensor_n=config.sensor_n, dtype=dtype)
    leds = build_led_array(config)
    engine = CaptureEngine(
        config, leds, dtype=cdtype,
        cache_samples=len(dataset), cache_budget_bytes=cache_budget_bytes,
    )
    if not regime.train_pupil:
        cached_leds = (
            np.arange(len(leds)) if regime.train_illumination
            else np.flatnonzero(params.led_weights != 0)
        )
        engine.enable_cache(cached_leds)

    digital_opt = Adam(model.params(), lr=hyper.digital_lr) if hyper.digital_lr > 0 else None
    groups: dict[str, Tensor] = {}
    if regime.train_illumination:
        groups["led_weights"] = Tensor(params.led_weights)
    if regime.train_pupil:
        groups["pupil"] = Tensor(params.pupil)
    phys_opt = Adam(groups, lr=hyper.physical_lr) if groups and hyper.physical_lr > 0 else None

    labels = np.array([r.label for r in dataset.records])
    sigma = hyper.noise_sigma_frac
    sigma_eval = sigma if eval_noise else 0.0
    best_acc = -1.0
    best_state = None
    history = []
    step = 0
    train_idx = np.asarray(train_idx)

    for epoch in range(hyper.epochs):
        perm = rng.permutation(train_idx)
        losses = []
        for k in range(0, len(perm), hyper.batch_size):
            batch = perm[k : k + hyper.batch_size]
            objs = dataset.batch_objects(batch)
            captures, aux = engine.forward_batch(
                objs, params, sigma, rng,
                need_weight_grads=regime.train_illumination and phys_opt is not None,
                need_pupil_grads=regime.train_pupil and phys_opt is not None,
                sample_indices=batch,
            )
            model.zero_grad()
            try:
                loss, dinput = model.backward_batch(captures, labels[batch])
            except NumericError:
                loss = float("nan")
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} step {step}",
                    epoch=epoch, step=step,
                    diagnostics={
                        "digital_lr": hyper.digital_lr,
                        "physical_lr": hyper.physical_lr,
                        "grad_norms": _grad_norms(model, groups),
                    },
                )
            if digital_opt is not None:
                digital_opt.step()
            if phys_opt is not None:
                if regime.train_illumination:
                    groups["led_weights"].grad = engine.weight_grads(aux, dinput)
                if regime.train_pupil:
                    groups["pupil"].grad = engine.pupil_grad(aux, dinput, params)
                phys_opt.step()
                project_constraints(params)
            if on_step is not None:
                on_step(step, params)
            losses.append(loss)
            step += 1
        val_metrics = evaluate(
            model, params, dataset, Split.VAL, config,
            noise_sigma_frac=sigma_eval,
            rng=np.random.default_rng(eval_seed), engine=engine,
        )
        history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)) if losses else None,
                "val_accuracy": val_metrics.accuracy,
            }
        )
        if val_metrics.accuracy > best_acc:
            best_acc = val_metrics.accuracy
            best_state = (model.snapshot(), params.copy())

    model.load_state_arrays(best_state[0])
    params = best_state[1]
    metrics = {
        name: evaluate(
            model, params, dataset, part, config,
            noise_sigma_frac=sigma_eval,
            rng=np.random.default_rng(eval_seed), engine=engine,
        )
        for name, part in (("train", Split.TRAIN), ("val", Split.VAL), ("test", Split.TEST))
    }
    support = params.pupil_support
    return RunResult(
        regime=regime,
        seed=hyper.seed,
        metrics=metrics,
        params=params,
        model=model,
        history=history,
        eval_seed=eval_seed,
        pupil_transmission=float(np.mean(params.pupil[support] ** 2)),
        led_emission=float(np.mean(np.abs(params.led_weights))),
    )


# -- sweeps -----------------------------------------------------------------------


def _persist_run(run_dir: Path, result: RunResult, hyper: Hyperparams, meta: dict):
    run_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, run_dir / "checkpoint")
    result.params.pupil.astype("<f4").tofile(run_dir / "pupil.f32")
    payload = {
        "status": "ok",
        "regime": result.regime.value,
        "seed": result.seed,
        "eval_seed": result.eval_seed,
        "hyperparams": hyper.to_dict(),
        "metrics": {k: m.to_dict() for k, m in result.metrics.items()},
        "history": result.history,
        "pupil_transmission": result.pupil_transmission,
        "led_emission": result.led_emission,
        "led_weights": result.params.led_weights.tolist(),
        "pupil_shape": list(result.params.pupil.shape),
        **meta,
    }
    (run_dir / "run.json").write_text(json.dumps(payload, indent=1, sort_keys=True))


def _run_job(args) -> dict:
    """One (regime, seed) job; used directly and via worker processes."""
    (regime_name, seed, dataset_dir, ratios, split_seed, config, hyper_dict,
     eval_noise, out_dir, meta, cache_budget) = args
    hyper = Hyperparams(**{**hyper_dict, "seed": seed})
    dataset = load_object_stack(dataset_dir)
    split_dataset(dataset, ratios, split_seed)
    regime = Regime.from_name(regime_name)
    result = train_regime(
        regime, dataset, config, hyper,
        eval_noise=eval_noise, cache_budget_bytes=cache_budget,
    )
    out = {
        "regime": regime.value,
        "seed": seed,
        "status": "ok",
        "metrics": {k: m.to_dict() for k, m in result.metrics.items()},
        "led_weights": result.params.led_weights.tolist(),
        "pupil_transmission": result.pupil_transmission,
        "led_emission": result.led_emission,
    }
    if out_dir is not None:
        run_dir = Path(out_dir) / regime.value / f"seed{seed:04d}"
        _persist_run(run_dir, result, hyper, meta)
        out["run_dir"] = str(run_dir)
    return out


def run_sweep(
    regimes: list[Regime | str],
    n_seeds: int,
    dataset: Dataset | None,
    config: MicroscopeConfig,
    hyper: Hyperparams,
    ratios: tuple[float, float, float] = (0.7, 0.15, 0.15),
    split_seed: int = 1,
    dataset_dir: str | Path | None = None,
    out_dir: str | Path | None = None,
    workers: int = 1,
    eval_noise: bool = True,
    meta: dict | None = None,
    cache_budget_bytes: float = 3e9,
    base_seed: int | None = None,
) -> list[RunSummary]:
    """Independent (regime, seed) runs with mean +- sample-std aggregation.

    Failed runs are recorded, excluded from the aggregates and flagged in the
    summary.  Seeds are ``base_seed + k`` (base defaults to ``hyper.seed``).
    """
    if n_seeds < 2:
        raise ValidationError(f"n_seeds must be >= 2, got {n_seeds}")
    regimes = [Regime.from_name(r) if isinstance(r, str) else r for r in regimes]
    if base_seed is None:
        base_seed = hyper.seed
    seeds = [base_seed + k for k in range(n_seeds)]
    meta = meta or {}

    if dataset is None:
        if dataset_dir is None:
            raise ValidationError("run_sweep needs a dataset or dataset_dir")
        dataset = load_object_stack(dataset_dir)
    if workers > 1 and dataset_dir is None:
        raise ValidationError("parallel sweeps need dataset_dir (workers reload the data)")

    jobs = [
        (r.value, s, str(dataset_dir) if dataset_dir else None, tuple(ratios), split_seed,
         config, {k: v for k, v in hyper.to_dict().items() if k != "seed"},
         eval_noise, str(out_dir) if out_dir else None, meta, cache_budget_bytes)
        for r in regimes
        for s in seeds
    ]

    results: dict[tuple[str, int], dict] = {}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for job, res in zip(jobs, pool.map(_run_job_safe, jobs)):
                results[(job[0], job[1])] = res
    else:
        # reuse the already-loaded dataset instead of reloading per job
        split_dataset(dataset, ratios, split_seed)
        for job in jobs:
            regime_name, seed = job[0], job[1]
            try:
                hyper_k = Hyperparams(**{**hyper.to_dict(), "seed": seed})
                result = train_regime(
                    Regime.from_name(regime_name), dataset, config, hyper_k,
                    eval_noise=eval_noise, cache_budget_bytes=cache_budget_bytes,
                )
                res = {
                    "regime": regime_name,
                    "seed": seed,
                    "status": "ok",
                    "metrics": {k: m.to_dict() for k, m in result.metrics.items()},
                    "led_weights": result.params.led_weights.tolist(),
                    "pupil_transmission": result.pupil_transmission,
                    "led_emission": result.led_emission,
                }
                if out_dir is not None:
                    run_dir = Path(out_dir) / regime_name / f"seed{seed:04d}"
                    _persist_run(run_dir, result, hyper_k, meta)
                    res["run_dir"] = str(run_dir)
            except Exception as exc:  # run failures are data, not crashes
                res = {
                    "regime": regime_name, "seed": seed, "status": "failed",
                    "error": f"{type(exc).__name__}: {exc}",
                    "traceback": traceback.format_exc(),
                }
            results[(regime_name, seed)] = res

    summaries = []
    for regime in regimes:
        per_seed = []
        failures = []
        for seed in seeds:
            res = results[(regime.value, seed)]
            if res["status"] == "ok":
                m = res["metrics"]["test"]
                per_seed.append(
                    {
                        "seed": seed,
                        "metrics": Metrics(tp=m["tp"], tn=m["tn"], fp=m["fp"], fn=m["fn"]),
                        "led_weights": res["led_weights"],
                        "pupil_transmission": res["pupil_transmission"],
                        "led_emission": res["led_emission"],
                        "run_dir": res.get("run_dir"),
                    }
                )
            else:
                failures.append(res)
        summaries.append(RunSummary(regime=regime, per_seed=per_seed, failures=failures))

    if out_dir is not None:
        write_summary_csv(Path(out_dir) / "summary.csv", summaries, meta)
    return summaries


def _run_job_safe(args) -> dict:
    try:
        return _run_job(args)
    except Exception as exc:
        return {
            "regime": args[0], "seed": args[1], "status": "failed",
            "error": f"{type(exc).__name__}: {exc}",
            "traceback": traceback.format_exc(),
        }


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.4f}"


def write_summary_csv(path: Path, summaries: list[RunSummary], meta: dict | None = None):
    """Fixed-column sweep summary; a trailing comment flags partial sweeps."""
    meta = meta or {}
    lines = []
    header_bits = [f"{k}={v}" for k, v in sorted(meta.items())]
    if header_bits:
        lines.append("# " + " ".join(header_bits))
    lines.append(
        "regime,n_seeds,acc_mean,acc_std,sens_mean,sens_std,spec_mean,spec_std"
    )
    any_failure = False
    for s in summaries:
        acc = s.stat("accuracy")
        sens = s.stat("sensitivity")
        spec = s.stat("specificity")
        lines.append(
            ",".join(
                [
                    s.regime.value,
                    str(s.n_seeds),
                    _fmt(acc[0]), _fmt(acc[1]),
                    _fmt(sens[0]), _fmt(sens[1]),
                    _fmt(spec[0]), _fmt(spec[1]),
                ]
            )
        )
        if s.failures:
            any_failure = True
    if any_failure:
        failed = sum(len(s.failures) for s in summaries)
        lines.append(f"# partial: {failed} run(s) failed and were excluded")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
