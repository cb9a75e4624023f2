"""Artifact exporters: binary PGM / raw float32 images, LED CSVs, figures.

The report path mirrors every delimited/binary artifact with a rendered
matplotlib figure so results can be eyeballed without extra tooling.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .data import Dataset, Split  # noqa: E402
from .engine import CaptureEngine  # noqa: E402
from .errors import ValidationError  # noqa: E402
from .optics import Led, MicroscopeConfig, PhysicalParams, build_led_array, pupil_support  # noqa: E402

LED_CSV_HEADER = "index,ring,azimuth_deg,polar_deg,field_kind,weight"


def write_pgm(path: str | Path, image: np.ndarray, normalize: str = "auto",
              comments: tuple[str, ...] = ()):
    """8-bit binary (P5) PGM.

    normalize="unit" maps [0, 1] to [0, 255]; "auto" min-max scales and
    records the original range in a comment.
    """
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise ValidationError(f"PGM image must be 2D, got {image.shape}")
    comments = list(comments)
    if normalize == "unit":
        scaled = np.clip(image, 0.0, 1.0)
    elif normalize == "auto":
        lo, hi = float(image.min()), float(image.max())
        comments.append(f"range {lo:.6g} {hi:.6g}")
        scaled = (image - lo) / (hi - lo) if hi > lo else np.zeros_like(image)
    else:
        raise ValidationError(f"unknown normalize mode {normalize!r}")
    data = np.round(scaled * 255).astype(np.uint8)
    header = [b"P5"]
    header += [b"# " + c.encode() for c in comments]
    header.append(f"{image.shape[1]} {image.shape[0]}".encode())
    header.append(b"255")
    Path(path).write_bytes(b"\n".join(header) + b"\n" + data.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """Read back a P5 PGM written by :func:`write_pgm` (maxval 255)."""
    raw = Path(path).read_bytes()
    pos = 0
    fields = []
    while len(fields) < 4:
        end = raw.index(b"\n", pos)
        line = raw[pos:end]
        pos = end + 1
        if not line.startswith(b"#"):
            fields.extend(line.split())
    if fields[0] != b"P5" or fields[3] != b"255":
        raise ValidationError(f"unsupported PGM header in {path}")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(raw[pos : pos + w * h], dtype=np.uint8).reshape(h, w)


def write_f32(path: str | Path, array: np.ndarray):
    """Raw little-endian float32, row-major."""
    np.ascontiguousarray(array, dtype="<f4").tofile(path)


def led_weights_csv(path: str | Path, leds: list[Led], weights: np.ndarray,
                    comments: tuple[str, ...] = ()):
    with open(path, "w", newline="") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        writer = csv.writer(fh)
        writer.writerow(LED_CSV_HEADER.split(","))
        for led, w in zip(leds, weights):
            writer.writerow(
                [led.index, led.ring, f"{led.azimuth_deg:.2f}", f"{led.polar_deg:.2f}",
                 led.field_kind.value, f"{w:.8g}"]
            )


# -- figures ----------------------------------------------------------------------


def _png_meta(meta: dict) -> dict:
    return {"Software": " ".join(f"{k}={v}" for k, v in sorted(meta.items()))} if meta else {}


def render_pupil_figure(path, mean, var, meta=None):
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.6))
    for ax, img, title in ((axes[0], mean, "pupil mean"), (axes[1], var, "pupil variance")):
        im = ax.imshow(img, cmap="gray")
        ax.set_title(title)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_png_meta(meta or {}))
    plt.close(fig)


def render_led_figure(path, leds, w_mean, w_var, na_radius_px, meta=None):
    fig, ax = plt.subplots(figsize=(5, 4.6))
    xs = np.array([led.shift_px[0] for led in leds], dtype=float)
    ys = np.array([led.shift_px[1] for led in leds], dtype=float)
    lim = max(np.abs(xs).max(), np.abs(ys).max(), na_radius_px) * 1.25 + 1
    vmax = max(np.abs(w_mean).max(), 1e-12)
    sc = ax.scatter(xs, ys, c=w_mean, cmap="coolwarm", vmin=-vmax, vmax=vmax,
                    s=60 + 1200 * np.asarray(w_var) / max(np.max(w_var), 1e-12)
                    if np.max(w_var) > 0 else 60,
                    edgecolor="k", linewidth=0.5)
    circle = plt.Circle((0, 0), na_radius_px, fill=False, ls="--", color="gray")
    ax.add_patch(circle)
    ax.set_xlim(-lim, lim)
    ax.set_ylim(-lim, lim)
    ax.set_aspect("equal")
    ax.set_xlabel("spectrum shift x [px]")
    ax.set_ylabel("spectrum shift y [px]")
    ax.set_title("LED weights (marker size = seed variance)")
    fig.colorbar(sc, ax=ax, label="mean weight")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_png_meta(meta or {}))
    plt.close(fig)


def render_examples_figure(path, images, titles, meta=None):
    n = len(images)
    cols = min(4, n)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 2.4 * rows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for ax, img, title in zip(axes.ravel(), images, titles):
        ax.imshow(img, cmap="gray")
        ax.set_title(title, fontsize=8)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_png_meta(meta or {}))
    plt.close(fig)


def render_summary_figure(path, rows, meta=None):
    """Bar chart of test accuracy per regime from parsed summary rows."""
    fig, ax = plt.subplots(figsize=(5, 3.6))
    names = [r["regime"] for r in rows]
    means = [r["acc_mean"] for r in rows]
    stds = [r["acc_std"] for r in rows]
    ax.bar(names, means, yerr=stds, capsize=4, color="#4878a8")
    ax.set_ylabel("test accuracy [%]")
    ax.set_ylim(0, 105)
    for x, m in zip(names, means):
        ax.text(x, m + 1, f"{m:.1f}", ha="center", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_png_meta(meta or {}))
    plt.close(fig)


# -- run/sweep exports ---------------------------------------------------------------


def _load_runs(root: Path) -> dict[str, list[dict]]:
    """Map regime -> list of run.json payloads under a run or sweep directory."""
    if (root / "run.json").exists():
        payload = json.loads((root / "run.json").read_text())
        payload["_dir"] = root
        return {payload["regime"]: [payload]}
    by_regime: dict[str, list[dict]] = {}
    for run_json in sorted(root.glob("*/seed*/run.json")):
        payload = json.loads(run_json.read_text())
        payload["_dir"] = run_json.parent
        by_regime.setdefault(payload["regime"], []).append(payload)
    return by_regime


def _run_pupil(payload: dict) -> np.ndarray:
    shape = payload["pupil_shape"]
    return np.fromfile(payload["_dir"] / "pupil.f32", dtype="<f4").reshape(shape)


def export_patterns(
    run_dir: str | Path,
    out_dir: str | Path,
    config: MicroscopeConfig,
    dataset: Dataset | None = None,
    meta: dict | None = None,
    examples_per_class: int = 4,
) -> list[Path]:
    """Export per-regime pupil mean/variance, LED weights, and example captures.

    ``run_dir`` may be a single run directory or a sweep directory; statistics
    are taken across the runs found.  Example sensor images need ``dataset``.
    """
    run_dir = Path(run_dir)
    out_dir = Path(out_dir)
    runs = _load_runs(run_dir)
    if not runs:
        raise FileNotFoundError(f"no run.json found under {run_dir}")
    meta = dict(meta or {})
    leds = build_led_array(config)
    written: list[Path] = []

    for regime, payloads in sorted(runs.items()):
        reg_dir = out_dir / regime
        reg_dir.mkdir(parents=True, exist_ok=True)
        pupils = np.stack([_run_pupil(p) for p in payloads])
        weights = np.stack([np.asarray(p["led_weights"]) for p in payloads])
        p_mean, p_var = pupils.mean(axis=0), pupils.var(axis=0)
        w_mean, w_var = weights.mean(axis=0), weights.var(axis=0)
        comments = tuple(f"{k}={v}" for k, v in sorted(meta.items())) + (
            f"regime={regime} runs={len(payloads)}",
        )
        write_pgm(reg_dir / "pupil_mean.pgm", p_mean, "unit", comments)
        write_pgm(reg_dir / "pupil_var.pgm", p_var, "auto", comments)
        write_f32(reg_dir / "pupil_mean.f32", p_mean)
        led_weights_csv(reg_dir / "leds.csv", leds, w_mean, comments)
        render_pupil_figure(reg_dir / "pupil.png", p_mean, p_var, meta)
        render_led_figure(
            reg_dir / "led_pattern.png", leds, w_mean, w_var,
            config.pupil_radius_px, meta,
        )
        written += [reg_dir / n for n in
                    ("pupil_mean.pgm", "pupil_var.pgm", "pupil_mean.f32",
                     "leds.csv", "pupil.png", "led_pattern.png")]

        if dataset is not None:
            params = PhysicalParams(
                led_weights=np.asarray(payloads[0]["led_weights"]),
                pupil=pupils[0].astype(np.float64),
                pupil_support=pupil_support(config),
            )
            engine = CaptureEngine(config, leds)
            rng = np.random.default_rng(payloads[0].get("eval_seed", 0))
            sigma = payloads[0].get("hyperparams", {}).get("noise_sigma_frac", 0.0)
            images, titles = [], []
            for label in (0, 1):
                idx = [i for i, r in enumerate(dataset.records)
                       if r.label == label and (r.split in (Split.TEST, None))]
                idx = idx[:examples_per_class]
                caps, _ = engine.forward_batch(
                    dataset.batch_objects(idx), params, sigma, rng,
                    sample_indices=np.asarray(idx),
                )
                for j, i in enumerate(idx):
                    images.append(caps[j])
                    titles.append(f"{dataset.records[i].sample_id}")
                    write_pgm(
                        reg_dir / f"example_class{label}_{j}.pgm", caps[j], "auto", comments
                    )
                    written.append(reg_dir / f"example_class{label}_{j}.pgm")
            render_examples_figure(reg_dir / "examples.png", images, titles, meta)
            written.append(reg_dir / "examples.png")

    summary_csv = run_dir / "summary.csv"
    if summary_csv.exists():
        rows = parse_summary_csv(summary_csv)
        render_summary_figure(out_dir / "summary_accuracy.png", rows, meta)
        written.append(out_dir / "summary_accuracy.png")
    return written


def parse_summary_csv(path: str | Path) -> list[dict]:
    rows = []
    with open(path) as fh:
        reader = csv.DictReader(line for line in fh if not line.startswith("#"))
        for row in reader:
            rows.append(
                {
                    "regime": row["regime"],
                    "n_seeds": int(row["n_seeds"]),
                    "acc_mean": float(row["acc_mean"]) if row["acc_mean"] else None,
                    "acc_std": float(row["acc_std"]) if row["acc_std"] else None,
                    "sens_mean": float(row["sens_mean"]) if row["sens_mean"] else None,
                    "sens_std": float(row["sens_std"]) if row["sens_std"] else None,
                    "spec_mean": float(row["spec_mean"]) if row["spec_mean"] else None,
                    "spec_std": float(row["spec_std"]) if row["spec_std"] else None,
                }
            )
    return rows
