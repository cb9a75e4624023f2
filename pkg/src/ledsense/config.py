"""TOML run configuration: strict parsing, defaults, and content hashing."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, LedSenseError
from .optics import LedRing, MicroscopeConfig
from .train import Hyperparams

if sys.version_info >= (3, 11):
    import tomllib as _toml
else:
    import tomli as _toml


_DEFAULTS = {
    "microscope": {
        "wavelength": 522e-9,
        "na": 0.2,
        "grid_n": 256,
        "dx": 0.25e-6,
        "sensor_n": 64,
        "rings": [[0.0, 1, 0.0], [16.37, 12, 0.0], [34.30, 12, 0.0]],
    },
    "data": {
        "n_per_class": 300,
        "augment_translations": 8,
        "canvas_n": 64,
        "seed": 1234,
    },
    "train": {
        "digital_lr": 1e-3,
        "physical_lr": 1e-2,
        "batch_size": 16,
        "epochs": 30,
        "noise_sigma_frac": 0.01,
        "split": [0.7, 0.15, 0.15],
        "split_seed": 1,
        "eval_noise": True,
        "cache_budget_bytes": 3e9,
    },
    "sweep": {
        "regimes": ["DO", "PO", "IO", "PIO"],
        "n_seeds": 5,
        "base_seed": 0,
        "workers": 1,
    },
    "paths": {
        "dataset_dir": "dataset",
        "out_dir": "runs",
    },
}


@dataclass
class RunConfig:
    """Resolved configuration for every CLI command."""

    raw: dict
    source: str = "<defaults>"

    @property
    def microscope(self) -> MicroscopeConfig:
        m = self.raw["microscope"]
        rings = tuple(LedRing(r[0], int(r[1]), r[2] if len(r) > 2 else 0.0)
                      for r in m["rings"])
        return MicroscopeConfig(
            wavelength=m["wavelength"], na=m["na"], grid_n=int(m["grid_n"]),
            dx=m["dx"], sensor_n=int(m["sensor_n"]), led_rings=rings,
        )

    def hyperparams(self, seed: int | None = None) -> Hyperparams:
        t = self.raw["train"]
        return Hyperparams(
            digital_lr=t["digital_lr"],
            physical_lr=t["physical_lr"],
            batch_size=int(t["batch_size"]),
            epochs=int(t["epochs"]),
            noise_sigma_frac=t["noise_sigma_frac"],
            seed=int(self.raw["sweep"]["base_seed"] if seed is None else seed),
        )

    @property
    def data(self) -> dict:
        return self.raw["data"]

    @property
    def train(self) -> dict:
        return self.raw["train"]

    @property
    def sweep(self) -> dict:
        return self.raw["sweep"]

    @property
    def paths(self) -> dict:
        return self.raw["paths"]

    def config_hash(self) -> str:
        canon = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:12]

    def validate(self):
        try:
            self.microscope
            self.hyperparams()
        except LedSenseError as exc:
            raise ConfigError(str(exc)) from exc
        split = self.raw["train"]["split"]
        if len(split) != 3:
            raise ConfigError(f"train.split needs 3 ratios, got {split}")


def _merge_strict(defaults: dict, user: dict, path: str = "") -> dict:
    out = {}
    for key, dval in defaults.items():
        if key in user:
            uval = user[key]
            if isinstance(dval, dict):
                if not isinstance(uval, dict):
                    raise ConfigError(f"config section [{path}{key}] must be a table")
                out[key] = _merge_strict(dval, uval, f"{path}{key}.")
            else:
                out[key] = uval
        else:
            out[key] = dval if not isinstance(dval, dict) else _merge_strict(dval, {}, f"{path}{key}.")
    unknown = set(user) - set(defaults)
    if unknown:
        raise ConfigError(
            f"unknown config key(s) {sorted(unknown)} under [{path.rstrip('.') or 'top level'}]"
        )
    return out


def load_config(path: str | Path | None) -> RunConfig:
    """Load and strictly validate a TOML config; missing keys take defaults."""
    if path is None:
        cfg = RunConfig(raw=_merge_strict(_DEFAULTS, {}))
        cfg.validate()
        return cfg
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        user = _toml.loads(path.read_text())
    except _toml.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    cfg = RunConfig(raw=_merge_strict(_DEFAULTS, user), source=str(path))
    cfg.validate()
    return cfg
