"""Command-line interface.

Subcommands: gen-data, train, sweep, eval, export-patterns, gradcheck.
Exit codes: 0 ok, 1 usage/config, 2 check failure, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .data import build_synthetic_dataset, load_object_stack, split as split_dataset
from .errors import ConfigError, LedSenseError, ValidationError
from .export import export_patterns
from .gradcheck import run_gradcheck
from .nn import load_checkpoint
from .optics import PhysicalParams, pupil_support
from .train import (
    Hyperparams,
    Metrics,
    Regime,
    RunSummary,
    evaluate,
    run_sweep,
    train_regime,
    write_summary_csv,
    _persist_run,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CHECK = 2
EXIT_RUNTIME = 3


class _Parser(argparse.ArgumentParser):
    """argparse variant whose usage errors exit with code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _meta(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.config_hash(), "tool_version": __version__}


def _load_split_dataset(cfg: RunConfig, dataset_dir: str | None):
    path = Path(dataset_dir or cfg.paths["dataset_dir"])
    dataset = load_object_stack(path)
    t = cfg.train
    split_dataset(dataset, tuple(t["split"]), int(t["split_seed"]))
    return dataset, path


def _print_metrics(prefix: str, m: Metrics):
    sens = "n/a" if m.sensitivity is None else f"{m.sensitivity:.2f}"
    spec = "n/a" if m.specificity is None else f"{m.specificity:.2f}"
    print(f"{prefix}: acc {m.accuracy:.2f}  sens {sens}  spec {spec}  "
          f"(tp {m.tp} tn {m.tn} fp {m.fp} fn {m.fn})")


# -- subcommands --------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out or cfg.paths["dataset_dir"])
    if out.exists() and any(out.iterdir()) and not args.force:
        print(f"error: output directory {out} is not empty (use --force)", file=sys.stderr)
        return EXIT_USAGE
    d = cfg.data
    manifest = build_synthetic_dataset(
        n_per_class=int(d["n_per_class"]),
        augment_translations=int(d["augment_translations"]),
        grid_n=cfg.microscope.grid_n,
        seed=int(d["seed"]),
        out_dir=out,
        canvas_n=int(d["canvas_n"]),
        meta=_meta(cfg),
    )
    for name, count in sorted(manifest["counts"].items()):
        print(f"{name}: {count} samples")
    print(f"dataset written to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    dataset, _ = _load_split_dataset(cfg, args.dataset)
    seed = args.seed if args.seed is not None else int(cfg.sweep["base_seed"])
    hyper = cfg.hyperparams(seed=seed)
    regime = Regime.from_name(args.regime)
    result = train_regime(
        regime, dataset, cfg.microscope, hyper,
        eval_noise=bool(cfg.train["eval_noise"]),
        cache_budget_bytes=float(cfg.train["cache_budget_bytes"]),
    )
    if args.out:
        run_dir = Path(args.out)
        _persist_run(run_dir, result, hyper, _meta(cfg))
        print(f"run artifacts written to {run_dir}")
    for name in ("train", "val", "test"):
        _print_metrics(f"{regime.value} seed {seed} {name}", result.metrics[name])
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out or cfg.paths["out_dir"])
    summary_path = out / "summary.csv"
    if summary_path.exists() and not args.force:
        old = summary_path.read_text().splitlines()[0]
        same = f"config_hash={cfg.config_hash()}" in old
        print(
            f"error: {summary_path} already exists "
            f"({'same' if same else 'different'} config hash); use --force to redo",
            file=sys.stderr,
        )
        return EXIT_USAGE
    dataset, dataset_dir = _load_split_dataset(cfg, args.dataset)
    sw = cfg.sweep
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep_config.json").write_text(
        json.dumps({"config": cfg.raw, **_meta(cfg)}, indent=1, sort_keys=True)
    )
    regimes = [Regime.from_name(r) for r in (args.regimes or sw["regimes"])]
    n_seeds = args.seeds or int(sw["n_seeds"])
    workers = args.workers or int(sw["workers"])
    hyper = cfg.hyperparams()
    try:
        summaries = run_sweep(
            regimes, n_seeds, dataset, cfg.microscope, hyper,
            ratios=tuple(cfg.train["split"]),
            split_seed=int(cfg.train["split_seed"]),
            dataset_dir=dataset_dir,
            out_dir=out,
            workers=workers,
            eval_noise=bool(cfg.train["eval_noise"]),
            meta=_meta(cfg),
            cache_budget_bytes=float(cfg.train["cache_budget_bytes"]),
            base_seed=int(sw["base_seed"]),
        )
    except KeyboardInterrupt:
        summaries = _recover_partial(out, regimes)
        write_summary_csv(summary_path, summaries, _meta(cfg))
        print("interrupted; partial summary written", file=sys.stderr)
        return EXIT_RUNTIME
    n_failed = sum(len(s.failures) for s in summaries)
    for s in summaries:
        acc_mean, acc_std = s.stat("accuracy")
        if acc_mean is None:
            print(f"{s.regime.value}: no successful runs")
        else:
            print(f"{s.regime.value}: acc {acc_mean:.2f} +- {acc_std:.2f} "
                  f"over {s.n_seeds} seeds")
    print(f"summary written to {summary_path}")
    return EXIT_OK if n_failed == 0 else EXIT_RUNTIME


def _recover_partial(out: Path, regimes) -> list[RunSummary]:
    """Rebuild summaries from whatever run.json files finished on disk."""
    summaries = []
    for regime in regimes:
        per_seed = []
        for run_json in sorted((out / regime.value).glob("seed*/run.json")):
            payload = json.loads(run_json.read_text())
            if payload.get("status") != "ok":
                continue
            m = payload["metrics"]["test"]
            per_seed.append(
                {
                    "seed": payload["seed"],
                    "metrics": Metrics(tp=m["tp"], tn=m["tn"], fp=m["fp"], fn=m["fn"]),
                }
            )
        summaries.append(
            RunSummary(regime=regime, per_seed=per_seed,
                       failures=[{"status": "interrupted"}])
        )
    return summaries


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    dataset, _ = _load_split_dataset(cfg, args.dataset)
    run_dir = Path(args.run)
    payload = json.loads((run_dir / "run.json").read_text())
    model = load_checkpoint(run_dir / "checkpoint")
    pupil = np.fromfile(run_dir / "pupil.f32", dtype="<f4").reshape(payload["pupil_shape"])
    params = PhysicalParams(
        led_weights=np.asarray(payload["led_weights"], dtype=np.float64),
        pupil=pupil.astype(np.float64),
        pupil_support=pupil_support(cfg.microscope),
    )
    from .data import Split

    which = Split(args.split)
    sigma = payload["hyperparams"]["noise_sigma_frac"] if not args.no_noise else 0.0
    m = evaluate(
        model, params, dataset, which, cfg.microscope,
        noise_sigma_frac=sigma,
        rng=np.random.default_rng(payload.get("eval_seed", 0)),
    )
    _print_metrics(f"{payload['regime']} seed {payload['seed']} {args.split}", m)
    return EXIT_OK


def cmd_export_patterns(args) -> int:
    cfg = load_config(args.config)
    dataset = None
    if args.dataset or args.examples:
        dataset, _ = _load_split_dataset(cfg, args.dataset)
    written = export_patterns(
        Path(args.run), Path(args.out), cfg.microscope,
        dataset=dataset, meta=_meta(cfg),
    )
    print(f"wrote {len(written)} artifact(s) to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rows = run_gradcheck(
        n_instances=args.instances,
        seed=args.seed,
        fault_scale=2.0 if args.inject_fault else 1.0,
    )
    print("group,instances,max_rel_error,tolerance,status")
    worst = None
    for row in rows:
        status = "pass" if row.passed else "FAIL"
        print(f"{row.group},{row.instances},{row.max_rel_error:.3e},"
              f"{row.tolerance:.0e},{status}")
        if not row.passed and (worst is None or row.max_rel_error > worst.max_rel_error):
            worst = row
    if worst is not None:
        print(f"gradcheck failed: worst offender {worst.group} "
              f"({worst.max_rel_error:.3e} > {worst.tolerance:.0e})", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


# -- wiring ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ledsense", description=__doc__)
    parser.add_argument("--version", action="version", version=f"ledsense {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate the synthetic shape dataset")
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--out", help="dataset output directory")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a single (regime, seed) run")
    p.add_argument("--config")
    p.add_argument("--regime", required=True, help="DO, PO, IO or PIO")
    p.add_argument("--seed", type=int)
    p.add_argument("--dataset", help="dataset directory (overrides config)")
    p.add_argument("--out", help="run artifact directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="multi-seed sweep over regimes")
    p.add_argument("--config")
    p.add_argument("--dataset")
    p.add_argument("--out")
    p.add_argument("--regimes", nargs="+", help="subset of regimes to run")
    p.add_argument("--seeds", type=int, help="number of seeds")
    p.add_argument("--workers", type=int, help="parallel run workers")
    p.add_argument("--force", action="store_true", help="redo an existing sweep")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="evaluate a stored run on a dataset split")
    p.add_argument("--config")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--dataset")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--no-noise", action="store_true", help="disable detector noise")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-patterns", help="export pupil/LED patterns and figures")
    p.add_argument("--config")
    p.add_argument("--run", required=True, help="run or sweep directory")
    p.add_argument("--out", required=True)
    p.add_argument("--dataset", help="dataset for example sensor images")
    p.add_argument("--examples", action="store_true",
                   help="render example captures (needs dataset)")
    p.set_defaults(func=cmd_export_patterns)

    p = sub.add_parser("gradcheck", help="finite-difference gradient certification")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", action="store_true",
                   help="test hook: scale analytic gradients by 2 so checks fail")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help exits 0, usage errors exit 1
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except LedSenseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entry():
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
