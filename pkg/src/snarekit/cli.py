"""Command-line interface: generate | train | eval | rollout | compare | report.

Every command is deterministic given its flags and seed; all randomness flows
from one per-run seed through named substreams. Flags override values from an
optional JSON config file (--config); resolved settings are hashed into the
run manifest, which is written last so its file list is complete on success.

Exit codes: 0 success, 2 usage/validation, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import glob as globmod
import json
import os
import sys

import numpy as np

from . import __version__
from ._serde import atomic_write_text, config_hash, read_json, write_json
from .control import (
    Scenario,
    make_policy,
    rollout,
    sample_initial_states,
    train_policy,
    trajectory_csv,
)
from .errors import ContractError, ShapeError, SnarekitError
from .evaluation import (
    EVAL_METHODS,
    aggregate_reports,
    curves_to_csv,
    evaluate_split,
    method_predictor,
    reports_to_csv,
    reports_to_json,
)
from .models import load_checkpoint, save_checkpoint
from .problems import Dataset, generate, solve_oracle
from .training import TrainConfig, train

COMPARE_TRAIN_MODES = ["snare", "soft", "soft-epochs-then-hard", "penalty-grad"]


def _workers_default() -> int:
    return max(1, int(os.environ.get("SNAREKIT_THREADS", "1")))


def _resolve(args: argparse.Namespace, spec: dict) -> dict:
    """Merge precedence: command-line flag > config file > built-in default."""
    config = read_json(args.config) if getattr(args, "config", None) else {}
    out = {}
    for name, default in spec.items():
        flag = getattr(args, name, None)
        out[name] = flag if flag is not None else config.get(name, default)
    return out


def _hidden_tuple(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _tol_list(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(",") if v.strip()]


def _write_manifest(out_dir: str, command: str, resolved: dict, files: dict, seeds: list[int]) -> dict:
    manifest = {
        "format": "snarekit-manifest-v1",
        "tool_version": __version__,
        "command": command,
        "config": resolved,
        "config_hash": config_hash({"command": command, **resolved}),
        "seeds": seeds,
        **files,
    }
    write_json(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest


def _emit(args, manifest: dict) -> None:
    if getattr(args, "json", False):
        print(json.dumps(manifest, sort_keys=True))
    else:
        print(f"wrote {os.path.join(manifest_dir(manifest), 'manifest.json')}")


def manifest_dir(manifest: dict) -> str:
    return manifest.get("out", "")


# ---------------------------------------------------------------- generate

def cmd_generate(args) -> int:
    cfg = _resolve(
        args,
        {
            "family": "qcqp",
            "n": 20,
            "neq": 10,
            "nineq": 10,
            "count": 1000,
            "seed": 0,
            "out": "dataset.json",
            "oracle": True,
            "workers": _workers_default(),
        },
    )
    ds = generate(cfg["family"], cfg["n"], cfg["neq"], cfg["nineq"], cfg["count"], cfg["seed"])
    if cfg["oracle"]:
        solve_oracle(ds, workers=int(cfg["workers"]))
    ds.save(cfg["out"])
    summary = {
        "out": cfg["out"],
        "family": cfg["family"],
        "count": cfg["count"],
        "config_hash": config_hash({"command": "generate", **cfg}),
    }
    print(json.dumps(summary, sort_keys=True) if args.json else f"wrote {cfg['out']}")
    return 0


# ------------------------------------------------------------------- train

def _train_on_dataset(args, cfg: dict) -> int:
    ds = Dataset.load(cfg["dataset"])
    out_dir = cfg["out"]
    os.makedirs(out_dir, exist_ok=True)
    seeds = [cfg["seed_base"] + k for k in range(cfg["seeds"])]
    checkpoints, curve_files, log_files = [], {}, []
    for seed in seeds:
        tc = TrainConfig(
            epochs=cfg["epochs"],
            decay_epochs=cfg["decay"],
            batch_size=cfg["batch"],
            lr=cfg["lr"],
            mu_upper=cfg["mu"],
            mu_lower=cfg["mu"],
            mode=cfg["mode"],
            seed=seed,
            hidden=_hidden_tuple(cfg["hidden"]),
            lam=cfg["lam"],
            tol=cfg["tol"],
            soft_epochs=cfg["soft_epochs"],
        )
        result = train(tc, ds)
        ckpt = os.path.join(out_dir, f"checkpoint_seed{seed}.json")
        save_checkpoint(
            result.model, ckpt, extra={"kind": "surrogate", "mode": cfg["mode"], "train_config": tc.to_dict()}
        )
        curve_path = os.path.join(out_dir, f"curves_seed{seed}.csv")
        atomic_write_text(curve_path, curves_to_csv(result.curves))
        log_path = os.path.join(out_dir, f"trainlog_seed{seed}.json")
        write_json(log_path, result.log)
        checkpoints.append(ckpt)
        curve_files[f"{cfg['mode']} seed {seed}"] = curve_path
        log_files.append(log_path)

    figures = []
    if cfg["figures"]:
        from .reporting import render_training_curves

        fig = os.path.join(out_dir, "figures", "training_curves.png")
        render_training_curves(curve_files, fig, decay_epoch=cfg["decay"])
        figures.append(fig)
    manifest = _write_manifest(
        out_dir,
        "train",
        cfg,
        {
            "out": out_dir,
            "dataset": cfg["dataset"],
            "checkpoints": checkpoints,
            "curves": sorted(curve_files.values()),
            "logs": log_files,
            "figures": figures,
        },
        seeds,
    )
    _emit(args, manifest)
    return 0


def _train_on_scenario(args, cfg: dict) -> int:
    scenario = Scenario.load(cfg["scenario"])
    out_dir = cfg["out"]
    os.makedirs(out_dir, exist_ok=True)
    seeds = [cfg["seed_base"] + k for k in range(cfg["seeds"])]
    checkpoints, log_files = [], []
    for seed in seeds:
        policy, log = train_policy(
            scenario,
            n_starts=cfg["starts"],
            epochs=cfg["epochs"],
            decay_epochs=cfg["decay"],
            lr=cfg["lr"],
            hidden=_hidden_tuple(cfg["hidden"]),
            seed=seed,
        )
        ckpt = os.path.join(out_dir, f"policy_seed{seed}.json")
        save_checkpoint(
            policy.correction,
            ckpt,
            extra={"kind": "policy", "scenario": cfg["scenario"], "policy_meta": policy.metadata},
        )
        log_path = os.path.join(out_dir, f"policylog_seed{seed}.json")
        write_json(log_path, log)
        checkpoints.append(ckpt)
        log_files.append(log_path)
    manifest = _write_manifest(
        out_dir,
        "train",
        cfg,
        {"out": out_dir, "scenario": cfg["scenario"], "checkpoints": checkpoints, "logs": log_files, "figures": []},
        seeds,
    )
    _emit(args, manifest)
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(
        args,
        {
            "dataset": None,
            "scenario": None,
            "mode": "snare",
            "seeds": 1,
            "seed_base": 0,
            "epochs": 60,
            "decay": 40,
            "batch": 50,
            "lr": 1e-3,
            "mu": 10.0,
            "tol": 1e-6,
            "lam": 0.01,
            "hidden": "200,200",
            "soft_epochs": 50,
            "starts": 32,
            "out": "train-out",
            "figures": True,
        },
    )
    if (cfg["dataset"] is None) == (cfg["scenario"] is None):
        raise ContractError("train needs exactly one of --dataset or --scenario")
    if cfg["dataset"] is not None:
        return _train_on_dataset(args, cfg)
    return _train_on_scenario(args, cfg)


# -------------------------------------------------------------------- eval

def _expand_checkpoints(patterns: list[str]) -> list[str]:
    paths = []
    for pat in patterns:
        if os.path.isdir(pat):
            paths.extend(sorted(globmod.glob(os.path.join(pat, "checkpoint_*.json"))))
        elif any(ch in pat for ch in "*?["):
            paths.extend(sorted(globmod.glob(pat)))
        else:
            paths.append(pat)
    for p in paths:
        if not os.path.exists(p):
            raise ContractError(f"checkpoint not found: {p}")
    if not paths:
        raise ContractError("no checkpoints given")
    return paths


def cmd_eval(args) -> int:
    cfg = _resolve(
        args,
        {
            "dataset": None,
            "checkpoints": None,
            "tol_sweep": "1e-6",
            "method": None,
            "label": None,
            "lam": 0.01,
            "max_iters": 100,
            "split": "test",
            "out": "eval-out",
            "figures": True,
        },
    )
    if not cfg["dataset"] or not cfg["checkpoints"]:
        raise ContractError("eval needs --dataset and --checkpoints")
    ds = Dataset.load(cfg["dataset"])
    paths = _expand_checkpoints(
        cfg["checkpoints"] if isinstance(cfg["checkpoints"], list) else [cfg["checkpoints"]]
    )
    tols = _tol_list(cfg["tol_sweep"])
    out_dir = cfg["out"]
    os.makedirs(out_dir, exist_ok=True)

    reports, seeds = [], []
    indices = ds.indices(cfg["split"])
    for path in paths:
        model, extra = load_checkpoint(path)
        method = cfg["method"] or extra.get("mode", "snare")
        seed = int(extra.get("train_config", {}).get("seed", model.seed or 0))
        seeds.append(seed)
        label = cfg["label"] or method
        for tol in tols:
            predict = method_predictor(method, model, ds, tol=tol, lam=cfg["lam"], max_iters=cfg["max_iters"])
            reports.append(evaluate_split(ds, indices, predict, label, seed, tol))
    all_rows = reports + aggregate_reports(reports)
    report_csv = os.path.join(out_dir, "report.csv")
    atomic_write_text(report_csv, reports_to_csv(all_rows))
    report_json = os.path.join(out_dir, "report.json")
    atomic_write_text(report_json, reports_to_json(all_rows))

    figures = []
    if cfg["figures"]:
        from .reporting import render_report_bars

        fig = os.path.join(out_dir, "figures", "test_bars.png")
        render_report_bars(report_csv, fig, title=os.path.basename(cfg["dataset"]))
        figures.append(fig)
    manifest = _write_manifest(
        out_dir,
        "eval",
        cfg,
        {
            "out": out_dir,
            "dataset": cfg["dataset"],
            "checkpoints": paths,
            "reports": [report_csv, report_json],
            "figures": figures,
        },
        sorted(set(seeds)),
    )
    _emit(args, manifest)
    return 0


# ----------------------------------------------------------------- rollout

def cmd_rollout(args) -> int:
    cfg = _resolve(
        args,
        {
            "scenario": None,
            "checkpoint": None,
            "steps": None,
            "starts": 8,
            "seed": 0,
            "out": "rollout-out",
            "figures": True,
        },
    )
    if not cfg["scenario"]:
        raise ContractError("rollout needs --scenario")
    scenario = Scenario.load(cfg["scenario"])
    steps = int(cfg["steps"]) if cfg["steps"] is not None else scenario.eval_steps
    if cfg["checkpoint"]:
        correction, extra = load_checkpoint(cfg["checkpoint"])
        meta = extra.get("policy_meta", {})
        policy = make_policy(
            scenario,
            hidden=tuple(meta.get("hidden", (64, 64))),
            seed=correction.seed or 0,
            correction_scale=meta.get("correction_scale", 2.0),
        )
        policy.correction = correction
        label = "policy"
    else:
        policy = make_policy(scenario, hidden=(4,), seed=0)  # zero head: pure nominal
        label = "nominal"

    out_dir = cfg["out"]
    os.makedirs(out_dir, exist_ok=True)
    starts = sample_initial_states(int(cfg["starts"]), int(cfg["seed"]), scenario)
    traj_files, summaries = {}, []
    for k, x0 in enumerate(starts):
        res = rollout(policy, x0, scenario.rollout, scenario.obstacles, steps=steps)
        path = os.path.join(out_dir, f"trajectory_{k:02d}.csv")
        atomic_write_text(path, trajectory_csv(res, scenario.rollout.dt))
        traj_files[f"{label} start {k}"] = path
        summaries.append(
            {
                "start": k,
                "cost": res.cost,
                "min_clearance": float(res.clearances.min()) if res.clearances.size else None,
                "constraint_violation": res.constraint_violation,
                "final_distance": float(np.linalg.norm(res.states[-1, :2])),
            }
        )
    figures = []
    if cfg["figures"]:
        from .reporting import render_trajectories

        fig = os.path.join(out_dir, "figures", "trajectories.png")
        render_trajectories(traj_files, cfg["scenario"], fig)
        figures.append(fig)
    summary_path = os.path.join(out_dir, "rollout_summary.json")
    write_json(summary_path, summaries)
    manifest = _write_manifest(
        out_dir,
        "rollout",
        cfg,
        {
            "out": out_dir,
            "scenario": cfg["scenario"],
            "trajectories": sorted(traj_files.values()),
            "summary": summary_path,
            "figures": figures,
        },
        [int(cfg["seed"])],
    )
    _emit(args, manifest)
    return 0


# ----------------------------------------------------------------- compare

def cmd_compare(args) -> int:
    cfg = _resolve(
        args,
        {
            "dataset": None,
            "seeds": 3,
            "seed_base": 0,
            "epochs": 60,
            "decay": 40,
            "batch": 50,
            "lr": 1e-3,
            "mu": 10.0,
            "tol": 1e-6,
            "lam": 0.01,
            "hidden": "200,200",
            "soft_epochs": 50,
            "out": "compare-out",
            "figures": True,
        },
    )
    if not cfg["dataset"]:
        raise ContractError("compare needs --dataset")
    ds = Dataset.load(cfg["dataset"])
    out_dir = cfg["out"]
    os.makedirs(out_dir, exist_ok=True)
    seeds = [cfg["seed_base"] + k for k in range(cfg["seeds"])]

    reports, curve_files, checkpoints = [], {}, []
    indices = ds.indices("test")
    models_by_mode: dict[str, dict[int, object]] = {m: {} for m in COMPARE_TRAIN_MODES}
    for mode in COMPARE_TRAIN_MODES:
        for seed in seeds:
            tc = TrainConfig(
                epochs=cfg["epochs"],
                decay_epochs=cfg["decay"],
                batch_size=cfg["batch"],
                lr=cfg["lr"],
                mu_upper=cfg["mu"],
                mu_lower=cfg["mu"],
                mode=mode,
                seed=seed,
                hidden=_hidden_tuple(cfg["hidden"]),
                lam=cfg["lam"],
                tol=cfg["tol"],
                soft_epochs=cfg["soft_epochs"],
            )
            result = train(tc, ds)
            models_by_mode[mode][seed] = result.model
            ckpt = os.path.join(out_dir, f"checkpoint_{mode}_seed{seed}.json")
            save_checkpoint(result.model, ckpt, extra={"kind": "surrogate", "mode": mode, "train_config": tc.to_dict()})
            checkpoints.append(ckpt)
            curve_path = os.path.join(out_dir, f"curves_{mode}_seed{seed}.csv")
            atomic_write_text(curve_path, curves_to_csv(result.curves))
            curve_files[f"{mode} seed {seed}"] = curve_path

    eval_plan = [(m, m) for m in COMPARE_TRAIN_MODES] + [("posthoc", "soft")]
    for method, trained_mode in eval_plan:
        for seed in seeds:
            model = models_by_mode[trained_mode][seed]
            predict = method_predictor(method, model, ds, tol=cfg["tol"], lam=cfg["lam"])
            reports.append(evaluate_split(ds, indices, predict, method, seed, cfg["tol"]))

    all_rows = reports + aggregate_reports(reports)
    report_csv = os.path.join(out_dir, "combined_report.csv")
    atomic_write_text(report_csv, reports_to_csv(all_rows))
    report_json = os.path.join(out_dir, "combined_report.json")
    atomic_write_text(report_json, reports_to_json(all_rows))

    figures = []
    if cfg["figures"]:
        from .reporting import render_report_bars, render_training_curves

        bars = os.path.join(out_dir, "figures", "test_bars.png")
        render_report_bars(report_csv, bars, title="method comparison")
        curves_fig = os.path.join(out_dir, "figures", "training_curves.png")
        render_training_curves(curve_files, curves_fig, decay_epoch=cfg["decay"])
        figures += [bars, curves_fig]
    manifest = _write_manifest(
        out_dir,
        "compare",
        cfg,
        {
            "out": out_dir,
            "dataset": cfg["dataset"],
            "checkpoints": checkpoints,
            "curves": sorted(curve_files.values()),
            "reports": [report_csv, report_json],
            "figures": figures,
        },
        seeds,
    )
    _emit(args, manifest)
    return 0


# ------------------------------------------------------------------ report

def cmd_report(args) -> int:
    cfg = _resolve(
        args,
        {"curves": None, "reports": None, "trajectories": None, "scenario": None, "out": "figures", "decay": None},
    )
    os.makedirs(cfg["out"], exist_ok=True)
    written = []
    if cfg["curves"]:
        from .reporting import render_training_curves

        files = {os.path.basename(p): p for pat in cfg["curves"] for p in sorted(globmod.glob(pat))}
        if not files:
            raise ContractError("no curve files matched")
        written.append(
            render_training_curves(files, os.path.join(cfg["out"], "training_curves.png"), cfg["decay"])
        )
    if cfg["reports"]:
        from .reporting import render_report_bars

        written.append(render_report_bars(cfg["reports"], os.path.join(cfg["out"], "test_bars.png")))
    if cfg["trajectories"]:
        if not cfg["scenario"]:
            raise ContractError("rendering trajectories needs --scenario")
        from .reporting import render_trajectories

        files = {os.path.basename(p): p for pat in cfg["trajectories"] for p in sorted(globmod.glob(pat))}
        if not files:
            raise ContractError("no trajectory files matched")
        written.append(
            render_trajectories(files, cfg["scenario"], os.path.join(cfg["out"], "trajectories.png"))
        )
    if not written:
        raise ContractError("report needs at least one of --curves, --reports, --trajectories")
    print(json.dumps({"figures": written}, sort_keys=True) if args.json else "\n".join(written))
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snarekit", description=__doc__)
    parser.add_argument("--version", action="version", version=f"snarekit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON file with default values for this command")
        p.add_argument("--json", action="store_true", help="machine-readable stdout")

    p = sub.add_parser("generate", help="generate a benchmark dataset")
    p.add_argument("--family", choices=["ncp", "qcqp"])
    p.add_argument("--n", type=int)
    p.add_argument("--neq", type=int)
    p.add_argument("--nineq", type=int)
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--oracle", action="store_true", default=None)
    p.add_argument("--no-oracle", dest="oracle", action="store_false")
    p.add_argument("--workers", type=int)
    add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train on a dataset or a control scenario")
    p.add_argument("--dataset")
    p.add_argument("--scenario")
    p.add_argument("--mode", choices=["snare", "soft", "soft-epochs-then-hard", "penalty-grad"])
    p.add_argument("--seeds", type=int)
    p.add_argument("--seed-base", dest="seed_base", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--decay", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--mu", type=float)
    p.add_argument("--tol", type=float)
    p.add_argument("--lam", type=float)
    p.add_argument("--hidden")
    p.add_argument("--soft-epochs", dest="soft_epochs", type=int)
    p.add_argument("--starts", type=int, help="initial states for scenario training")
    p.add_argument("--out")
    p.add_argument("--no-figures", dest="figures", action="store_false", default=None)
    add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate checkpoints on a dataset's test split")
    p.add_argument("--dataset")
    p.add_argument("--checkpoints", nargs="+")
    p.add_argument("--tol-sweep", dest="tol_sweep")
    p.add_argument("--method", choices=list(EVAL_METHODS))
    p.add_argument("--label", help="method column label in the report (e.g. 'snare lam=0.1')")
    p.add_argument("--lam", type=float)
    p.add_argument("--max-iters", dest="max_iters", type=int)
    p.add_argument("--split", choices=["train", "valid", "test"])
    p.add_argument("--out")
    p.add_argument("--no-figures", dest="figures", action="store_false", default=None)
    add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rollout", help="roll out a policy (or the nominal controller)")
    p.add_argument("--scenario")
    p.add_argument("--checkpoint")
    p.add_argument("--steps", type=int)
    p.add_argument("--starts", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--no-figures", dest="figures", action="store_false", default=None)
    add_common(p)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("compare", help="train and evaluate all methods on one dataset")
    p.add_argument("--dataset")
    p.add_argument("--seeds", type=int)
    p.add_argument("--seed-base", dest="seed_base", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--decay", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--mu", type=float)
    p.add_argument("--tol", type=float)
    p.add_argument("--lam", type=float)
    p.add_argument("--hidden")
    p.add_argument("--soft-epochs", dest="soft_epochs", type=int)
    p.add_argument("--out")
    p.add_argument("--no-figures", dest="figures", action="store_false", default=None)
    add_common(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("report", help="render figures from emitted CSV bundles")
    p.add_argument("--curves", nargs="+")
    p.add_argument("--reports")
    p.add_argument("--trajectories", nargs="+")
    p.add_argument("--scenario")
    p.add_argument("--decay", type=int)
    p.add_argument("--out")
    add_common(p)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ContractError, ShapeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SnarekitError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
