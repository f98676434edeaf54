"""Command-line entry point.

Subcommands: gen | train | run | eval. One flat key-value config file per
run plus repeatable --set key=value overrides; every seed is explicit.
Artifacts live in the --out directory under fixed names:

    dataset.txt dataset.manifest dataset.knn   (gen)
    model.npz training_log.csv                 (train)
    log_<controller>_seed<seed>.csv            (run)
    summary.txt regret_<controller>_seed<seed>.csv   (eval)

`paretonav --dump-defaults` prints the generated reference page of every
config key with its default.
"""

from __future__ import annotations

import argparse
import glob
import math
import os
import re
import sys

import numpy as np

from . import kvconfig
from .dataset import (
    ContextBounds,
    DatasetEmpty,
    SemanticParams,
    build_dataset,
    load_dataset,
    save_dataset,
)
from .env import EnvConfig
from .evaluation import (
    FixedWeightController,
    GpcController,
    OracleReplayController,
    PProfile,
    RolloutConfig,
    TrajectoryLog,
    default_p_profile,
    feasibility_report,
    regret,
    rollout,
)
from .manifold import Diverged, LossWeights, ManifoldModel, TrainConfig, train
from .navigator import NavConfig

CONTROLLERS = ("gpc", "fixed_weight", "oracle_replay")

GEN_DEFAULTS = {
    "gen.n_contexts": "100",
    "gen.n_weights": "10",
    "gen.seed": "0",
    "gen.tighten": "0.02",
    "gen.tighten_u": "auto",
    "gen.kappa": "10",
    "gen.grid_res": "33",
}

TRAIN_DEFAULTS = {
    "train.epochs": "300",
    "train.batch": "64",
    "train.lr": "0.001",
    "train.lr_min": "1e-05",
    "train.n_z": "8",
    "train.hidden": "64",
    "train.depth": "3",
    "train.cap": "10.0",
    "train.omega1": "1.0",
    "train.omega2": "0.5",
    "train.beta": "0.5",
    "train.seed": "0",
    "train.val_frac": "0.1",
    "train.test_frac": "0.1",
}

EVAL_DEFAULTS = {
    "eval.horizon": "200",
    "eval.seeds": "0",
    "eval.controllers": "gpc",
    "eval.w_fixed_1": "0.5",
    "eval.w_fixed_2": "0.5",
    "eval.delta_r": "1e-06",
    "eval.grid_res": "33",
    "eval.terminate_on_violation": "auto",
    "eval.profile_t": "auto",
    "eval.profile_p": "auto",
}


def all_defaults() -> dict[str, str]:
    items: dict[str, str] = {}
    for k, v in EnvConfig().to_kv().items():
        items[f"env.{k}"] = v
    for k, v in SemanticParams().to_kv().items():
        items[f"sem.{k}"] = v
    for k, v in ContextBounds().to_kv().items():
        items[f"bounds.{k}"] = v
    for k, v in NavConfig().to_kv().items():
        items[f"nav.{k}"] = v
    items.update(GEN_DEFAULTS)
    items.update(TRAIN_DEFAULTS)
    items.update(EVAL_DEFAULTS)
    return items


class ConfigError(Exception):
    pass


class RunConfig:
    """Flat key-value run configuration with defaults and overrides."""

    def __init__(self, items: dict[str, str]):
        base = all_defaults()
        unknown = [k for k in items if k not in base]
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        self.items = dict(base)
        self.items.update(items)

    def sub(self, prefix: str) -> dict[str, str]:
        plen = len(prefix)
        return {k[plen:]: v for k, v in self.items.items() if k.startswith(prefix)}

    def env(self) -> EnvConfig:
        return EnvConfig.from_kv(self.sub("env."))

    def sem(self) -> SemanticParams:
        return SemanticParams.from_kv(self.sub("sem."))

    def bounds(self) -> ContextBounds:
        return ContextBounds.from_kv(self.sub("bounds."))

    def nav(self) -> NavConfig:
        return NavConfig.from_kv(self.sub("nav."))

    def train_cfg(self) -> TrainConfig:
        g = self.items
        return TrainConfig(
            epochs=int(g["train.epochs"]),
            batch_size=int(g["train.batch"]),
            lr=float(g["train.lr"]),
            lr_min=float(g["train.lr_min"]),
            n_z=int(g["train.n_z"]),
            hidden=int(g["train.hidden"]),
            depth=int(g["train.depth"]),
            cap=float(g["train.cap"]),
            weights=LossWeights(
                omega1=float(g["train.omega1"]),
                omega2=float(g["train.omega2"]),
                beta=float(g["train.beta"]),
            ),
            seed=int(g["train.seed"]),
            val_frac=float(g["train.val_frac"]),
            test_frac=float(g["train.test_frac"]),
        )

    def getfloat(self, key: str) -> float:
        return float(self.items[key])

    def getint(self, key: str) -> int:
        return int(self.items[key])

    def get(self, key: str) -> str:
        return self.items[key]


def load_run_config(args) -> RunConfig:
    items: dict[str, str] = {}
    if args.config:
        if not os.path.exists(args.config):
            raise ConfigError(f"config file not found: {args.config}")
        items.update(kvconfig.read_kv(args.config))
    for kv in args.set or []:
        if "=" not in kv:
            raise ConfigError(f"--set expects key=value, got {kv!r}")
        k, _, v = kv.partition("=")
        items[k.strip()] = v.strip()
    if getattr(args, "mode", None):
        items["env.mode"] = args.mode
    return RunConfig(items)


def _paths(out: str) -> dict[str, str]:
    return {
        "records": os.path.join(out, "dataset.txt"),
        "manifest": os.path.join(out, "dataset.manifest"),
        "knn": os.path.join(out, "dataset.knn"),
        "model": os.path.join(out, "model.npz"),
        "train_log": os.path.join(out, "training_log.csv"),
        "summary": os.path.join(out, "summary.txt"),
    }


def cmd_gen(args) -> int:
    try:
        cfg = load_run_config(args)
        env_cfg = cfg.env()
        sem = cfg.sem()
        bounds = cfg.bounds()
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    tighten_u_raw = cfg.get("gen.tighten_u")
    tighten_u = None if tighten_u_raw == "auto" else float(tighten_u_raw)
    try:
        ds = build_dataset(
            env_cfg, sem,
            n_contexts=cfg.getint("gen.n_contexts"),
            n_weights=cfg.getint("gen.n_weights"),
            seed=cfg.getint("gen.seed"),
            bounds=bounds,
            tighten=cfg.getfloat("gen.tighten"),
            tighten_u=tighten_u,
            kappa=cfg.getint("gen.kappa"),
            grid_res=cfg.getint("gen.grid_res"),
        )
    except DatasetEmpty as exc:
        print(f"dataset empty: {exc}", file=sys.stderr)
        return 2
    p = _paths(args.out)
    os.makedirs(args.out, exist_ok=True)
    save_dataset(ds, p["records"], p["manifest"], p["knn"])
    print(
        f"wrote {ds.manifest.n_samples} samples from "
        f"{ds.manifest.n_contexts - ds.manifest.n_skipped}/{ds.manifest.n_contexts} "
        f"contexts ({ds.manifest.n_skipped} skipped) to {p['records']}"
    )
    return 0


def cmd_train(args) -> int:
    try:
        cfg = load_run_config(args)
        tcfg = cfg.train_cfg()
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    p = _paths(args.out)
    if not (os.path.exists(p["records"]) and os.path.exists(p["manifest"])):
        print(f"dataset not found under {args.out}", file=sys.stderr)
        return 1
    knn = p["knn"] if os.path.exists(p["knn"]) else None
    ds = load_dataset(p["records"], p["manifest"], knn)
    try:
        model, log = train(ds, tcfg)
    except Diverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 2
    model.save(p["model"])
    header = "epoch,lr,recon_x,action,recon_s,consist,local,train_total,val_total"
    lines = [header]
    for row in log:
        lines.append(",".join(kvconfig.format_float(row[k]) for k in header.split(",")))
    kvconfig.write_text_atomic(p["train_log"], "\n".join(lines) + "\n")
    print(
        f"trained {tcfg.epochs} epochs; final val_total="
        f"{log[-1]['val_total']:.6g}; model at {p['model']}"
    )
    return 0


def _profile_for(cfg: RunConfig, horizon: int) -> PProfile:
    t_raw = cfg.get("eval.profile_t")
    p_raw = cfg.get("eval.profile_p")
    if t_raw == "auto" or p_raw == "auto":
        return default_p_profile(horizon)
    knot_t = np.array([float(x) for x in t_raw.split(",")])
    knot_p = np.array([float(x) for x in p_raw.split(",")])
    return PProfile(knot_t, knot_p)


def cmd_run(args) -> int:
    try:
        cfg = load_run_config(args)
        env_cfg = cfg.env()
        sem = cfg.sem()
        nav = cfg.nav()
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    controllers = (args.controllers or cfg.get("eval.controllers")).split(",")
    controllers = [c.strip() for c in controllers if c.strip()]
    for c in controllers:
        if c not in CONTROLLERS:
            print(f"unknown controller {c!r}; choose from {CONTROLLERS}", file=sys.stderr)
            return 1
    seeds = [int(s) for s in (args.seeds or cfg.get("eval.seeds")).split(",")]
    horizon = cfg.getint("eval.horizon")
    grid_res = cfg.getint("eval.grid_res")
    profile = _profile_for(cfg, horizon)
    p = _paths(args.out)

    model = None
    if "gpc" in controllers:
        if not os.path.exists(p["model"]):
            print(f"model not found at {p['model']}", file=sys.stderr)
            return 1
        model = ManifoldModel.load(p["model"])

    tov_raw = cfg.get("eval.terminate_on_violation")
    w_fixed = np.array([cfg.getfloat("eval.w_fixed_1"), cfg.getfloat("eval.w_fixed_2")])
    os.makedirs(args.out, exist_ok=True)
    for name in controllers:
        # Paper-style early-termination default: on for baselines, off for
        # the navigator's diagnostics runs.
        if tov_raw == "auto":
            tov = name != "gpc"
        else:
            tov = tov_raw.lower() in ("1", "true", "yes", "on")
        for seed in seeds:
            if name == "gpc":
                ctl = GpcController(model, nav, env_cfg, sem)
            elif name == "fixed_weight":
                ctl = FixedWeightController(w_fixed, env_cfg, grid_res)
            else:
                ctl = OracleReplayController(env_cfg, grid_res)
            rcfg = RolloutConfig(
                horizon=horizon, terminate_on_violation=tov, oracle_grid_res=grid_res
            )
            log = rollout(ctl, env_cfg, profile, horizon, seed, sem, rcfg)
            path = os.path.join(args.out, f"log_{name}_seed{seed}.csv")
            log.save(path)
            print(f"{name} seed={seed}: {len(log)} steps terminal={log.terminal} -> {path}")
    return 0


_LOG_RE = re.compile(r"log_([a-z_]+)_seed(\d+)\.csv$")


def cmd_eval(args) -> int:
    try:
        cfg = load_run_config(args)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    delta_r = cfg.getfloat("eval.delta_r")
    want = None
    if args.controllers:
        want = {c.strip() for c in args.controllers.split(",")}
    found: dict[str, list[tuple[int, str]]] = {}
    for path in sorted(glob.glob(os.path.join(args.out, "log_*_seed*.csv"))):
        mobj = _LOG_RE.search(os.path.basename(path))
        if not mobj:
            continue
        name, seed = mobj.group(1), int(mobj.group(2))
        if want is not None and name not in want:
            continue
        found.setdefault(name, []).append((seed, path))
    if not found:
        print(f"no trajectory logs found under {args.out}", file=sys.stderr)
        return 1

    lines = [
        "controller,n,regret_mean_pct,regret_sem_pct,obs_viol_pct,slew_viol_pct,"
        "input_viol_pct,fail_pct,mean_cycle_ms"
    ]
    for name in sorted(found):
        entries = sorted(found[name])
        terminals, obs_v, slew_v, in_v, fails, walls = [], [], [], [], [], []
        for seed, path in entries:
            log = TrajectoryLog.load(path)
            if len(log) == 0:
                fails.append(log.terminal != "completed")
                continue
            curve = regret(log, delta_r)
            terminals.append(100.0 * curve.terminal())
            rep = feasibility_report(log)
            obs_v.append(rep["obstacle_pct"])
            slew_v.append(rep["slew_pct"])
            in_v.append(rep["input_pct"])
            fails.append(rep["fail"])
            walls.append(float(np.mean(log.col("wall_ms"))))
            curve_path = os.path.join(args.out, f"regret_{name}_seed{seed}.csv")
            rows = ["t,R_t"] + [
                f"{int(t)},{kvconfig.format_float(r)}"
                for t, r in zip(log.col("t"), curve.r)
            ]
            kvconfig.write_text_atomic(curve_path, "\n".join(rows) + "\n")
        n = len(terminals)
        mean = float(np.mean(terminals)) if n else math.nan
        sem_v = float(np.std(terminals, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        lines.append(
            f"{name},{n},{mean:.6f},{sem_v:.6f},"
            f"{float(np.mean(obs_v)) if obs_v else math.nan:.6f},"
            f"{float(np.mean(slew_v)) if slew_v else math.nan:.6f},"
            f"{float(np.mean(in_v)) if in_v else math.nan:.6f},"
            f"{100.0 * float(np.mean(fails)):.6f},"
            f"{float(np.mean(walls)) if walls else math.nan:.6f}"
        )
    p = _paths(args.out)
    kvconfig.write_text_atomic(p["summary"], "\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="paretonav",
        description="Pareto-manifold construction and latent navigation benchmark",
    )
    parser.add_argument("--dump-defaults", action="store_true",
                        help="print the config reference (all keys with defaults) and exit")
    sub = parser.add_subparsers(dest="command")
    for name, fn in (("gen", cmd_gen), ("train", cmd_train),
                     ("run", cmd_run), ("eval", cmd_eval)):
        sp = sub.add_parser(name)
        sp.add_argument("--config", default=None, help="flat key-value config file")
        sp.add_argument("--set", action="append", metavar="K=V",
                        help="override one config key (repeatable)")
        sp.add_argument("--out", default="out", help="artifact directory")
        sp.add_argument("--mode", choices=("convex", "nonconvex"), default=None)
        if name in ("run", "eval"):
            sp.add_argument("--seeds", default=None, help="comma-separated seed list")
            sp.add_argument("--controllers", default=None,
                            help=f"comma-separated subset of {','.join(CONTROLLERS)}")
        sp.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.dump_defaults:
        for k, v in all_defaults().items():
            print(f"{k} = {v}")
        return 0
    if not getattr(args, "command", None):
        parser.print_help()
        return 1
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
