"""Closed-loop evaluation harness.

Rollouts over a piecewise-linear operating-condition profile, a per-step
adaptive oracle (priority-scalarized constrained optimum at each visited
state), an optional coarse dynamic-programming oracle, normalized dynamic
regret, feasibility reporting, and the fixed-weight scalarization
baseline.

The per-step priority sequence recorded for regret is computed from the
true visited state (violation indicators -> semantic label) and is the
same construction for every controller, so regret numbers are comparable
across controllers and oracle dominance holds step by step.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import kvconfig
from .dataset import SemanticParams, semantic_label
from .env import (
    ConstraintMargins,
    Context,
    EnvConfig,
    PhysState,
    eval_constraints,
    eval_objectives,
    step_dynamics,
    violation_indicators,
)
from .manifold import ManifoldModel
from .navigator import NavConfig, NavigatorState, control_cycle, initial_state
from .scalarize import InfeasibleContext, SolveReport, brute_force_oracle, solve_scalarized


class GridTooLarge(Exception):
    """DP discretization exceeds the configured cell budget."""


@dataclass
class PProfile:
    """Piecewise-linear operating-condition trajectory p(t) over step index."""

    knot_t: np.ndarray
    knot_p: np.ndarray

    def __post_init__(self):
        self.knot_t = np.asarray(self.knot_t, dtype=float).reshape(-1)
        self.knot_p = np.asarray(self.knot_p, dtype=float).reshape(-1)
        if self.knot_t.shape != self.knot_p.shape or len(self.knot_t) < 1:
            raise ValueError("profile knots must be nonempty and equal length")
        if np.any(np.diff(self.knot_t) < 0):
            raise ValueError("profile knot times must be nondecreasing")

    def at(self, t: float) -> float:
        return float(np.interp(t, self.knot_t, self.knot_p))

    def sequence(self, horizon: int) -> np.ndarray:
        return np.array([self.at(t) for t in range(horizon)])

    @classmethod
    def constant(cls, p: float) -> "PProfile":
        return cls(np.array([0.0]), np.array([p]))


def default_p_profile(horizon: int) -> PProfile:
    """Obstacle crossing: p ramps up slowly, holds at peak, and retreats."""
    h = float(max(horizon, 1))
    return PProfile(
        knot_t=np.array([0.0, 0.05 * h, 0.65 * h, 0.78 * h, 0.95 * h, h]),
        knot_p=np.array([0.0, 0.0, 2.0, 2.0, 0.0, 0.0]),
    )


def per_step_oracle(
    ctx: Context,
    sigma: np.ndarray,
    cfg: EnvConfig,
    grid_res: int = 33,
) -> SolveReport:
    """Priority-scalarized untightened optimum at one context.

    Better of the brute-force grid (with polish) and the warm-started
    gradient solver; deterministic. Raises InfeasibleContext when no
    feasible action exists.
    """
    rep_grid = brute_force_oracle(ctx, sigma, grid_res, 0.0, cfg)
    rep_desc = solve_scalarized(ctx, sigma, 0.0, cfg, grid_res=grid_res)
    if rep_desc.scalarized(sigma) <= rep_grid.scalarized(sigma):
        return rep_desc
    return rep_grid


class GpcController:
    """Latent-manifold navigation controller."""

    name = "gpc"

    def __init__(self, model: ManifoldModel, nav: NavConfig, env_cfg: EnvConfig,
                 sem: SemanticParams):
        self.model = model
        self.nav = nav
        self.env_cfg = env_cfg
        self.sem = sem
        self.state: NavigatorState | None = None

    def reset(self, x0: np.ndarray, u_prev: np.ndarray) -> None:
        self.state = initial_state(self.model, x0, u_prev, self.nav)

    def act(self, ctx: Context, sigma_oracle: np.ndarray) -> tuple[np.ndarray, dict]:
        u, self.state = control_cycle(
            ctx.observation(), self.state, self.model, self.nav, self.env_cfg, self.sem
        )
        d = self.state.last_diag
        return u, {
            "sigma_f": self.state.sigma_f.copy(),
            "phi_normal": d.phi_normal,
            "phi_tangent": d.phi_tangent,
        }


class FixedWeightController:
    """Constant-scalarization baseline: re-solves the teacher each step."""

    name = "fixed_weight"

    def __init__(self, w_fixed: np.ndarray, env_cfg: EnvConfig, grid_res: int = 33):
        self.w = np.asarray(w_fixed, dtype=float)
        self.env_cfg = env_cfg
        self.grid_res = grid_res

    def reset(self, x0: np.ndarray, u_prev: np.ndarray) -> None:
        pass

    def act(self, ctx: Context, sigma_oracle: np.ndarray) -> tuple[np.ndarray, dict]:
        u = baseline_fixed_weight(ctx, self.w, self.env_cfg, self.grid_res)
        return u, {"sigma_f": self.w.copy(), "phi_normal": 0.0, "phi_tangent": 0.0}


class OracleReplayController:
    """Applies the per-step oracle's own action (zero regret by definition)."""

    name = "oracle_replay"

    def __init__(self, env_cfg: EnvConfig, grid_res: int = 33):
        self.env_cfg = env_cfg
        self.grid_res = grid_res

    def reset(self, x0: np.ndarray, u_prev: np.ndarray) -> None:
        pass

    def act(self, ctx: Context, sigma_oracle: np.ndarray) -> tuple[np.ndarray, dict]:
        rep = per_step_oracle(ctx, sigma_oracle, self.env_cfg, self.grid_res)
        return rep.action, {"sigma_f": sigma_oracle.copy(), "phi_normal": 0.0,
                            "phi_tangent": 0.0}


def baseline_fixed_weight(
    ctx: Context, w_fixed: np.ndarray, cfg: EnvConfig, grid_res: int = 33
) -> np.ndarray:
    """Untightened scalarized solve at a constant weight."""
    return solve_scalarized(ctx, w_fixed, 0.0, cfg, grid_res=grid_res).action


LOG_COLUMNS = (
    "t",
    "q1", "q2", "v1", "v2", "uprev1", "uprev2", "p",
    "u1", "u2", "J1", "J2",
    "g_obs", "g_input", "g_slew",
    "sigmaf1", "sigmaf2", "sigmaor1", "sigmaor2",
    "phi_normal", "phi_tangent",
    "Jor1", "Jor2", "wall_ms",
)

TERMINAL_FLAGS = ("completed", "violated", "solver-failure")


@dataclass
class TrajectoryLog:
    rows: np.ndarray            # (n, len(LOG_COLUMNS))
    terminal: str

    def __post_init__(self):
        if self.terminal not in TERMINAL_FLAGS:
            raise ValueError(f"unknown terminal flag {self.terminal!r}")

    def __len__(self) -> int:
        return self.rows.shape[0]

    def col(self, name: str) -> np.ndarray:
        return self.rows[:, LOG_COLUMNS.index(name)]

    def cols(self, *names: str) -> np.ndarray:
        idx = [LOG_COLUMNS.index(n) for n in names]
        return self.rows[:, idx]

    def save(self, path: str) -> None:
        lines = [f"# terminal={self.terminal}", ",".join(LOG_COLUMNS)]
        for row in self.rows:
            lines.append(",".join(kvconfig.format_float(v) for v in row))
        kvconfig.write_text_atomic(path, "\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str) -> "TrajectoryLog":
        with open(path, "r", encoding="utf-8") as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
        if not lines or not lines[0].startswith("# terminal="):
            raise ValueError("missing terminal header")
        terminal = lines[0].split("=", 1)[1]
        rows = [
            [float(tok) for tok in ln.split(",")]
            for ln in lines[2:]
        ]
        arr = np.array(rows) if rows else np.zeros((0, len(LOG_COLUMNS)))
        if arr.size and arr.shape[1] != len(LOG_COLUMNS):
            raise ValueError("bad log width")
        return cls(arr, terminal)


@dataclass
class RolloutConfig:
    horizon: int = 200
    terminate_on_violation: bool = True
    oracle_grid_res: int = 33
    sem_filter: float = 0.3   # low-pass on the recorded priority sequence
    q0_min: np.ndarray = field(default_factory=lambda: np.array([-1.2, -0.2]))
    q0_max: np.ndarray = field(default_factory=lambda: np.array([-0.8, 0.2]))
    v0_min: np.ndarray = field(default_factory=lambda: np.array([-0.1, -0.1]))
    v0_max: np.ndarray = field(default_factory=lambda: np.array([0.1, 0.1]))


def rollout(
    controller,
    env_cfg: EnvConfig,
    p_profile: PProfile,
    horizon: int,
    seed: int,
    sem: SemanticParams | None = None,
    rcfg: RolloutConfig | None = None,
) -> TrajectoryLog:
    """Simulate the closed loop: observe -> act -> step.

    Failure is a terminal flag, never an exception. The oracle column is
    filled every step; if the visited context is oracle-infeasible the
    rollout terminates with 'solver-failure'.
    """
    if sem is None:
        sem = SemanticParams()
    if rcfg is None:
        rcfg = RolloutConfig(horizon=horizon)
    rng = np.random.default_rng(seed)
    q0 = rng.uniform(rcfg.q0_min, rcfg.q0_max)
    v0 = rng.uniform(rcfg.v0_min, rcfg.v0_max)
    state = PhysState(q0, v0)
    u_prev = np.zeros(2)

    controller.reset(Context(state, u_prev, p_profile.at(0)).observation(), u_prev)

    rows = []
    terminal = "completed"
    sigma_or = np.full(2, 0.5)
    for t in range(horizon):
        p_t = p_profile.at(t)
        ctx = Context(state, u_prev, p_t)
        delta = violation_indicators(state, p_t, env_cfg)
        raw = semantic_label(delta, sem)
        # The recorded priority sequence carries the same low-pass the
        # semantic mechanism prescribes online; it is controller-independent.
        sigma_or = (1.0 - rcfg.sem_filter) * sigma_or + rcfg.sem_filter * raw
        sigma_or = sigma_or / np.sum(sigma_or)
        try:
            oracle_rep = per_step_oracle(ctx, sigma_or, env_cfg, rcfg.oracle_grid_res)
        except InfeasibleContext:
            terminal = "solver-failure"
            break
        t0 = time.perf_counter()
        try:
            u, diag = controller.act(ctx, sigma_or)
        except InfeasibleContext:
            terminal = "solver-failure"
            break
        wall_ms = (time.perf_counter() - t0) * 1e3
        J = eval_objectives(ctx, u, env_cfg)
        margins = eval_constraints(ctx, u, env_cfg)
        rows.append([
            float(t), *ctx.observation(), *u, *J,
            margins.g_obs, margins.g_input, margins.g_slew,
            *diag["sigma_f"], *sigma_or,
            diag["phi_normal"], diag["phi_tangent"],
            *oracle_rep.objectives, wall_ms,
        ])
        violated = bool(np.any(margins.as_array() > 0.0))
        if violated and rcfg.terminate_on_violation:
            terminal = "violated"
            break
        state = step_dynamics(state, u, env_cfg.dt)
        u_prev = np.asarray(u, dtype=float)

    arr = np.array(rows) if rows else np.zeros((0, len(LOG_COLUMNS)))
    return TrajectoryLog(arr, terminal)


@dataclass
class RegretCurve:
    r: np.ndarray
    delta_r: float

    def terminal(self) -> float:
        return float(self.r[-1]) if len(self.r) else 0.0


def regret(log: TrajectoryLog, delta_r: float = 1e-6) -> RegretCurve:
    """Normalized dynamic regret R_t against the per-step oracle.

    R_t = sum_{tau<=t} sigma_tau'(J_tau - Jor_tau)
          / (sum_{tau<=t} sigma_tau' Jor_tau + delta_r).
    """
    if delta_r <= 0:
        raise ValueError("delta_r must be > 0")
    if len(log) == 0:
        return RegretCurve(np.zeros(0), delta_r)
    sig = log.cols("sigmaor1", "sigmaor2")
    J = log.cols("J1", "J2")
    Jor = log.cols("Jor1", "Jor2")
    excess = np.sum(sig * (J - Jor), axis=1)
    base = np.sum(sig * Jor, axis=1)
    num = np.cumsum(excess)
    den = np.cumsum(base) + delta_r
    return RegretCurve(num / den, delta_r)


def feasibility_report(log: TrajectoryLog) -> dict:
    """Percentages of steps violating each untightened margin, plus fail flag."""
    if len(log) == 0:
        raise ValueError("log is empty")
    n = len(log)
    return {
        "obstacle_pct": 100.0 * float(np.sum(log.col("g_obs") > 0.0)) / n,
        "input_pct": 100.0 * float(np.sum(log.col("g_input") > 0.0)) / n,
        "slew_pct": 100.0 * float(np.sum(log.col("g_slew") > 0.0)) / n,
        "fail": log.terminal != "completed",
    }


@dataclass
class DpGrids:
    """Axis grids for the coarse DP oracle; action axes double as the
    previous-action axes."""

    q1: np.ndarray
    q2: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    u1: np.ndarray
    u2: np.ndarray

    @classmethod
    def regular(cls, n_q=5, n_v=5, n_u=5, q_lo=(-1.5, -1.0), q_hi=(2.0, 1.0),
                v_lo=(-1.5, -1.5), v_hi=(1.5, 1.5), u_abs=2.0) -> "DpGrids":
        return cls(
            np.linspace(q_lo[0], q_hi[0], n_q), np.linspace(q_lo[1], q_hi[1], n_q),
            np.linspace(v_lo[0], v_hi[0], n_v), np.linspace(v_lo[1], v_hi[1], n_v),
            np.linspace(-u_abs, u_abs, n_u), np.linspace(-u_abs, u_abs, n_u),
        )


def _snap(axis: np.ndarray, vals: np.ndarray) -> np.ndarray:
    return np.argmin(np.abs(axis[None, :] - vals[:, None]), axis=1)


def dp_oracle(
    env_cfg: EnvConfig,
    grids: DpGrids,
    horizon: int,
    p_profile: PProfile | None = None,
    sem: SemanticParams | None = None,
    cell_budget: int = 5_000_000,
) -> tuple[np.ndarray, np.ndarray]:
    """Backward Bellman recursion on the snapped-state discretization.

    State is (q, v, u_prev) on the grid; actions live on the (u1, u2)
    axes; infeasible transitions are excluded; the stage cost is the
    state-adaptive priority-scalarized objective. Returns (values,
    policy) with values shaped (horizon+1, n_states) and policy
    (horizon, n_states) holding flat action indices (-1 = infeasible).
    """
    if sem is None:
        sem = SemanticParams()
    if p_profile is None:
        p_profile = PProfile.constant(0.0)
    axes = [grids.q1, grids.q2, grids.v1, grids.v2, grids.u1, grids.u2]
    for ax in axes:
        if len(ax) > 9:
            raise GridTooLarge("at most 9 points per dimension")
    shape = tuple(len(ax) for ax in axes)
    n_states = int(np.prod(shape))
    actions = np.stack(
        [g.ravel() for g in np.meshgrid(grids.u1, grids.u2, indexing="ij")], axis=1
    )
    n_actions = actions.shape[0]
    if n_states * n_actions > cell_budget:
        raise GridTooLarge(f"{n_states * n_actions} cells exceed budget {cell_budget}")

    mesh = np.meshgrid(*axes, indexing="ij")
    S = np.stack([m.ravel() for m in mesh], axis=1)  # (n_states, 6)
    dt = env_cfg.dt

    values = np.zeros((horizon + 1, n_states))
    policy = -np.ones((horizon, n_states), dtype=int)

    for t in range(horizon - 1, -1, -1):
        p_t = p_profile.at(t)
        sig = np.empty((n_states, 2))
        for i in range(n_states):
            delta = violation_indicators(PhysState(S[i, 0:2], S[i, 2:4]), p_t, env_cfg)
            sig[i] = semantic_label(delta, sem)
        best = np.full(n_states, np.inf)
        best_a = -np.ones(n_states, dtype=int)
        for ai in range(n_actions):
            u = actions[ai]
            qn = S[:, 0:2] + dt * S[:, 2:4] + 0.5 * dt * dt * u[None, :]
            vn = S[:, 2:4] + dt * u[None, :]
            c = env_cfg.c0 + env_cfg.rho_c * p_t
            g_obs = (
                1.0
                - ((qn[:, 0] - c[0]) / env_cfg.a) ** 2
                - ((qn[:, 1] - c[1]) / env_cfg.b) ** 2
            )
            feas = g_obs <= 0.0
            feas &= np.linalg.norm(u) <= env_cfg.u_max
            feas &= np.linalg.norm(u[None, :] - S[:, 4:6], axis=1) <= env_cfg.r_max
            qs = env_cfg.q_safe_base + env_cfg.safe_offset * p_t
            j1 = np.sum((qn - qs[None, :]) ** 2, axis=1)
            dg = qn - env_cfg.q_goal[None, :]
            j2 = np.sum(dg**2, axis=1) + env_cfg.beta_u * float(u @ u)
            if env_cfg.mode == "nonconvex":
                j2 = j2 + env_cfg.lambda_nc * np.sum(
                    1.0 - np.cos(env_cfg.omega_nc * dg), axis=1
                )
            stage = sig[:, 0] * j1 + sig[:, 1] * j2
            iq1 = _snap(grids.q1, qn[:, 0])
            iq2 = _snap(grids.q2, qn[:, 1])
            iv1 = _snap(grids.v1, vn[:, 0])
            iv2 = _snap(grids.v2, vn[:, 1])
            iu1 = _snap(grids.u1, np.full(n_states, u[0]))
            iu2 = _snap(grids.u2, np.full(n_states, u[1]))
            nxt = np.ravel_multi_index([iq1, iq2, iv1, iv2, iu1, iu2], shape)
            total = np.where(feas, stage + values[t + 1][nxt], np.inf)
            better = total < best
            best = np.where(better, total, best)
            best_a = np.where(better, ai, best_a)
        values[t] = best
        policy[t] = best_a
    return values, policy
