"""Double-integrator navigation benchmark.

Point mass in the plane with acceleration control, two competing quadratic
objectives (reach a recovery location vs. reach the mission goal cheaply),
a moving elliptical keep-out region driven by a scalar operating condition
p, an input-norm bound and a slew (ramp-rate) bound on consecutive actions.

All functions are pure over immutable inputs and safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kvconfig


def _vec2(x) -> np.ndarray:
    a = np.asarray(x, dtype=float).reshape(-1)
    if a.shape != (2,):
        raise ValueError(f"expected 2-vector, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class PhysState:
    """Position and velocity of the point mass."""

    q: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", _vec2(self.q))
        object.__setattr__(self, "v", _vec2(self.v))


@dataclass(frozen=True)
class Context:
    """One decision instance: physical state, previous action, operating condition."""

    state: PhysState
    prev_action: np.ndarray
    p: float

    def __post_init__(self):
        object.__setattr__(self, "prev_action", _vec2(self.prev_action))
        object.__setattr__(self, "p", float(self.p))

    def observation(self) -> np.ndarray:
        """Full-observability observation vector (q, v, u_prev, p), length 7."""
        return np.concatenate(
            [self.state.q, self.state.v, self.prev_action, [self.p]]
        )


def context_from_observation(x: np.ndarray) -> Context:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape != (7,):
        raise ValueError(f"observation must have length 7, got {x.shape}")
    return Context(PhysState(x[0:2], x[2:4]), x[4:6], float(x[6]))


@dataclass(frozen=True)
class ConstraintMargins:
    """Signed margins, <= 0 feasible: ellipse keep-out, input norm, slew."""

    g_obs: float
    g_input: float
    g_slew: float

    def as_array(self) -> np.ndarray:
        return np.array([self.g_obs, self.g_input, self.g_slew])

    def feasible(self, tol: float = 0.0) -> bool:
        return bool(np.all(self.as_array() <= tol))


# Serialized field order for EnvConfig key-value files. Vector fields expand
# to one key per component with _1/_2 suffixes.
_VEC_FIELDS = ("q_goal", "q_safe_base", "safe_offset", "c0", "rho_c")
_SCALAR_FIELDS = (
    "dt", "a", "b", "u_max", "r_max", "beta_u",
    "lambda_nc", "omega_nc", "d_act", "delta_e",
)


@dataclass
class EnvConfig:
    """Benchmark geometry and constants. All defaults overridable."""

    dt: float = 0.25
    q_goal: np.ndarray = field(default_factory=lambda: np.array([1.5, 0.0]))
    q_safe_base: np.ndarray = field(default_factory=lambda: np.array([-0.5, 1.0]))
    safe_offset: np.ndarray = field(default_factory=lambda: np.array([0.0, -0.2]))
    c0: np.ndarray = field(default_factory=lambda: np.array([0.75, -0.9]))
    rho_c: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.32]))
    a: float = 0.6
    b: float = 0.4
    u_max: float = 1.0
    r_max: float = 0.75
    beta_u: float = 0.02
    lambda_nc: float = 0.3
    omega_nc: float = 4.0
    mode: str = "convex"
    d_act: float = 2.0   # ellipse-margin distance at which the safety indicator reaches 0
    delta_e: float = 0.05  # constant background drive of the performance indicator

    def __post_init__(self):
        for name in _VEC_FIELDS:
            setattr(self, name, _vec2(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if self.mode not in ("convex", "nonconvex"):
            raise ValueError(f"mode must be 'convex' or 'nonconvex', got {self.mode!r}")
        for name in ("a", "b", "u_max", "r_max", "dt", "d_act"):
            if not getattr(self, name) > 0:
                raise ValueError(f"EnvConfig.{name} must be > 0")
        for name in ("beta_u", "lambda_nc", "delta_e"):
            if getattr(self, name) < 0:
                raise ValueError(f"EnvConfig.{name} must be >= 0")

    def to_kv(self) -> dict[str, str]:
        items: dict[str, str] = {"mode": self.mode}
        for name in _SCALAR_FIELDS:
            items[name] = kvconfig.format_float(getattr(self, name))
        for name in _VEC_FIELDS:
            vec = getattr(self, name)
            items[f"{name}_1"] = kvconfig.format_float(vec[0])
            items[f"{name}_2"] = kvconfig.format_float(vec[1])
        return items

    @classmethod
    def from_kv(cls, items: dict[str, str]) -> "EnvConfig":
        kwargs = {}
        if "mode" in items:
            kwargs["mode"] = items["mode"]
        for name in _SCALAR_FIELDS:
            if name in items:
                kwargs[name] = float(items[name])
        for name in _VEC_FIELDS:
            k1, k2 = f"{name}_1", f"{name}_2"
            if k1 in items or k2 in items:
                kwargs[name] = np.array([float(items[k1]), float(items[k2])])
        return cls(**kwargs)

    def save(self, path: str) -> None:
        kvconfig.write_kv(path, self.to_kv())

    @classmethod
    def load(cls, path: str) -> "EnvConfig":
        return cls.from_kv(kvconfig.read_kv(path))


def step_dynamics(state: PhysState, action: np.ndarray, dt: float) -> PhysState:
    """Exact discrete double-integrator step."""
    u = _vec2(action)
    q_next = state.q + dt * state.v + 0.5 * dt * dt * u
    v_next = state.v + dt * u
    return PhysState(q_next, v_next)


def next_position(ctx: Context, action: np.ndarray, cfg: EnvConfig) -> np.ndarray:
    u = np.asarray(action, dtype=float)
    return ctx.state.q + cfg.dt * ctx.state.v + 0.5 * cfg.dt * cfg.dt * u


def q_safe(cfg: EnvConfig, p: float) -> np.ndarray:
    """Recovery location for operating condition p (affine in p)."""
    return cfg.q_safe_base + cfg.safe_offset * p


def ellipse_center(cfg: EnvConfig, p: float) -> np.ndarray:
    return cfg.c0 + cfg.rho_c * p


def ellipse_margin(q: np.ndarray, p: float, cfg: EnvConfig) -> float:
    """Keep-out margin at position q: <= 0 outside or on the ellipse, > 0 inside."""
    c = ellipse_center(cfg, p)
    dq = np.asarray(q, dtype=float) - c
    return float(1.0 - (dq[0] / cfg.a) ** 2 - (dq[1] / cfg.b) ** 2)


def eval_objectives(ctx: Context, action: np.ndarray, cfg: EnvConfig) -> np.ndarray:
    """Objective vector (J1, J2) evaluated on the propagated next position.

    J1: squared distance of the next position to the recovery location.
    J2: squared distance to the mission goal plus control effort; in
    nonconvex mode a smooth multi-basin sinusoidal term is added.
    """
    u = _vec2(action)
    qn = next_position(ctx, u, cfg)
    j1 = float(np.sum((qn - q_safe(cfg, ctx.p)) ** 2))
    dg = qn - cfg.q_goal
    j2 = float(np.sum(dg**2)) + cfg.beta_u * float(np.sum(u**2))
    if cfg.mode == "nonconvex":
        j2 += cfg.lambda_nc * float(np.sum(1.0 - np.cos(cfg.omega_nc * dg)))
    return np.array([j1, j2])


def objective_gradients(
    ctx: Context, action: np.ndarray, cfg: EnvConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Objectives plus exact gradients w.r.t. q, v, p, and u.

    Returns (J, dJ_dq, dJ_dv, dJ_dp, dJ_du) with J shaped (2,) and each
    gradient block shaped (2, 2) except dJ_dp shaped (2,). Rows index the
    objective. Used by the latent navigator's energy gradient.
    """
    u = _vec2(action)
    qn = next_position(ctx, u, cfg)
    m = 0.5 * cfg.dt * cfg.dt  # d(next position)/d(u), per component

    r1 = qn - q_safe(cfg, ctx.p)
    r2 = qn - cfg.q_goal
    j1 = float(np.sum(r1**2))
    j2 = float(np.sum(r2**2)) + cfg.beta_u * float(np.sum(u**2))

    # dJ/d(next position), rows = objectives
    dJ_dqn = np.stack([2.0 * r1, 2.0 * r2])
    if cfg.mode == "nonconvex":
        s = np.sin(cfg.omega_nc * r2)
        j2 += cfg.lambda_nc * float(np.sum(1.0 - np.cos(cfg.omega_nc * r2)))
        dJ_dqn[1] += cfg.lambda_nc * cfg.omega_nc * s

    dJ_dq = dJ_dqn.copy()                      # dqn/dq = I
    dJ_dv = cfg.dt * dJ_dqn                    # dqn/dv = dt I
    dJ_du = m * dJ_dqn                         # dqn/du = m I
    dJ_du[1] += 2.0 * cfg.beta_u * u
    # p enters J1 through the recovery location only
    dJ_dp = np.array([float(-2.0 * r1 @ cfg.safe_offset), 0.0])
    return np.array([j1, j2]), dJ_dq, dJ_dv, dJ_dp, dJ_du


def eval_constraints(ctx: Context, action: np.ndarray, cfg: EnvConfig) -> ConstraintMargins:
    """Margins at the propagated next position; all <= 0 means feasible."""
    u = _vec2(action)
    qn = next_position(ctx, u, cfg)
    g_obs = ellipse_margin(qn, ctx.p, cfg)
    g_input = float(np.linalg.norm(u)) - cfg.u_max
    g_slew = float(np.linalg.norm(u - ctx.prev_action)) - cfg.r_max
    return ConstraintMargins(g_obs, g_input, g_slew)


def constraint_gradients(ctx: Context, action: np.ndarray, cfg: EnvConfig) -> np.ndarray:
    """d(margin)/du for (g_obs, g_input, g_slew), shape (3, 2).

    Norm gradients fall back to zero at the non-differentiable origin.
    """
    u = _vec2(action)
    qn = next_position(ctx, u, cfg)
    c = ellipse_center(cfg, ctx.p)
    m = 0.5 * cfg.dt * cfg.dt
    g_obs_du = m * np.array(
        [-2.0 * (qn[0] - c[0]) / cfg.a**2, -2.0 * (qn[1] - c[1]) / cfg.b**2]
    )
    nu = np.linalg.norm(u)
    g_in_du = u / nu if nu > 1e-12 else np.zeros(2)
    du = u - ctx.prev_action
    ndu = np.linalg.norm(du)
    g_sl_du = du / ndu if ndu > 1e-12 else np.zeros(2)
    return np.stack([g_obs_du, g_in_du, g_sl_du])


def violation_indicators(state: PhysState, p: float, cfg: EnvConfig) -> np.ndarray:
    """Normalized indicators in [0, 1]^2: (safety, performance).

    The safety indicator is 1 on or inside the keep-out boundary and decays
    linearly (in the normalized ellipse margin) to 0 at distance d_act
    outside. The performance indicator is a small constant background.
    """
    m = ellipse_margin(state.q, p, cfg)
    d_ell = max(0.0, -m)
    delta1 = float(np.clip(1.0 - d_ell / cfg.d_act, 0.0, 1.0))
    return np.array([delta1, cfg.delta_e])
