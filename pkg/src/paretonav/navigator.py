"""Online latent navigation.

One control cycle: localize the latent state against the stored atlas
under a measurement-consistency tolerance, update the filtered semantic
priority from decoded-state violation indicators, descend the composite
energy (steep reconstruction well + priority-scalarized objectives) with
a velocity-capped midpoint RK2 predictor, add a small rotation residual
computed in the decoder-pullback metric eigenbasis, integrate with an
optional retraction onto the atlas, and decode + clamp the action.

Every numerically sensitive step has a NaN-safe fallback that keeps the
cycle total; fallbacks report through diagnostic flags, never exceptions.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import kvconfig
from .dataset import SemanticParams, semantic_label
from .env import Context, EnvConfig, PhysState, objective_gradients, violation_indicators
from .manifold import ManifoldModel


@dataclass
class NavConfig:
    epsilon: float = 0.2      # fast/slow timescale ratio; 1/epsilon weights the snap well
    alpha: float = 0.25       # localization smoothing
    v_max: float = 0.8        # latent speed cap
    dt: float = 0.25          # latent integration interval
    lambda_m: float = 1e-3    # pullback metric regularizer
    k_eig: int = 3            # eigenbasis size for the rotation residual
    gamma_l: float = 0.1      # rotation residual gain
    s_l: float = 1.0          # rotation angular scale
    mu_r: float = 0.15        # retraction mix toward the atlas
    sem_filter: float = 0.3   # low-pass coefficient for the semantic coordinate
    u_min: float = -1.0       # action box
    u_max_box: float = 1.0
    sigma_hat2: float = 0.0   # observation-noise variance estimate
    delta_v: float = 1e-12    # cap denominator guard

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            ("epsilon", self.epsilon > 0),
            ("alpha", 0 < self.alpha <= 1),
            ("v_max", self.v_max > 0),
            ("dt", self.dt > 0),
            ("lambda_m", self.lambda_m > 0),
            ("k_eig", self.k_eig >= 1),
            ("gamma_l", 0 <= self.gamma_l <= 1),
            ("mu_r", 0 <= self.mu_r <= 1),
            ("sem_filter", 0 < self.sem_filter <= 1),
            ("sigma_hat2", self.sigma_hat2 >= 0),
            ("u_box", self.u_min < self.u_max_box),
        ]
        for name, ok in checks:
            if not ok:
                raise ValueError(f"NavConfig.{name} out of range")

    _FLOAT_FIELDS = (
        "epsilon", "alpha", "v_max", "dt", "lambda_m", "gamma_l", "s_l",
        "mu_r", "sem_filter", "u_min", "u_max_box", "sigma_hat2", "delta_v",
    )

    def to_kv(self) -> dict[str, str]:
        items = {name: kvconfig.format_float(getattr(self, name)) for name in self._FLOAT_FIELDS}
        items["k_eig"] = str(self.k_eig)
        return items

    @classmethod
    def from_kv(cls, items: dict[str, str]) -> "NavConfig":
        kwargs = {}
        for name in cls._FLOAT_FIELDS:
            if name in items:
                kwargs[name] = float(items[name])
        if "k_eig" in items:
            kwargs["k_eig"] = int(items["k_eig"])
        return cls(**kwargs)


@dataclass
class CycleDiag:
    phi_normal: float = 0.0
    phi_tangent: float = 0.0
    cap_active: bool = False
    fallback_localize: bool = False
    fallback_k1: bool = False
    fallback_zmid: bool = False
    fallback_k2: bool = False
    fallback_lie: bool = False
    localization_residual: float = 0.0


@dataclass
class NavigatorState:
    z: np.ndarray
    u_prev: np.ndarray
    sigma_f: np.ndarray
    last_diag: CycleDiag = field(default_factory=CycleDiag)


def localize(
    x: np.ndarray,
    z_prev: np.ndarray | None,
    model: ManifoldModel,
    tau_t: float,
    alpha: float,
) -> tuple[np.ndarray, float, bool]:
    """Smoothed measurement-consistent atlas localization.

    Candidates are atlas codes whose cached decode lies within tau_t of x
    (squared residual); among them the code nearest the encoder estimate
    wins (ties to the lowest atlas index). An empty candidate set falls
    back to the minimum-residual code with a diagnostic flag.

    Returns (z, residual_of_chosen_code, fallback_used).
    """
    x = np.asarray(x, dtype=float)
    resid = np.sum((model.atlas_obs - x[None, :]) ** 2, axis=1)
    mask = resid <= tau_t
    fallback = not bool(np.any(mask))
    if fallback:
        chosen = int(np.argmin(resid))
    else:
        z_enc = model.encode_obs(x)
        cand_idx = np.nonzero(mask)[0]
        d = np.sum((model.atlas[cand_idx] - z_enc[None, :]) ** 2, axis=1)
        chosen = int(cand_idx[int(np.argmin(d))])
    z_loc = model.atlas[chosen]
    if z_prev is None or alpha >= 1.0:
        z = z_loc.copy()
    else:
        z = (1.0 - alpha) * np.asarray(z_prev, dtype=float) + alpha * z_loc
    return z, float(resid[chosen]), fallback


def semantic_online(
    z: np.ndarray,
    model: ManifoldModel,
    sem: SemanticParams,
    env_cfg: EnvConfig,
    p_obs: float,
    sigma_f: np.ndarray,
    filter_coef: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Low-pass filtered priority coordinate from the decoded state.

    The operating condition p is taken from the observation, not the
    decode. Returns (new filtered sigma, raw sigma).
    """
    shat = model.decode_obs(z)
    state = PhysState(shat[0:2], shat[2:4])
    delta = violation_indicators(state, float(p_obs), env_cfg)
    raw = semantic_label(delta, sem)
    mixed = (1.0 - filter_coef) * np.asarray(sigma_f, dtype=float) + filter_coef * raw
    mixed = np.maximum(mixed, 0.0)
    mixed = mixed / np.sum(mixed)
    return mixed, raw


def grad_energy(
    z: np.ndarray,
    x: np.ndarray,
    sigma: np.ndarray,
    model: ManifoldModel,
    epsilon: float,
    env_cfg: EnvConfig,
) -> tuple[np.ndarray, float, float]:
    """Gradient of V(z) = (1/epsilon)||x - D_s(z)||^2 + sigma'J(D_s(z), D_u(z)).

    sigma is held constant during differentiation. Returns (grad, normal
    potential, tangential potential); the caller negates for descent.
    """
    z = np.asarray(z, dtype=float)
    x = np.asarray(x, dtype=float)
    sigma = np.asarray(sigma, dtype=float)

    shat, cache_s = model.d_s.forward(z, want_cache=True)
    uhat, cache_u = model.d_u.forward(z, want_cache=True)
    r = x - shat
    phi_normal = float(np.sum(r**2))

    ctx = Context(PhysState(shat[0:2], shat[2:4]), shat[4:6], float(shat[6]))
    J, dJ_dq, dJ_dv, dJ_dp, dJ_du = objective_gradients(ctx, uhat, env_cfg)
    phi_tangent = float(sigma @ J)

    # dV/d(decoded observation), layout (q, v, u_prev, p)
    g_s = np.concatenate([
        sigma @ dJ_dq,
        sigma @ dJ_dv,
        np.zeros(2),
        [float(sigma @ dJ_dp)],
    ])
    g_s = g_s + (-2.0 / epsilon) * r
    g_u = sigma @ dJ_du

    _, dz_s = model.d_s.backward(cache_s, g_s[None, :])
    _, dz_u = model.d_u.backward(cache_u, g_u[None, :])
    grad = dz_s[0] + dz_u[0]
    return grad, phi_normal, phi_tangent


def _cap(v: np.ndarray, v_max: float, delta_v: float) -> tuple[np.ndarray, bool]:
    n = float(np.linalg.norm(v))
    scale = min(1.0, v_max / (n + delta_v))
    return v * scale, scale < 1.0


def rk2_core(
    field, z: np.ndarray, dt: float, v_max: float, delta_v: float = 1e-12
) -> tuple[np.ndarray, np.ndarray, CycleDiag]:
    """Velocity-capped midpoint predictor over an arbitrary vector field.

    Fallback ladder: non-finite first slope -> zero step; non-finite
    midpoint -> re-evaluate at z; non-finite second slope -> reuse the
    first. Each fallback raises its flag in the returned diagnostics.
    """
    diag = CycleDiag()
    z = np.asarray(z, dtype=float)
    k1_raw = np.asarray(field(z), dtype=float)
    if not np.all(np.isfinite(k1_raw)):
        diag.fallback_k1 = True
        zero = np.zeros_like(z)
        return zero, zero, diag
    k1, cap1 = _cap(k1_raw, v_max, delta_v)
    z_mid = z + 0.5 * dt * k1
    if not np.all(np.isfinite(z_mid)):
        diag.fallback_zmid = True
        z_mid = z
    k2_raw = np.asarray(field(z_mid), dtype=float)
    if not np.all(np.isfinite(k2_raw)):
        diag.fallback_k2 = True
        k2 = k1
        cap2 = cap1
    else:
        k2, cap2 = _cap(k2_raw, v_max, delta_v)
    diag.cap_active = cap1 or cap2
    return dt * k2, k2, diag


def rk2_step(
    z: np.ndarray,
    x: np.ndarray,
    sigma: np.ndarray,
    model: ManifoldModel,
    nav: NavConfig,
    env_cfg: EnvConfig,
) -> tuple[np.ndarray, np.ndarray, CycleDiag]:
    """RK2 predictor over the negated energy gradient."""

    def fld(zz):
        g, _, _ = grad_energy(zz, x, sigma, model, nav.epsilon, env_cfg)
        return -g

    return rk2_core(fld, z, nav.dt, nav.v_max, nav.delta_v)


def pullback_basis(
    z: np.ndarray, model: ManifoldModel, lambda_m: float, k_eig: int
) -> tuple[np.ndarray, np.ndarray]:
    """Top-k eigenbasis of G(z) = J_Ds' J_Ds + lambda_m I.

    Columns are ordered by descending eigenvalue with the sign fixed so
    each column's largest-magnitude entry is positive; s holds sqrt of the
    eigenvalues.
    """
    Jd = model.jacobian_ds(z)
    n_z = Jd.shape[1]
    if k_eig > n_z:
        raise ValueError("k_eig must be <= latent dimension")
    G = Jd.T @ Jd + lambda_m * np.eye(n_z)
    evals, evecs = np.linalg.eigh(G)
    order = np.argsort(evals, kind="stable")[::-1][:k_eig]
    B = evecs[:, order].copy()
    vals = evals[order]
    for c in range(B.shape[1]):
        i = int(np.argmax(np.abs(B[:, c])))
        if B[i, c] < 0:
            B[:, c] = -B[:, c]
    return B, np.sqrt(np.maximum(vals, 0.0))


def _rodrigues(v: np.ndarray, axis: np.ndarray, theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return v * c + np.cross(axis, v) * s + axis * (axis @ v) * (1.0 - c)


def lie_residual(
    dz_euc: np.ndarray,
    k2: np.ndarray,
    B: np.ndarray,
    s: np.ndarray,
    nav: NavConfig,
) -> tuple[np.ndarray, bool]:
    """Rotation residual in the pullback eigenbasis.

    Basis coordinates are partitioned into consecutive 3-blocks; each full
    block is rotated about the scale-normalized slope direction by angle
    s_l * |omega_block| * dt. Partial blocks and near-zero angular
    velocities stay unrotated. Any non-finite value collapses the residual
    to zero with a flag.
    """
    a = B.T @ dz_euc
    omega = (B.T @ k2) / s
    rotated = a.copy()
    k = a.shape[0]
    for st in range(0, k - 2, 3):
        ob = omega[st:st + 3]
        n = float(np.linalg.norm(ob))
        if n < 1e-12 or not np.isfinite(n):
            continue
        theta = nav.s_l * n * nav.dt
        rotated[st:st + 3] = _rodrigues(a[st:st + 3], ob / n, theta)
    res = B @ (rotated - a)
    if not np.all(np.isfinite(res)):
        return np.zeros(B.shape[0]), True
    return res, False


def nearest_atlas(model: ManifoldModel, z: np.ndarray) -> tuple[np.ndarray, int]:
    """Nearest stored code by Euclidean distance; ties to the lowest index."""
    d = np.sum((model.atlas - np.asarray(z)[None, :]) ** 2, axis=1)
    i = int(np.argmin(d))
    return model.atlas[i].copy(), i


def integrate(
    z: np.ndarray,
    dz_euc: np.ndarray,
    dz_lie: np.ndarray,
    nav: NavConfig,
    model: ManifoldModel,
) -> np.ndarray:
    """Additive-group update followed by the retraction mix."""
    z_bar = np.asarray(z, dtype=float) + dz_euc + nav.gamma_l * dz_lie
    if nav.mu_r <= 0.0:
        return z_bar
    proj, _ = nearest_atlas(model, z_bar)
    return (1.0 - nav.mu_r) * z_bar + nav.mu_r * proj


def initial_state(
    model: ManifoldModel, x: np.ndarray, u_prev: np.ndarray, nav: NavConfig
) -> NavigatorState:
    z, resid, fb = localize(x, None, model, nav.sigma_hat2 + model.tau_geom, 1.0)
    m = 2
    diag = CycleDiag(localization_residual=resid, fallback_localize=fb)
    return NavigatorState(
        z=z, u_prev=np.asarray(u_prev, dtype=float),
        sigma_f=np.full(m, 1.0 / m), last_diag=diag,
    )


def control_cycle(
    x: np.ndarray,
    nav_state: NavigatorState,
    model: ManifoldModel,
    nav: NavConfig,
    env_cfg: EnvConfig,
    sem: SemanticParams,
) -> tuple[np.ndarray, NavigatorState]:
    """One full deterministic navigation cycle; fixed work, no iteration."""
    x = np.asarray(x, dtype=float)
    tau_t = nav.sigma_hat2 + model.tau_geom
    z_t, resid, fb_loc = localize(x, nav_state.z, model, tau_t, nav.alpha)
    sigma_f, _raw = semantic_online(
        z_t, model, sem, env_cfg, x[6], nav_state.sigma_f, nav.sem_filter
    )
    dz_euc, k2, diag = rk2_step(z_t, x, sigma_f, model, nav, env_cfg)
    _, phi_n, phi_t = grad_energy(z_t, x, sigma_f, model, nav.epsilon, env_cfg)
    B, s = pullback_basis(z_t, model, nav.lambda_m, nav.k_eig)
    dz_lie, fb_lie = lie_residual(dz_euc, k2, B, s, nav)
    z_next = integrate(z_t, dz_euc, dz_lie, nav, model)
    if not np.all(np.isfinite(z_next)):
        z_next = z_t.copy()
    u = np.clip(model.decode_action(z_next), nav.u_min, nav.u_max_box)

    diag.phi_normal = phi_n
    diag.phi_tangent = phi_t
    diag.fallback_localize = fb_loc
    diag.fallback_lie = fb_lie
    diag.localization_residual = resid
    new_state = NavigatorState(z=z_next, u_prev=u, sigma_f=sigma_f, last_diag=diag)
    return u, new_state
