"""Latent manifold learning.

Four spectrally-normalized networks (observation encoder, omniscient
encoder, action decoder, state decoder) trained with a five-term composite
loss: observation-code state reconstruction, action reconstruction,
teacher-code state reconstruction through the shared decoder, cross-modal
consistency (cosine + Euclidean), and kernel-weighted local structure
preservation over the kNN graph. Gradients are analytic end to end.

After training the model carries an atlas of training latent codes, the
cached decoded observations for those codes, and three calibration
constants: the localization tolerance (mean validation reconstruction
residual), the decoder action error, and the smallest decoder-Jacobian
singular value seen on validation codes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset
from .mlp import Mlp, mlp_from_state, mlp_state, spectral_normalize


class Diverged(Exception):
    """Training loss became non-finite."""


MODEL_SCHEMA_VERSION = 1


@dataclass
class LossWeights:
    omega1: float = 1.0   # cross-modal consistency
    omega2: float = 0.5   # local structure preservation
    beta: float = 0.5     # Euclidean part of the consistency term


@dataclass
class LossBreakdown:
    recon_x: float
    action: float
    recon_s: float
    consist: float
    local: float
    total: float
    weights: LossWeights

    @classmethod
    def combine(cls, rx, ac, rs, co, lo, w: LossWeights) -> "LossBreakdown":
        total = rx + ac + rs + w.omega1 * co + w.omega2 * lo
        return cls(rx, ac, rs, co, lo, total, w)


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 64
    lr: float = 1e-3
    lr_min: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    n_z: int = 8
    hidden: int = 64
    depth: int = 3          # number of weight layers per net
    cap: float = 10.0       # spectral cap per layer
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    val_frac: float = 0.1
    test_frac: float = 0.1
    power_iters: int = 1
    final_power_iters: int = 50


@dataclass
class ManifoldModel:
    e_x: Mlp
    e_s: Mlp
    d_u: Mlp
    d_s: Mlp
    n_z: int
    es_mean: np.ndarray
    es_std: np.ndarray
    atlas: np.ndarray          # (n_train, n_z) latent codes of training samples
    atlas_refs: np.ndarray     # dataset indices the atlas rows came from
    atlas_obs: np.ndarray      # cached D_s over the atlas
    tau_geom: float
    delta_dec: float
    sigma0_est: float

    def encode_obs(self, x: np.ndarray) -> np.ndarray:
        return self.e_x.forward(x)

    def decode_obs(self, z: np.ndarray) -> np.ndarray:
        return self.d_s.forward(z)

    def decode_action(self, z: np.ndarray) -> np.ndarray:
        return self.d_u.forward(z)

    def es_input(self, x: np.ndarray, sigma: np.ndarray, J: np.ndarray) -> np.ndarray:
        raw = np.concatenate([np.atleast_1d(x), np.atleast_1d(sigma), np.atleast_1d(J)])
        return (raw - self.es_mean) / self.es_std

    def jacobian_ds(self, z: np.ndarray) -> np.ndarray:
        return self.d_s.jacobian(z)

    def jacobian_du(self, z: np.ndarray) -> np.ndarray:
        return self.d_u.jacobian(z)

    def save(self, path: str) -> None:
        state: dict[str, np.ndarray] = {
            "schema_version": np.array(MODEL_SCHEMA_VERSION),
            "n_z": np.array(self.n_z),
            "es_mean": self.es_mean,
            "es_std": self.es_std,
            "atlas": self.atlas,
            "atlas_refs": self.atlas_refs,
            "atlas_obs": self.atlas_obs,
            "tau_geom": np.array(self.tau_geom),
            "delta_dec": np.array(self.delta_dec),
            "sigma0_est": np.array(self.sigma0_est),
        }
        for prefix, net in (("e_x", self.e_x), ("e_s", self.e_s),
                            ("d_u", self.d_u), ("d_s", self.d_s)):
            state.update(mlp_state(net, prefix))
        np.savez(path, **state)

    @classmethod
    def load(cls, path: str) -> "ManifoldModel":
        with np.load(path, allow_pickle=False) as state:
            if int(state["schema_version"]) != MODEL_SCHEMA_VERSION:
                raise ValueError("unsupported model schema version")
            return cls(
                e_x=mlp_from_state(state, "e_x"),
                e_s=mlp_from_state(state, "e_s"),
                d_u=mlp_from_state(state, "d_u"),
                d_s=mlp_from_state(state, "d_s"),
                n_z=int(state["n_z"]),
                es_mean=state["es_mean"],
                es_std=state["es_std"],
                atlas=state["atlas"],
                atlas_refs=state["atlas_refs"],
                atlas_obs=state["atlas_obs"],
                tau_geom=float(state["tau_geom"]),
                delta_dec=float(state["delta_dec"]),
                sigma0_est=float(state["sigma0_est"]),
            )


@dataclass
class TrainBatch:
    """Arrays for one minibatch plus its in-batch locality pairs."""

    X: np.ndarray        # (B, 7) observations: encoder input and decoder target
    U: np.ndarray        # (B, 2) teacher actions
    ES: np.ndarray       # (B, 11) standardized omniscient-encoder input
    pair_i: np.ndarray   # (P,) batch positions
    pair_j: np.ndarray   # (P,)
    pair_w: np.ndarray   # (P,) kernel weights


@dataclass
class TrainingArrays:
    X: np.ndarray
    U: np.ndarray
    ES: np.ndarray
    neighbors: np.ndarray | None
    kernel_weights: np.ndarray | None


def prepare_arrays(ds: Dataset, es_mean=None, es_std=None) -> tuple[TrainingArrays, np.ndarray, np.ndarray]:
    X = ds.observations()
    ES_raw = np.concatenate([X, ds.sigmas(), ds.objectives()], axis=1)
    if es_mean is None:
        es_mean = ES_raw.mean(axis=0)
        es_std = ES_raw.std(axis=0)
        es_std = np.where(es_std < 1e-8, 1.0, es_std)
    ES = (ES_raw - es_mean) / es_std
    arrays = TrainingArrays(X, ds.actions(), ES, ds.neighbors, ds.kernel_weights)
    return arrays, es_mean, es_std


def build_batch(arrays: TrainingArrays, idx: np.ndarray) -> TrainBatch:
    """Extract a batch; kNN pairs with both ends in-batch, others skipped."""
    idx = np.asarray(idx, dtype=int)
    pair_i: list[int] = []
    pair_j: list[int] = []
    pair_w: list[float] = []
    if arrays.neighbors is not None:
        pos = -np.ones(arrays.X.shape[0], dtype=int)
        pos[idx] = np.arange(len(idx))
        for bi, k in enumerate(idx):
            for col, j in enumerate(arrays.neighbors[k]):
                pj = pos[j]
                if pj >= 0:
                    pair_i.append(bi)
                    pair_j.append(int(pj))
                    pair_w.append(float(arrays.kernel_weights[k, col]))
    return TrainBatch(
        X=arrays.X[idx], U=arrays.U[idx], ES=arrays.ES[idx],
        pair_i=np.array(pair_i, dtype=int),
        pair_j=np.array(pair_j, dtype=int),
        pair_w=np.array(pair_w),
    )


def loss_total(
    model: ManifoldModel, batch: TrainBatch, weights: LossWeights
) -> tuple[LossBreakdown, dict[str, list[tuple[np.ndarray, np.ndarray]]]]:
    """All five loss terms plus analytic parameter gradients for all nets."""
    B = batch.X.shape[0]
    if B == 0:
        raise ValueError("batch is empty")

    zx, cache_ex = model.e_x.forward(batch.X, want_cache=True)
    zs, cache_es = model.e_s.forward(batch.ES, want_cache=True)
    sx, cache_dsx = model.d_s.forward(zx, want_cache=True)
    ss, cache_dss = model.d_s.forward(zs, want_cache=True)
    ux, cache_du = model.d_u.forward(zx, want_cache=True)

    rx_res = sx - batch.X
    ac_res = ux - batch.U
    rs_res = ss - batch.X
    recon_x = float(np.sum(rx_res**2)) / B
    action = float(np.sum(ac_res**2)) / B
    recon_s = float(np.sum(rs_res**2)) / B

    # Cross-modal consistency: cosine + beta * squared distance, per sample.
    eps = 1e-24
    na2 = np.sum(zx**2, axis=1) + eps
    nb2 = np.sum(zs**2, axis=1) + eps
    na = np.sqrt(na2)
    nb = np.sqrt(nb2)
    dots = np.sum(zx * zs, axis=1)
    cosv = dots / (na * nb)
    diff = zx - zs
    consist = float(np.sum(1.0 - cosv) + weights.beta * np.sum(diff**2)) / B

    # Local structure over in-batch kNN pairs.
    if len(batch.pair_i):
        dz = zx[batch.pair_i] - zx[batch.pair_j]
        pair_sq = np.sum(dz**2, axis=1)
        local = float(np.sum(batch.pair_w * pair_sq)) / B
    else:
        local = 0.0

    breakdown = LossBreakdown.combine(recon_x, action, recon_s, consist, local, weights)

    # --- backward ---
    g_ds_x = 2.0 * rx_res / B
    g_ds_s = 2.0 * rs_res / B
    g_du = 2.0 * ac_res / B

    grads_dsx, dzx_recon = model.d_s.backward(cache_dsx, g_ds_x)
    grads_dss, dzs_recon = model.d_s.backward(cache_dss, g_ds_s)
    grads_du, dzx_action = model.d_u.backward(cache_du, g_du)

    # d(1 - cos)/dzx = cos*zx/|zx|^2 - zs/(|zx||zs|); symmetric for zs.
    dzx_cos = cosv[:, None] * zx / na2[:, None] - zs / (na * nb)[:, None]
    dzs_cos = cosv[:, None] * zs / nb2[:, None] - zx / (na * nb)[:, None]
    dzx_consist = (weights.omega1 / B) * (dzx_cos + 2.0 * weights.beta * diff)
    dzs_consist = (weights.omega1 / B) * (dzs_cos - 2.0 * weights.beta * diff)

    dzx_local = np.zeros_like(zx)
    if len(batch.pair_i):
        contrib = (2.0 * weights.omega2 / B) * batch.pair_w[:, None] * dz
        np.add.at(dzx_local, batch.pair_i, contrib)
        np.add.at(dzx_local, batch.pair_j, -contrib)

    dzx = dzx_recon + dzx_action + dzx_consist + dzx_local
    dzs = dzs_recon + dzs_consist

    grads_ex, _ = model.e_x.backward(cache_ex, dzx)
    grads_es, _ = model.e_s.backward(cache_es, dzs)

    grads_ds = [(a[0] + b[0], a[1] + b[1]) for a, b in zip(grads_dsx, grads_dss)]
    return breakdown, {
        "e_x": grads_ex, "e_s": grads_es, "d_u": grads_du, "d_s": grads_ds,
    }


class _Adam:
    def __init__(self, net: Mlp, cfg: TrainConfig):
        self.m = [(np.zeros_like(l.W), np.zeros_like(l.b)) for l in net.layers]
        self.v = [(np.zeros_like(l.W), np.zeros_like(l.b)) for l in net.layers]
        self.t = 0
        self.cfg = cfg

    def step(self, net: Mlp, grads, lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for i, l in enumerate(net.layers):
            gW, gb = grads[i]
            mW, mb = self.m[i]
            vW, vb = self.v[i]
            mW[:] = c.beta1 * mW + (1 - c.beta1) * gW
            mb[:] = c.beta1 * mb + (1 - c.beta1) * gb
            vW[:] = c.beta2 * vW + (1 - c.beta2) * gW * gW
            vb[:] = c.beta2 * vb + (1 - c.beta2) * gb * gb
            l.W -= lr * (mW / bc1) / (np.sqrt(vW / bc2) + c.adam_eps)
            l.b -= lr * (mb / bc1) / (np.sqrt(vb / bc2) + c.adam_eps)


def split_by_context(ids: np.ndarray, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """80/10/10 split on context ids (all samples of a context stay together)."""
    rng = np.random.default_rng(cfg.seed)
    uniq = np.unique(ids)
    perm = rng.permutation(uniq)
    n = len(uniq)
    n_val = max(1, int(round(cfg.val_frac * n)))
    n_test = max(1, int(round(cfg.test_frac * n)))
    if n_val + n_test >= n:
        raise ValueError("dataset has too few contexts to split")
    val_ids = set(perm[:n_val].tolist())
    test_ids = set(perm[n_val:n_val + n_test].tolist())
    train_idx = np.array([i for i, c in enumerate(ids) if c not in val_ids and c not in test_ids])
    val_idx = np.array([i for i, c in enumerate(ids) if c in val_ids])
    test_idx = np.array([i for i, c in enumerate(ids) if c in test_ids])
    return train_idx, val_idx, test_idx


def train(ds: Dataset, cfg: TrainConfig) -> tuple[ManifoldModel, list[dict]]:
    """Deterministic full training run with best-validation checkpointing."""
    rng = np.random.default_rng(cfg.seed)
    ids = ds.context_ids()
    train_idx, val_idx, _test_idx = split_by_context(ids, cfg)

    X = ds.observations()
    ES_raw = np.concatenate([X, ds.sigmas(), ds.objectives()], axis=1)
    es_mean = ES_raw[train_idx].mean(axis=0)
    es_std = ES_raw[train_idx].std(axis=0)
    es_std = np.where(es_std < 1e-8, 1.0, es_std)
    arrays = TrainingArrays(
        X, ds.actions(), (ES_raw - es_mean) / es_std, ds.neighbors, ds.kernel_weights
    )

    obs_dim = X.shape[1]
    es_dim = arrays.ES.shape[1]
    hid = [cfg.hidden] * (cfg.depth - 1)
    model = ManifoldModel(
        e_x=Mlp.create([obs_dim, *hid, cfg.n_z], rng, cap=cfg.cap),
        e_s=Mlp.create([es_dim, *hid, cfg.n_z], rng, cap=cfg.cap),
        d_u=Mlp.create([cfg.n_z, *hid, 2], rng, cap=cfg.cap),
        d_s=Mlp.create([cfg.n_z, *hid, obs_dim], rng, cap=cfg.cap),
        n_z=cfg.n_z,
        es_mean=es_mean, es_std=es_std,
        atlas=np.zeros((0, cfg.n_z)), atlas_refs=np.zeros(0, dtype=int),
        atlas_obs=np.zeros((0, obs_dim)),
        tau_geom=0.0, delta_dec=0.0, sigma0_est=0.0,
    )
    nets = {"e_x": model.e_x, "e_s": model.e_s, "d_u": model.d_u, "d_s": model.d_s}
    for net in nets.values():
        spectral_normalize(net, cfg.power_iters)
    opts = {name: _Adam(net, cfg) for name, net in nets.items()}

    val_batch = build_batch(arrays, val_idx)
    best_val = np.inf
    best_state = None
    log: list[dict] = []
    span = max(cfg.epochs - 1, 1)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1 + math.cos(math.pi * epoch / span))
        order = rng.permutation(train_idx)
        sums = np.zeros(5)
        n_batches = 0
        for lo in range(0, len(order), cfg.batch_size):
            batch = build_batch(arrays, order[lo:lo + cfg.batch_size])
            bd, grads = loss_total(model, batch, cfg.weights)
            if not np.isfinite(bd.total):
                raise Diverged(f"non-finite loss at epoch {epoch}")
            for name, net in nets.items():
                opts[name].step(net, grads[name], lr)
                spectral_normalize(net, cfg.power_iters)
            sums += (bd.recon_x, bd.action, bd.recon_s, bd.consist, bd.local)
            n_batches += 1
        means = sums / max(n_batches, 1)
        val_bd, _ = loss_total(model, val_batch, cfg.weights)
        if not np.isfinite(val_bd.total):
            raise Diverged(f"non-finite validation loss at epoch {epoch}")
        if val_bd.total < best_val:
            best_val = val_bd.total
            best_state = {name: net.copy() for name, net in nets.items()}
        log.append({
            "epoch": epoch, "lr": lr,
            "recon_x": means[0], "action": means[1], "recon_s": means[2],
            "consist": means[3], "local": means[4],
            "train_total": float(
                means[0] + means[1] + means[2]
                + cfg.weights.omega1 * means[3] + cfg.weights.omega2 * means[4]
            ),
            "val_total": val_bd.total,
        })

    if best_state is not None:
        model.e_x = best_state["e_x"]
        model.e_s = best_state["e_s"]
        model.d_u = best_state["d_u"]
        model.d_s = best_state["d_s"]
    for net in (model.e_x, model.e_s, model.d_u, model.d_s):
        spectral_normalize(net, cfg.final_power_iters)

    # Atlas over the training split; calibration over validation.
    model.atlas = model.e_x.forward(X[train_idx])
    model.atlas_refs = train_idx.copy()
    model.atlas_obs = model.d_s.forward(model.atlas)
    zv = model.e_x.forward(X[val_idx])
    model.tau_geom = float(np.mean(np.sum((X[val_idx] - model.d_s.forward(zv)) ** 2, axis=1)))
    model.delta_dec = float(
        np.mean(np.linalg.norm(ds.actions()[val_idx] - model.d_u.forward(zv), axis=1))
    )
    model.sigma0_est = float(
        min(np.linalg.svd(model.jacobian_ds(z), compute_uv=False)[-1] for z in zv)
    )
    return model, log
