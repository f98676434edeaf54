"""Offline dataset construction.

Latin Hypercube Sampling over the context space (q, v, u_prev, p), a
weight sweep of the scalarization teacher per context, semantic priority
labels from violation indicators, and a kNN neighborhood graph with
Gaussian kernel weights used by the locality loss.

Record file format (one line per sample, space-separated decimal floats):

    ctx_id p q1 q2 v1 v2 uprev1 uprev2 u1 u2 sigma1 sigma2 J1 J2 w1 w2

The sidecar manifest is a flat key-value file (see kvconfig). The kNN
file holds one line per sample: kappa neighbor indices followed by kappa
kernel weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kvconfig
from .env import Context, EnvConfig, PhysState, violation_indicators
from .scalarize import InfeasibleContext, default_tighten_u, sweep_pareto


class DatasetEmpty(Exception):
    """Every sampled context was infeasible; no records were produced."""


@dataclass
class SemanticParams:
    """Urgency-potential parameters for the semantic priority coordinate."""

    k: np.ndarray = field(default_factory=lambda: np.array([4.0, 1.0]))
    eps: np.ndarray = field(default_factory=lambda: np.array([0.25, 1.0]))
    rho: float = 1.0

    def __post_init__(self):
        self.k = np.asarray(self.k, dtype=float).reshape(-1)
        self.eps = np.asarray(self.eps, dtype=float).reshape(-1)
        if self.k.shape != self.eps.shape:
            raise ValueError("k and eps must have the same length")
        if np.any(self.k <= 0):
            raise ValueError("priority gains k must be > 0")
        if np.any(self.eps <= 0) or np.any(self.eps > 1):
            raise ValueError("steepness eps must lie in (0, 1]")
        if not self.rho > 0:
            raise ValueError("baseline rho must be > 0")

    def to_kv(self) -> dict[str, str]:
        items = {}
        for i in range(len(self.k)):
            items[f"k_{i + 1}"] = kvconfig.format_float(self.k[i])
            items[f"eps_{i + 1}"] = kvconfig.format_float(self.eps[i])
        items["rho"] = kvconfig.format_float(self.rho)
        return items

    @classmethod
    def from_kv(cls, items: dict[str, str]) -> "SemanticParams":
        ks, es = [], []
        i = 1
        while f"k_{i}" in items:
            ks.append(float(items[f"k_{i}"]))
            es.append(float(items[f"eps_{i}"]))
            i += 1
        if not ks:
            return cls()
        return cls(np.array(ks), np.array(es), float(items.get("rho", "1.0")))


def semantic_label(delta: np.ndarray, params: SemanticParams) -> np.ndarray:
    """Simplex priority coordinate from violation indicators in [0, 1]^M.

    phi_i = exp(k_i * delta_i / eps_i) - 1, normalized with baseline rho.
    The baseline keeps the output well-defined (uniform) when all
    indicators are zero.
    """
    delta = np.asarray(delta, dtype=float).reshape(-1)
    if np.any(delta < 0) or np.any(delta > 1):
        raise ValueError("violation indicators must lie in [0, 1]")
    expo = np.minimum(params.k * delta / params.eps, 700.0)
    phi = np.expm1(expo)
    shifted = phi + params.rho
    return shifted / np.sum(shifted)


@dataclass
class ContextBounds:
    """LHS sampling box for (q, v, u_prev, p)."""

    q_min: np.ndarray = field(default_factory=lambda: np.array([-2.0, -1.2]))
    q_max: np.ndarray = field(default_factory=lambda: np.array([3.0, 2.0]))
    v_min: np.ndarray = field(default_factory=lambda: np.array([-2.0, -2.0]))
    v_max: np.ndarray = field(default_factory=lambda: np.array([2.0, 2.0]))
    u_prev_min: np.ndarray = field(default_factory=lambda: np.array([-1.0, -1.0]))
    u_prev_max: np.ndarray = field(default_factory=lambda: np.array([1.0, 1.0]))
    p_min: float = 0.0
    p_max: float = 2.0

    def __post_init__(self):
        for name in ("q_min", "q_max", "v_min", "v_max", "u_prev_min", "u_prev_max"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).reshape(2))
        self.validate()

    def validate(self) -> None:
        pairs = [
            ("q", self.q_min, self.q_max),
            ("v", self.v_min, self.v_max),
            ("u_prev", self.u_prev_min, self.u_prev_max),
            ("p", np.array([self.p_min]), np.array([self.p_max])),
        ]
        for name, lo, hi in pairs:
            if np.any(lo > hi):
                raise ValueError(f"bounds for {name}: min exceeds max")

    def intervals(self) -> list[tuple[float, float]]:
        """Seven (lo, hi) pairs in context order q1 q2 v1 v2 up1 up2 p."""
        return [
            (self.q_min[0], self.q_max[0]),
            (self.q_min[1], self.q_max[1]),
            (self.v_min[0], self.v_max[0]),
            (self.v_min[1], self.v_max[1]),
            (self.u_prev_min[0], self.u_prev_max[0]),
            (self.u_prev_min[1], self.u_prev_max[1]),
            (self.p_min, self.p_max),
        ]

    def to_kv(self) -> dict[str, str]:
        items = {}
        names = ["q1", "q2", "v1", "v2", "uprev1", "uprev2", "p"]
        for name, (lo, hi) in zip(names, self.intervals()):
            items[f"{name}_min"] = kvconfig.format_float(lo)
            items[f"{name}_max"] = kvconfig.format_float(hi)
        return items

    @classmethod
    def from_kv(cls, items: dict[str, str]) -> "ContextBounds":
        names = ["q1", "q2", "v1", "v2", "uprev1", "uprev2", "p"]
        if not any(f"{n}_min" in items for n in names):
            return cls()
        lo = [float(items[f"{n}_min"]) for n in names]
        hi = [float(items[f"{n}_max"]) for n in names]
        return cls(
            q_min=lo[0:2], q_max=hi[0:2],
            v_min=lo[2:4], v_max=hi[2:4],
            u_prev_min=lo[4:6], u_prev_max=hi[4:6],
            p_min=lo[6], p_max=hi[6],
        )


def lhs_sample(n: int, bounds: list[tuple[float, float]], seed: int) -> np.ndarray:
    """Latin Hypercube Sample: one point per equal-probability stratum per dim.

    Returns shape (n, len(bounds)); deterministic for a fixed seed.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not bounds:
        raise ValueError("bounds must be nonempty")
    rng = np.random.default_rng(seed)
    d = len(bounds)
    out = np.empty((n, d))
    for j, (lo, hi) in enumerate(bounds):
        perm = rng.permutation(n)
        offs = rng.random(n)
        unit = (perm + offs) / n
        out[:, j] = lo + unit * (hi - lo)
    return out


@dataclass
class ParetoSample:
    """One certified teacher solution with its semantic label."""

    s: PhysState
    u_prev: np.ndarray
    p: float
    u: np.ndarray
    sigma: np.ndarray
    J: np.ndarray
    w_gen: np.ndarray
    ctx_id: int

    @property
    def x(self) -> np.ndarray:
        """Observation under full observability: (q, v, u_prev, p)."""
        return np.concatenate([self.s.q, self.s.v, self.u_prev, [self.p]])

    def context(self) -> Context:
        return Context(self.s, self.u_prev, self.p)


RECORD_COLUMNS = (
    "ctx_id p q1 q2 v1 v2 uprev1 uprev2 u1 u2 sigma1 sigma2 J1 J2 w1 w2"
).split()


@dataclass
class DatasetManifest:
    n_samples: int
    n_contexts: int
    n_skipped: int
    n_weights: int
    lhs_seed: int
    knn_kappa: int
    knn_sigma_sq: float
    tighten: float
    tighten_u: float
    env: EnvConfig
    sem: SemanticParams
    bounds: ContextBounds
    schema_version: int = 1

    def to_kv(self) -> dict[str, str]:
        items = {
            "schema_version": str(self.schema_version),
            "n_samples": str(self.n_samples),
            "n_contexts": str(self.n_contexts),
            "n_skipped": str(self.n_skipped),
            "n_weights": str(self.n_weights),
            "lhs_seed": str(self.lhs_seed),
            "knn_kappa": str(self.knn_kappa),
            "knn_sigma_sq": kvconfig.format_float(self.knn_sigma_sq),
            "tighten": kvconfig.format_float(self.tighten),
            "tighten_u": kvconfig.format_float(self.tighten_u),
        }
        for k, v in self.env.to_kv().items():
            items[f"env.{k}"] = v
        for k, v in self.sem.to_kv().items():
            items[f"sem.{k}"] = v
        for k, v in self.bounds.to_kv().items():
            items[f"bounds.{k}"] = v
        return items

    @classmethod
    def from_kv(cls, items: dict[str, str]) -> "DatasetManifest":
        def sub(prefix):
            plen = len(prefix)
            return {k[plen:]: v for k, v in items.items() if k.startswith(prefix)}

        return cls(
            n_samples=int(items["n_samples"]),
            n_contexts=int(items["n_contexts"]),
            n_skipped=int(items["n_skipped"]),
            n_weights=int(items["n_weights"]),
            lhs_seed=int(items["lhs_seed"]),
            knn_kappa=int(items["knn_kappa"]),
            knn_sigma_sq=float(items["knn_sigma_sq"]),
            tighten=float(items["tighten"]),
            tighten_u=float(items["tighten_u"]),
            env=EnvConfig.from_kv(sub("env.")),
            sem=SemanticParams.from_kv(sub("sem.")),
            bounds=ContextBounds.from_kv(sub("bounds.")),
            schema_version=int(items.get("schema_version", "1")),
        )


@dataclass
class Dataset:
    samples: list[ParetoSample]
    manifest: DatasetManifest
    neighbors: np.ndarray | None = None   # (n, kappa) int
    kernel_weights: np.ndarray | None = None  # (n, kappa) float

    def __len__(self) -> int:
        return len(self.samples)

    def observations(self) -> np.ndarray:
        return np.stack([s.x for s in self.samples])

    def actions(self) -> np.ndarray:
        return np.stack([s.u for s in self.samples])

    def sigmas(self) -> np.ndarray:
        return np.stack([s.sigma for s in self.samples])

    def objectives(self) -> np.ndarray:
        return np.stack([s.J for s in self.samples])

    def context_ids(self) -> np.ndarray:
        return np.array([s.ctx_id for s in self.samples], dtype=int)

    def context_params(self) -> np.ndarray:
        """Per-sample context parameter vector (q, v, u_prev, p), shape (n, 7)."""
        return self.observations()


def context_from_row(row: np.ndarray) -> Context:
    return Context(PhysState(row[0:2], row[2:4]), row[4:6], float(row[6]))


def build_dataset(
    env_cfg: EnvConfig,
    sem_params: SemanticParams,
    n_contexts: int,
    n_weights: int,
    seed: int,
    bounds: ContextBounds | None = None,
    tighten: float = 0.02,
    tighten_u: float | None = None,
    kappa: int = 10,
    grid_res: int = 33,
) -> Dataset:
    """Full generation pipeline: LHS -> sweep -> label -> kNN graph.

    Contexts whose tightened problem is infeasible for every weight are
    skipped and counted in the manifest. Raises DatasetEmpty when every
    context is skipped.
    """
    if bounds is None:
        bounds = ContextBounds()
    if tighten_u is None:
        tighten_u = default_tighten_u(env_cfg, tighten)
    rows = lhs_sample(n_contexts, bounds.intervals(), seed)
    samples: list[ParetoSample] = []
    n_skipped = 0
    for ctx_id in range(n_contexts):
        ctx = context_from_row(rows[ctx_id])
        try:
            entries = sweep_pareto(
                ctx, n_weights, tighten, env_cfg,
                tighten_u=tighten_u, grid_res=grid_res,
            )
        except InfeasibleContext:
            n_skipped += 1
            continue
        delta = violation_indicators(ctx.state, ctx.p, env_cfg)
        sigma = semantic_label(delta, sem_params)
        for w, rep in entries:
            samples.append(
                ParetoSample(
                    s=ctx.state, u_prev=ctx.prev_action, p=ctx.p,
                    u=rep.action, sigma=sigma, J=rep.objectives,
                    w_gen=w, ctx_id=ctx_id,
                )
            )
    if not samples:
        raise DatasetEmpty(f"all {n_contexts} contexts were infeasible")

    manifest = DatasetManifest(
        n_samples=len(samples), n_contexts=n_contexts, n_skipped=n_skipped,
        n_weights=n_weights, lhs_seed=seed, knn_kappa=kappa, knn_sigma_sq=0.0,
        tighten=tighten, tighten_u=tighten_u,
        env=env_cfg, sem=sem_params, bounds=bounds,
    )
    ds = Dataset(samples, manifest)
    if kappa < len(samples):
        nbrs, wts, sig_sq = knn_graph(ds, kappa)
        ds.neighbors = nbrs
        ds.kernel_weights = wts
        manifest.knn_sigma_sq = sig_sq
    return ds


def knn_graph(ds: Dataset, kappa: int) -> tuple[np.ndarray, np.ndarray, float]:
    """Per-sample kappa nearest neighbors in standardized context space.

    Self-inclusion is disabled; ties are broken by sample index. Kernel
    bandwidth sigma^2 defaults to the mean squared kappa-th-neighbor
    distance (floored away from zero).
    """
    P = ds.context_params()
    n = P.shape[0]
    if kappa >= n:
        raise ValueError("kappa must be < n_samples")
    mean = P.mean(axis=0)
    std = P.std(axis=0)
    std[std < 1e-12] = 1.0
    Z = (P - mean) / std
    nbrs = np.empty((n, kappa), dtype=int)
    nd2 = np.empty((n, kappa))
    block = 256
    for lo in range(0, n, block):
        hi = min(lo + block, n)
        d2 = np.sum((Z[lo:hi, None, :] - Z[None, :, :]) ** 2, axis=2)
        for r in range(lo, hi):
            d2[r - lo, r] = np.inf
        order = np.argsort(d2, axis=1, kind="stable")[:, :kappa]
        nbrs[lo:hi] = order
        nd2[lo:hi] = np.take_along_axis(d2, order, axis=1)
    sigma_sq = float(max(np.mean(nd2[:, kappa - 1]), 1e-12))
    weights = np.exp(-nd2 / sigma_sq)
    return nbrs.astype(int), weights, sigma_sq


def save_dataset(ds: Dataset, records_path: str, manifest_path: str, knn_path: str | None = None) -> None:
    lines = []
    for s in ds.samples:
        vals = [float(s.ctx_id), s.p, *s.s.q, *s.s.v, *s.u_prev, *s.u, *s.sigma, *s.J, *s.w_gen]
        lines.append(" ".join(kvconfig.format_float(v) for v in vals))
    kvconfig.write_text_atomic(records_path, "\n".join(lines) + "\n")
    kvconfig.write_kv(manifest_path, ds.manifest.to_kv())
    if knn_path is not None and ds.neighbors is not None:
        rows = []
        for i in range(len(ds.samples)):
            idxs = " ".join(str(int(j)) for j in ds.neighbors[i])
            wts = " ".join(kvconfig.format_float(w) for w in ds.kernel_weights[i])
            rows.append(f"{idxs} {wts}")
        kvconfig.write_text_atomic(knn_path, "\n".join(rows) + "\n")


def load_dataset(records_path: str, manifest_path: str, knn_path: str | None = None) -> Dataset:
    manifest = DatasetManifest.from_kv(kvconfig.read_kv(manifest_path))
    samples = []
    with open(records_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            v = np.array([float(tok) for tok in line.split()])
            if v.shape != (len(RECORD_COLUMNS),):
                raise ValueError(f"bad record width {v.shape}")
            samples.append(
                ParetoSample(
                    s=PhysState(v[2:4], v[4:6]), u_prev=v[6:8], p=float(v[1]),
                    u=v[8:10], sigma=v[10:12], J=v[12:14], w_gen=v[14:16],
                    ctx_id=int(v[0]),
                )
            )
    if len(samples) != manifest.n_samples:
        raise ValueError(
            f"manifest says {manifest.n_samples} samples, file has {len(samples)}"
        )
    ds = Dataset(samples, manifest)
    if knn_path is not None:
        nbrs, wts = [], []
        kappa = manifest.knn_kappa
        with open(knn_path, "r", encoding="utf-8") as fh:
            for line in fh:
                toks = line.split()
                nbrs.append([int(t) for t in toks[:kappa]])
                wts.append([float(t) for t in toks[kappa:]])
        ds.neighbors = np.array(nbrs, dtype=int)
        ds.kernel_weights = np.array(wts)
    return ds
