"""Continuous and probit sum-of-trees regression."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats
from scipy.special import ndtr, ndtri

from . import _kernels as K

DEFAULT_CAPACITY = 255
REFRESH_EVERY = 50


class BartError(ValueError):
    """Raised for unusable training data."""


@dataclass(frozen=True)
class BartConfig:
    n_trees: int | None = None  # None: 200 for continuous, 50 for probit
    alpha: float = 0.95
    beta: float = 2.0
    k: float = 2.0
    nu: float = 3.0
    q: float = 0.90
    n_burn: int = 1000
    n_keep: int = 1000
    thin: int = 1
    seed: int = 0
    n_cuts: int = 100
    min_leaf: int = 5
    p_grow: float = 0.25
    p_prune: float = 0.25
    capacity: int = DEFAULT_CAPACITY

    def __post_init__(self):
        if self.n_trees is not None and self.n_trees < 1:
            raise ValueError("n_trees must be at least 1")
        if self.n_burn < 0 or self.n_keep < 1 or self.thin < 1:
            raise ValueError("need n_burn >= 0, n_keep >= 1 and thin >= 1")
        if not 0 < self.alpha < 1 or self.beta < 0:
            raise ValueError("tree prior needs 0 < alpha < 1 and beta >= 0")
        if self.k <= 0 or self.nu <= 0 or not 0 < self.q < 1:
            raise ValueError("need k > 0, nu > 0 and 0 < q < 1")
        if self.p_grow <= 0 or self.p_prune <= 0 or self.p_grow + self.p_prune > 1:
            raise ValueError("move probabilities must be positive and sum to at most 1")

    def trees_for(self, kind: str) -> int:
        if self.n_trees is not None:
            return self.n_trees
        return 200 if kind == "continuous" else 50

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CutGrid:
    """Candidate split values per covariate column."""

    cuts: list[np.ndarray]

    @classmethod
    def from_data(cls, x: np.ndarray, n_cuts: int = 100) -> "CutGrid":
        cuts = []
        for col in x.T:
            lo, hi = float(np.min(col)), float(np.max(col))
            if lo == hi:
                cuts.append(np.empty(0))
            elif np.all((col == 0) | (col == 1)):
                cuts.append(np.array([0.5]))
            else:
                step = (hi - lo) / (n_cuts + 1)
                cuts.append(lo + step * np.arange(1, n_cuts + 1))
        return cls(cuts)

    @property
    def counts(self) -> np.ndarray:
        return np.array([len(c) for c in self.cuts], dtype=np.int64)

    def flat(self) -> tuple[np.ndarray, np.ndarray]:
        start = np.zeros(len(self.cuts) + 1, dtype=np.int64)
        start[1:] = np.cumsum(self.counts)
        vals = np.concatenate(self.cuts) if self.cuts else np.empty(0)
        return vals.astype(np.float64), start

    def bin(self, x: np.ndarray) -> np.ndarray:
        xb = np.empty(x.shape, dtype=np.int32)
        for v, c in enumerate(self.cuts):
            xb[:, v] = np.searchsorted(c, x[:, v], side="left")
        return xb


@dataclass
class FittedBart:
    """Posterior draws of a sum-of-trees model.

    Every kept draw stores its trees in flat preorder arrays, together with
    the constants needed to move predictions back to the response scale.
    For ``kind == "probit"`` ``sigma`` is all ones and ``scale`` is 1.
    """

    kind: str
    n_trees: int
    node_var: np.ndarray
    node_cut: np.ndarray
    node_value: np.ndarray
    node_right: np.ndarray
    tree_start: np.ndarray
    sigma: np.ndarray
    offset: float
    scale: float
    grid: CutGrid
    config: BartConfig
    covariate_names: list[str] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return len(self.sigma)

    @property
    def n_covariates(self) -> int:
        return len(self.grid.cuts)

    def tree_sum(self, x: np.ndarray, draw: int) -> np.ndarray:
        x = _as_matrix(x, self.n_covariates)
        out = np.empty(x.shape[0])
        K.predict_draw(self.node_var, self.node_value, self.node_right,
                       self.tree_start, draw, self.n_trees, x, out)
        return out

    def latent(self, x: np.ndarray, draw: int) -> np.ndarray:
        """Mean function on the response scale (probit: the latent mean)."""
        return self.offset + self.scale * self.tree_sum(x, draw)

    def predict(self, x: np.ndarray, draw: int) -> np.ndarray:
        g = self.latent(x, draw)
        if self.kind == "probit":
            return ndtr(g)
        return g

    def predict_mean(self, x: np.ndarray) -> np.ndarray:
        return np.mean([self.predict(x, q) for q in range(self.n_draws)], axis=0)

    def sigma_draw(self, draw: int) -> float:
        return float(self.sigma[draw])


def predict(fit: FittedBart, x: np.ndarray, draw: int) -> np.ndarray:
    return fit.predict(x, draw)


def _as_matrix(x, p: int | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1) if p in (None, 1) else x.reshape(1, -1)
    if p is not None and x.shape[1] != p:
        raise BartError(f"expected {p} covariate columns, got {x.shape[1]}")
    return np.ascontiguousarray(x)


def _check_xy(x, y):
    x = _as_matrix(x)
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape[0] != y.shape[0]:
        raise BartError(f"x has {x.shape[0]} rows but y has {y.shape[0]}")
    if x.shape[0] == 0:
        raise BartError("no training rows")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise BartError("training data contain non-finite values")
    return x, y


class Forest:
    """Mutable sampler state for one ensemble over pre-binned data."""

    def __init__(self, n_trees: int, n: int, capacity: int, init_leaf: float):
        c = capacity
        self.var = np.full((n_trees, c), K.FREE, dtype=np.int64)
        self.var[:, 0] = K.LEAF
        self.cut = np.zeros((n_trees, c), dtype=np.int64)
        self.left = np.full((n_trees, c), -1, dtype=np.int64)
        self.right = np.full((n_trees, c), -1, dtype=np.int64)
        self.parent = np.full((n_trees, c), -1, dtype=np.int64)
        self.depth = np.zeros((n_trees, c), dtype=np.int64)
        self.mu = np.zeros((n_trees, c))
        self.mu[:, 0] = init_leaf
        self.leaf_of = np.zeros((n_trees, n), dtype=np.int64)
        self.fit = np.full(n, init_leaf * n_trees)
        self.stack = np.zeros(c + 2, dtype=np.int64)
        self.node_n = np.zeros(c, dtype=np.int64)
        self.node_s = np.zeros(c)
        self.new_leaf = np.zeros(n, dtype=np.int64)
        self.in_sub = np.zeros(c, dtype=np.bool_)
        self.resid = np.zeros(n)
        self.accept = np.zeros((3, 2), dtype=np.int64)

    def sweep(self, xb, ncuts, y, sigma2, tau2, cfg: BartConfig, rng, use_lik=True,
              min_leaf=None):
        K.sweep(self.var, self.cut, self.left, self.right, self.parent, self.depth,
                self.mu, self.leaf_of, xb, ncuts, y, self.fit, sigma2, tau2,
                cfg.alpha, cfg.beta, cfg.p_grow, cfg.p_prune,
                cfg.min_leaf if min_leaf is None else min_leaf, use_lik, rng,
                self.stack, self.node_n, self.node_s, self.new_leaf, self.in_sub,
                self.resid, self.accept)

    def refresh(self):
        K.recompute_fit(self.mu, self.leaf_of, self.fit)

    def export(self, cutvals, cutstart, base, tree_start, tree_base):
        n = K.count_used(self.var)
        out_var = np.empty(n, dtype=np.int64)
        out_cut = np.empty(n, dtype=np.int64)
        out_value = np.empty(n)
        out_right = np.empty(n, dtype=np.int64)
        K.export_forest(self.var, self.cut, self.left, self.right, self.mu, cutvals,
                        cutstart, base, out_var, out_cut, out_value, out_right,
                        tree_start, tree_base, self.stack)
        return out_var, out_cut, out_value, out_right

    def max_depths(self) -> np.ndarray:
        used = self.var != K.FREE
        return np.where(used, self.depth, 0).max(axis=1)


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _run_chain(kind, x, y, cfg: BartConfig, rng, names):
    n = x.shape[0]
    n_trees = cfg.trees_for(kind)
    grid = CutGrid.from_data(x, cfg.n_cuts)
    xb = grid.bin(x)
    ncuts = grid.counts
    cutvals, cutstart = grid.flat()

    if kind == "continuous":
        ymin, ymax = float(y.min()), float(y.max())
        if ymax > ymin:
            offset = 0.5 * (ymin + ymax)
            scale = ymax - ymin
        else:
            offset, scale = ymin, 1.0
        target = (y - offset) / scale
        tau = 0.5 / (cfg.k * np.sqrt(n_trees))
        sigma_hat = _sigma_guess(x, target)
        lam = sigma_hat**2 * stats.chi2.ppf(1.0 - cfg.q, cfg.nu) / cfg.nu
        sigma2 = sigma_hat**2
        init = float(target.mean()) / n_trees
        work = target
    else:
        ybin = (y > 0.5).astype(np.int64)
        pbar = float(np.clip(ybin.mean(), 1e-12, 1 - 1e-12))
        offset = float(np.clip(ndtri(pbar), -2.0, 2.0))
        scale = 1.0
        tau = 3.0 / (cfg.k * np.sqrt(n_trees))
        sigma2 = 1.0
        init = 0.0
        work = np.zeros(n)
    tau2 = tau * tau

    forest = Forest(n_trees, n, cfg.capacity, init)
    total_iter = cfg.n_burn + cfg.n_keep * cfg.thin
    tree_start = np.zeros(cfg.n_keep * n_trees, dtype=np.int64)
    chunks = []
    base = 0
    sigmas = np.ones(cfg.n_keep)
    sigma_trace = np.empty(total_iter)
    kept = 0
    for it in range(total_iter):
        if kind == "probit":
            K.draw_latent(ybin, forest.fit, offset, work, rng)
        forest.sweep(xb, ncuts, work, sigma2, tau2, cfg, rng)
        if (it + 1) % REFRESH_EVERY == 0:
            forest.refresh()
        if kind == "continuous":
            sigma2 = K.draw_sigma2(work, forest.fit, cfg.nu, lam, rng)
        sigma_trace[it] = np.sqrt(sigma2)
        if it >= cfg.n_burn and (it - cfg.n_burn) % cfg.thin == 0:
            arrays = forest.export(cutvals, cutstart, base, tree_start, kept * n_trees)
            chunks.append(arrays)
            base += len(arrays[0])
            sigmas[kept] = np.sqrt(sigma2) * scale
            kept += 1
    forest.refresh()
    cat = [np.concatenate([c[i] for c in chunks]) for i in range(4)]
    if kind == "probit":
        sigmas = np.ones(cfg.n_keep)
    diag = {
        "accept": forest.accept.copy(),
        "final_fit": offset + scale * forest.fit,
        "sigma_trace": sigma_trace * (scale if kind == "continuous" else 1.0),
        "tau": tau,
    }
    if kind == "continuous":
        diag["lambda"] = lam
        diag["sigma_hat"] = sigma_hat * scale
    return FittedBart(kind=kind, n_trees=n_trees, node_var=cat[0], node_cut=cat[1],
                      node_value=cat[2], node_right=cat[3], tree_start=tree_start,
                      sigma=sigmas, offset=float(offset), scale=float(scale),
                      grid=grid, config=cfg, covariate_names=list(names or []),
                      diagnostics=diag)


def _sigma_guess(x, target) -> float:
    """Residual sd of a least-squares fit, or the sample sd when p >= n."""
    n, p = x.shape
    if n > p + 1:
        design = np.column_stack([np.ones(n), x])
        coef, *_ = np.linalg.lstsq(design, target, rcond=None)
        resid = target - design @ coef
        s = float(np.sqrt(resid @ resid / (n - np.linalg.matrix_rank(design))))
    else:
        s = float(np.std(target, ddof=1)) if n > 1 else 0.0
    if not np.isfinite(s) or s <= 1e-8:
        s = float(np.std(target, ddof=1)) if n > 1 else 0.0
    if not np.isfinite(s) or s <= 1e-8:
        s = 1.0
    return s


def fit_continuous(x, y, config: BartConfig | None = None, rng=None,
                   names=None) -> FittedBart:
    """Gaussian-error sum-of-trees regression of ``y`` on ``x``."""
    cfg = config or BartConfig()
    x, y = _check_xy(x, y)
    return _run_chain("continuous", x, y, cfg, _rng(cfg.seed if rng is None else rng), names)


def fit_probit(x, y, config: BartConfig | None = None, rng=None, names=None) -> FittedBart:
    """Probit sum-of-trees classifier for binary ``y``."""
    cfg = config or BartConfig()
    x, y = _check_xy(x, y)
    if not np.all((y == 0) | (y == 1)):
        raise BartError("probit response must be coded 0/1")
    return _run_chain("probit", x, y, cfg, _rng(cfg.seed if rng is None else rng), names)
