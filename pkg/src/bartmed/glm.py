"""Maximum-likelihood logistic and Gaussian linear models.

Small and fast on purpose: the simulation comparator refits these models
hundreds of times per replicate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

SEPARATION_ETA = 30.0
RIDGE = 1e-6


@dataclass
class GlmFit:
    family: str  # "binary" (logit link) or "continuous" (identity link)
    coef: np.ndarray  # intercept first
    se: np.ndarray
    sigma: float = 1.0
    separated: bool = False
    converged: bool = True
    n: int = 0

    @property
    def intercept(self) -> float:
        return float(self.coef[0])

    @property
    def slopes(self) -> np.ndarray:
        return self.coef[1:]


def _design(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    return np.column_stack([np.ones(x.shape[0]), x])


def fit_gaussian(x, y) -> GlmFit:
    X = _design(x)
    y = np.asarray(y, dtype=np.float64)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    dof = max(len(y) - np.linalg.matrix_rank(X), 1)
    sigma2 = float(resid @ resid / dof)
    cov = sigma2 * np.linalg.pinv(X.T @ X)
    return GlmFit("continuous", coef, np.sqrt(np.clip(np.diag(cov), 0, None)),
                  float(np.sqrt(sigma2)), n=len(y))


def _newton_logistic(X, y, ridge: float, max_iter: int = 100, tol: float = 1e-10):
    p = X.shape[1]
    pen = np.full(p, ridge)
    pen[0] = 0.0
    beta = np.zeros(p)
    ybar = np.clip(y.mean(), 1e-6, 1 - 1e-6)
    beta[0] = np.log(ybar / (1 - ybar))

    def objective(b):
        eta = X @ b
        return float(np.sum(y * eta - np.logaddexp(0.0, eta)) - 0.5 * np.sum(pen * b * b))

    obj = objective(beta)
    converged = False
    for _ in range(max_iter):
        mu = expit(X @ beta)
        w = mu * (1 - mu)
        grad = X.T @ (y - mu) - pen * beta
        hess = (X * w[:, None]).T @ X + np.diag(pen)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        t = 1.0
        while True:
            cand = beta + t * step
            new = objective(cand)
            if new >= obj - 1e-12 or t < 1e-8:
                break
            t *= 0.5
        beta, old = cand, obj
        obj = new
        if abs(obj - old) < tol * (1 + abs(obj)) and np.max(np.abs(t * step)) < 1e-7:
            converged = True
            break
    mu = expit(X @ beta)
    hess = (X * (mu * (1 - mu))[:, None]).T @ X + np.diag(pen)
    cov = np.linalg.pinv(hess)
    return beta, np.sqrt(np.clip(np.diag(cov), 0, None)), converged


def fit_logistic(x, y) -> GlmFit:
    """Logistic regression; falls back to a tiny ridge penalty under separation."""
    X = _design(x)
    y = np.asarray(y, dtype=np.float64)
    separated = bool(y.min() == y.max())
    if not separated:
        beta, se, ok = _newton_logistic(X, y, 0.0, max_iter=50)
        separated = (not ok) or np.max(np.abs(X @ beta)) > SEPARATION_ETA
    if separated:
        beta, se, ok = _newton_logistic(X, y, RIDGE, max_iter=200)
    return GlmFit("binary", beta, se, separated=separated, converged=ok, n=len(y))


def fit_glm(x, y, family: str) -> GlmFit:
    if family == "binary":
        return fit_logistic(x, y)
    if family == "continuous":
        return fit_gaussian(x, y)
    raise ValueError(f"unknown family {family!r}")
