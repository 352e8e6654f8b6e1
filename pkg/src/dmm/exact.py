"""Exact inference for linear-Gaussian state-space models.

Three independent routes to the same posterior:

* :func:`kalman_filter` -- forward predict/update recursion,
* :func:`rts_smooth` -- Rauch-Tung-Striebel backward pass over the filter,
* :func:`joint_conditioning_oracle` -- builds the dense joint Gaussian over
  every latent and observation and conditions it in one shot.

The oracle costs ``O((T(d+m))^3)`` and is capped at ``T <= 8``; it exists to
check the recursions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .infnet import GaussianSeq

LOG_2PI = math.log(2.0 * math.pi)
ORACLE_MAX_T = 8


class NumericalError(ArithmeticError):
    def __init__(self, step: int, what: str):
        super().__init__(f"step {step}: {what} is not positive definite")
        self.step = step


@dataclass
class LinearSystem:
    """``z_1 ~ N(mu0, S0)``, ``z_t = A z_{t-1} + c + N(0, Q)``, ``x_t = H z_t + N(0, R)``."""

    A: np.ndarray
    c: np.ndarray
    Q: np.ndarray
    H: np.ndarray
    R: np.ndarray
    mu0: np.ndarray
    S0: np.ndarray

    def __post_init__(self):
        for name in ("A", "Q", "H", "R", "S0"):
            setattr(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=np.float64)))
        self.c = np.atleast_1d(np.asarray(self.c, dtype=np.float64))
        self.mu0 = np.atleast_1d(np.asarray(self.mu0, dtype=np.float64))

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.H.shape[0]


@dataclass
class FilterResult:
    means: np.ndarray  # [T, d] filtered
    covs: np.ndarray  # [T, d, d]
    pred_means: np.ndarray  # [T, d] one-step predictions (prior for t=0)
    pred_covs: np.ndarray
    loglik_increments: np.ndarray  # [T]

    @property
    def loglik(self) -> float:
        return float(self.loglik_increments.sum())


@dataclass
class SmoothResult:
    means: np.ndarray  # [T, d]
    covs: np.ndarray  # [T, d, d]

    def gaussian(self) -> GaussianSeq:
        return GaussianSeq(self.means[None], np.diagonal(self.covs, axis1=1, axis2=2)[None].copy())


def _sym(S: np.ndarray) -> np.ndarray:
    return 0.5 * (S + S.T)


def _chol(S: np.ndarray, step: int, what: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise NumericalError(step, what) from None


def _gauss_logpdf_chol(resid: np.ndarray, L: np.ndarray) -> float:
    w = np.linalg.solve(L, resid)
    return float(-0.5 * (w @ w) - np.log(np.diag(L)).sum() - 0.5 * len(resid) * LOG_2PI)


def kalman_filter(sys: LinearSystem, x: np.ndarray) -> FilterResult:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != sys.m:
        x = x.reshape(-1, sys.m)
    T, d = x.shape[0], sys.d
    means, covs = np.zeros((T, d)), np.zeros((T, d, d))
    pmeans, pcovs = np.zeros((T, d)), np.zeros((T, d, d))
    inc = np.zeros(T)
    mu, P = sys.mu0.copy(), sys.S0.copy()
    eye = np.eye(d)
    for t in range(T):
        if t > 0:
            mu = sys.A @ mu + sys.c
            P = _sym(sys.A @ P @ sys.A.T + sys.Q)
        pmeans[t], pcovs[t] = mu, P
        S = _sym(sys.H @ P @ sys.H.T + sys.R)
        L = _chol(S, t, "innovation covariance")
        resid = x[t] - sys.H @ mu
        inc[t] = _gauss_logpdf_chol(resid, L)
        K = np.linalg.solve(S, sys.H @ P).T
        mu = mu + K @ resid
        IKH = eye - K @ sys.H
        # Joseph form keeps P symmetric positive semi-definite
        P = _sym(IKH @ P @ IKH.T + K @ sys.R @ K.T)
        means[t], covs[t] = mu, P
    return FilterResult(means, covs, pmeans, pcovs, inc)


def rts_smooth(sys: LinearSystem, x: np.ndarray, filtered: FilterResult | None = None) -> SmoothResult:
    f = filtered or kalman_filter(sys, x)
    T = f.means.shape[0]
    means, covs = f.means.copy(), f.covs.copy()
    for t in range(T - 2, -1, -1):
        P_pred = f.pred_covs[t + 1]
        G = np.linalg.solve(P_pred, sys.A @ f.covs[t]).T
        means[t] = f.means[t] + G @ (means[t + 1] - f.pred_means[t + 1])
        covs[t] = _sym(f.covs[t] + G @ (covs[t + 1] - P_pred) @ G.T)
    return SmoothResult(means, covs)


def joint_conditioning_oracle(sys: LinearSystem, x: np.ndarray) -> tuple[SmoothResult, float]:
    """Posterior marginals and ``log p(x)`` by dense Gaussian conditioning."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != sys.m:
        x = x.reshape(-1, sys.m)
    T, d, m = x.shape[0], sys.d, sys.m
    if T > ORACLE_MAX_T:
        raise ValueError(f"joint_conditioning_oracle: T={T} exceeds the dense limit {ORACLE_MAX_T}")

    # latent marginal means/covariances, then cross-covariances A^(t-s) V_s
    mz = np.zeros((T, d))
    V = np.zeros((T, d, d))
    mz[0], V[0] = sys.mu0, sys.S0
    for t in range(1, T):
        mz[t] = sys.A @ mz[t - 1] + sys.c
        V[t] = sys.A @ V[t - 1] @ sys.A.T + sys.Q
    Szz = np.zeros((T * d, T * d))
    for s in range(T):
        block = V[s]
        for t in range(s, T):
            Szz[t * d : (t + 1) * d, s * d : (s + 1) * d] = block
            Szz[s * d : (s + 1) * d, t * d : (t + 1) * d] = block.T
            block = sys.A @ block
    Hbig = np.kron(np.eye(T), sys.H)
    Rbig = np.kron(np.eye(T), sys.R)
    mx = Hbig @ mz.ravel()
    Sxx = Hbig @ Szz @ Hbig.T + Rbig
    Szx = Szz @ Hbig.T

    resid = x.ravel() - mx
    L = np.linalg.cholesky(Sxx)
    loglik = _gauss_logpdf_chol(resid, L)
    gain = np.linalg.solve(Sxx, Szx.T).T
    post_mean = mz.ravel() + gain @ resid
    post_cov = Szz - gain @ Szx.T
    means = post_mean.reshape(T, d)
    covs = np.stack([post_cov[t * d : (t + 1) * d, t * d : (t + 1) * d] for t in range(T)])
    return SmoothResult(means, covs), loglik


def smooth_batch(sys: LinearSystem, x: np.ndarray) -> tuple[GaussianSeq, np.ndarray]:
    """RTS marginals for ``x [N, T, m]``; returns (GaussianSeq ``[N,T,d]``, log-likelihoods ``[N]``)."""
    means, variances, ll = [], [], []
    for seq in np.asarray(x, dtype=np.float64):
        f = kalman_filter(sys, seq)
        s = rts_smooth(sys, seq, f)
        means.append(s.means)
        variances.append(np.diagonal(s.covs, axis1=1, axis2=2))
        ll.append(f.loglik)
    return GaussianSeq(np.stack(means), np.stack(variances)), np.array(ll)


def exact_rmse(means: np.ndarray, z_star: np.ndarray) -> float:
    """``sqrt(mean over sequences and steps of the squared error summed over latent dims)``."""
    means = np.asarray(means, dtype=np.float64)
    z_star = np.asarray(z_star, dtype=np.float64)
    if means.shape != z_star.shape:
        raise ValueError(f"shape mismatch: means {means.shape}, z_star {z_star.shape}")
    if means.ndim == 2:
        means, z_star = means[..., None], z_star[..., None]
    sq = ((means - z_star) ** 2).sum(axis=-1)
    return float(np.sqrt(sq.mean()))
