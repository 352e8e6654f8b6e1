"""Factorized variational bound, KL annealing and importance-sampled likelihood."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .data import SequenceBatch
from .gssm import ContractError, GenerativeModel, gaussian_logpdf
from .infnet import InferenceNetwork


def kl_diag_gaussian(mu_q, var_q, mu_p, var_p) -> Node:
    """KL(q || p) for diagonal Gaussians, summed over the last axis.

    Any operand may be a node or an array; a ``[d]`` operand broadcasts over
    a leading batch axis.
    """
    mu_q, var_q, mu_p, var_p = (ad.as_node(a) for a in (mu_q, var_q, mu_p, var_p))
    if (var_q.value <= 0).any() or (var_p.value <= 0).any():
        raise ContractError("kl_diag_gaussian: variances must be strictly positive")
    ratio = ad.div(var_q, var_p)
    term = ad.add(
        ad.sub(ad.sub(ratio, ad.log(ratio)), 1.0),
        ad.div(ad.square(ad.sub(mu_p, mu_q)), var_p),
    )
    return ad.scale(ad.sum(term, axis=-1), 0.5)


def anneal_weight(step: int, horizon: int) -> float:
    """Linear KL-weight ramp from 0 to 1 over ``horizon`` updates."""
    if horizon < 1:
        raise ContractError("anneal horizon must be >= 1")
    return min(1.0, step / horizon)


@dataclass
class ElboBreakdown:
    """Batch-averaged bound terms; ``objective`` is the differentiable node."""

    objective: Node
    reconstruction: float
    kl_t1: float
    kl_rest: float
    anneal_weight: float
    per_sequence: np.ndarray  # objective per sequence, in batch order

    @property
    def value(self) -> float:
        return float(self.objective.value)


def _check_dims(model: GenerativeModel, net: InferenceNetwork, batch: SequenceBatch) -> None:
    if model.latent_dim != net.latent_dim:
        raise ContractError(f"latent dim mismatch: model {model.latent_dim}, network {net.latent_dim}")
    if batch.obs_dim != model.obs_dim or batch.obs_dim != net.obs_dim:
        raise ContractError(f"obs dim mismatch: data {batch.obs_dim}, model {model.obs_dim}, network {net.obs_dim}")
    if model.action_dim and batch.u is None:
        raise ContractError("action-conditioned model needs actions in the batch")


def sequence_terms(model, net, x, mask, u, rng=None, eps=None):
    """Single-sample (reconstruction, KL at t=1, KL for t>=2) per sequence, each ``[B]``."""
    path = net.infer_path(x, u, rng=rng, sample=True, eps=eps)
    B, T = x.shape[:2]
    recon = kl1 = klr = None
    for t in range(T):
        ll = model.log_emission(x[:, t], mask[:, t], path.z[t])
        recon = ll if recon is None else ad.add(recon, ll)
        if t == 0:
            p = model.prior(B)
            kl1 = kl_diag_gaussian(path.means[0], path.variances[0], p.mean, p.var)
        else:
            p = model.transition(path.z[t - 1], None if u is None else u[:, t - 1])
            k = kl_diag_gaussian(path.means[t], path.variances[t], p.mean, p.var)
            klr = k if klr is None else ad.add(klr, k)
    if klr is None:
        klr = ad.const(np.zeros(B))
    return recon, kl1, klr


def elbo(
    model: GenerativeModel,
    net: InferenceNetwork,
    batch: SequenceBatch,
    anneal: float = 1.0,
    n_samples: int = 1,
    rng: np.random.Generator | None = None,
) -> ElboBreakdown:
    """Bound averaged over the sequences of ``batch``.

    Sequences are grouped by length and each group is swept as one batch;
    per-sequence values are summed over time and averaged over sequences.
    """
    if n_samples < 1:
        raise ContractError("n_samples must be >= 1")
    _check_dims(model, net, batch)
    N = batch.n
    total = None
    sums = np.zeros(3)
    per_seq = np.zeros(N)
    for idx, group in batch.groups():
        x, mask = group.observed_x(), group.mask
        u = group.u
        for _ in range(n_samples):
            recon, kl1, klr = sequence_terms(model, net, x, mask, u, rng=rng)
            obj = ad.sub(recon, ad.scale(ad.add(kl1, klr), anneal))
            contrib = ad.sum(obj)
            total = contrib if total is None else ad.add(total, contrib)
            sums += [recon.value.sum(), kl1.value.sum(), klr.value.sum()]
            per_seq[idx] += obj.value
    scale = 1.0 / (N * n_samples)
    return ElboBreakdown(
        objective=ad.scale(total, scale),
        reconstruction=sums[0] * scale,
        kl_t1=sums[1] * scale,
        kl_rest=sums[2] * scale,
        anneal_weight=anneal,
        per_sequence=per_seq / n_samples,
    )


def log_mean_exp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    """``log(mean(exp(a)))`` along ``axis``, shifted by the max for stability."""
    a = np.asarray(a, dtype=np.float64)
    m = a.max(axis=axis, keepdims=True)
    out = m + np.log(np.exp(a - m).mean(axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def log_importance_weights(model, net, x, mask, u=None, rng=None, eps=None) -> np.ndarray:
    """``log p(x|z) + log p(z) - log q(z|x)`` for one posterior draw per sequence, ``[B]``."""
    x = np.where(mask > 0, x, 0.0)
    path = net.infer_path(x, u, rng=rng, sample=True, eps=eps)
    B, T = x.shape[:2]
    lw = np.zeros(B)
    for t in range(T):
        z = path.z[t]
        if t == 0:
            p = model.prior(B)
        else:
            p = model.transition(z_prev, None if u is None else u[:, t - 1])
        lp = ad.sum(gaussian_logpdf(z, p.mean, p.var), axis=-1).value
        lq = ad.sum(gaussian_logpdf(z, path.means[t], path.variances[t]), axis=-1).value
        lx = model.log_emission(x[:, t], mask[:, t], z).value
        lw += lx + lp - lq
        z_prev = z
    return lw


def is_loglik(
    model: GenerativeModel,
    net: InferenceNetwork,
    x: np.ndarray,
    mask: np.ndarray,
    u: np.ndarray | None,
    S: int,
    rng: np.random.Generator,
    max_batch: int = 4096,
) -> np.ndarray:
    """Importance-sampled ``log p(x)`` per sequence with ``S`` posterior draws.

    ``x``/``mask`` are ``[B, T, D]`` sequences of a common length.  Draws are
    stacked along the batch axis in chunks of at most ``max_batch`` rows.
    """
    if S < 1:
        raise ContractError("S must be >= 1")
    x = np.asarray(x, float)
    mask = np.asarray(mask, float)
    if x.ndim == 2:
        x, mask = x[None], mask[None]
        u = None if u is None else np.asarray(u, float)[None]
    B = x.shape[0]
    per_chunk = max(1, max_batch // B)
    weights = []
    done = 0
    while done < S:
        k = min(per_chunk, S - done)
        rep = lambda a: None if a is None else np.repeat(a, k, axis=0)  # noqa: E731
        lw = log_importance_weights(model, net, rep(x), rep(mask), rep(u), rng=rng)
        weights.append(lw.reshape(B, k))
        done += k
    return log_mean_exp(np.concatenate(weights, axis=1), axis=1)


def batch_is_loglik(model, net, batch: SequenceBatch, S: int, rng) -> np.ndarray:
    """:func:`is_loglik` over every length group of ``batch``, in batch order."""
    out = np.zeros(batch.n)
    for idx, group in batch.groups():
        out[idx] = is_loglik(model, net, group.x, group.mask, group.u, S, rng)
    return out
