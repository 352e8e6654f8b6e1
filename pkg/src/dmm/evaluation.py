"""Metrics and reports: RMSE, the "a (b) {c}" NLL triple, variant tables
and do-intervention counterfactual rollouts."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .data import SequenceBatch
from .elbo import batch_is_loglik, elbo
from .exact import exact_rmse
from .gssm import ContractError, GenerativeModel
from .infnet import InferenceNetwork
from .trainer import TrainConfig, train


def rmse_posterior(means: np.ndarray, z_star: np.ndarray | None, lengths: np.ndarray | None = None) -> float:
    """Root mean (over sequences and valid steps) of the squared error summed over latent dims."""
    if z_star is None:
        raise ContractError("RMSE needs ground-truth latents (z_star)")
    means, z_star = np.asarray(means, float), np.asarray(z_star, float)
    if lengths is None or (np.asarray(lengths) == means.shape[1]).all():
        return exact_rmse(means, z_star)
    valid = np.arange(means.shape[1])[None, :] < np.asarray(lengths)[:, None]
    sq = ((means - z_star) ** 2).sum(axis=-1)
    return float(np.sqrt(sq[valid].mean()))


def posterior_means(net: InferenceNetwork, batch: SequenceBatch) -> np.ndarray:
    """Deterministic posterior-mean path (``z_t`` fed forward as ``mu_t``), ``[N, T, d]``."""
    out = np.zeros((batch.n, batch.T, net.latent_dim))
    for idx, group in batch.groups():
        g, _ = net.infer(group.observed_x(), group.u, sample=False)
        out[idx, : group.T] = g.means
    return out


# ----------------------------------------------------------------------------
# NLL report


@dataclass
class NllReport:
    """Held-out NLL per time step.

    ``a`` importance-sampled NLL normalized by the total number of steps,
    ``b`` negative bound normalized the same way, ``c`` the per-sequence
    average of the negative bound divided by each sequence's length.
    """

    a: float
    b: float
    c: float
    S: int
    n_sequences: int
    total_steps: int

    def format(self) -> str:
        return f"{self.a:.3f} ({self.b:.3f}) {{{self.c:.3f}}}"

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def nll_report(model, net, batch: SequenceBatch, S: int, rng: np.random.Generator, n_samples: int = 1) -> NllReport:
    if S < 1:
        raise ContractError("S must be >= 1")
    bound = elbo(model, net, batch, 1.0, n_samples, rng).per_sequence
    ll = batch_is_loglik(model, net, batch, S, rng)
    T = batch.lengths.astype(float)
    return NllReport(
        a=float(-ll.sum() / T.sum()),
        b=float(-bound.sum() / T.sum()),
        c=float(np.mean(-bound / T)),
        S=S,
        n_sequences=batch.n,
        total_steps=int(T.sum()),
    )


# ----------------------------------------------------------------------------
# variant comparison


@dataclass
class VariantRow:
    variant: str
    seed: int
    bound: float  # mean held-out bound per sequence
    rmse: float | None
    updates: int


def held_out_bound(model, net, batch: SequenceBatch, seed: int, n_samples: int = 1) -> float:
    return elbo(model, net, batch, 1.0, n_samples, np.random.default_rng([seed, 2024])).value


def compare_variants(
    make_model: Callable[[int], GenerativeModel],
    variants: Sequence[str],
    train_set: SequenceBatch,
    valid_set: SequenceBatch,
    test_set: SequenceBatch,
    cfg: TrainConfig,
    seeds: Sequence[int],
    net_kwargs: dict | None = None,
    eval_samples: int = 1,
) -> list[VariantRow]:
    """Train every (variant, seed) pair under the same budget and score it on ``test_set``."""
    if not seeds:
        raise ContractError("need at least one seed")
    rows = []
    for variant in variants:
        for seed in seeds:
            model = make_model(seed)
            net = InferenceNetwork(
                variant, model.obs_dim, model.latent_dim, model.action_dim, seed=seed, **(net_kwargs or {})
            )
            _, _, log = train(model, net, train_set, valid_set, replace(cfg, seed=seed))
            rmse = None
            if test_set.z_star is not None:
                rmse = rmse_posterior(posterior_means(net, test_set), test_set.z_star, test_set.lengths)
            bound = held_out_bound(model, net, test_set, seed, eval_samples)
            rows.append(VariantRow(variant, seed, bound, rmse, len(log.updates)))
    return rows


def rows_to_csv(rows: Sequence[VariantRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "seed", "bound", "rmse", "updates"])
    for r in rows:
        w.writerow([r.variant, r.seed, repr(r.bound), "" if r.rmse is None else repr(r.rmse), r.updates])
    return buf.getvalue()


def median_by_variant(rows: Sequence[VariantRow], attr: str = "bound") -> dict[str, float]:
    out: dict[str, list[float]] = {}
    for r in rows:
        out.setdefault(r.variant, []).append(getattr(r, attr))
    return {k: float(np.median(v)) for k, v in out.items()}


# ----------------------------------------------------------------------------
# counterfactual rollouts


@dataclass
class CounterfactualReport:
    steps: list[int]  # 1-based time index of each rolled-out step
    factual: list[float]
    counterfactual: list[float]
    k: int
    n_rollouts: int
    dim: int
    cut: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "factual", "counterfactual"])
        for s, f, c in zip(self.steps, self.factual, self.counterfactual):
            w.writerow([s, repr(f), repr(c)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def counterfactual_rollout(
    model: GenerativeModel,
    net: InferenceNetwork,
    x: np.ndarray,
    u: np.ndarray,
    k: int,
    horizon: int,
    n_rollouts: int,
    dim: int,
    cut: float,
    rng: np.random.Generator,
    mask: np.ndarray | None = None,
) -> CounterfactualReport:
    """Contrast observed actions against "no treatment" from step ``k`` on.

    The posterior mean of ``z_k`` given ``x_{1..k}, u_{1..k}`` seeds two
    ancestral samplers sharing the same noise: one applies ``u_k, u_{k+1}, ...``
    from the data, the other the zero action.  At each rolled-out step the
    emission probability of observation ``dim`` is thresholded at ``cut``
    and the high fraction is averaged over sequences and rollouts.
    """
    if not model.action_dim:
        raise ContractError("counterfactual rollouts need an action-conditioned model (DMM-Actions)")
    x = np.asarray(x, float)
    u = np.asarray(u, float)
    if x.ndim == 2:
        x, u = x[None], u[None]
        mask = None if mask is None else np.asarray(mask, float)[None]
    N = x.shape[0]
    if not 1 <= k <= x.shape[1]:
        raise ContractError(f"k={k} outside the observed range 1..{x.shape[1]}")
    if u.shape[1] < k - 1 + horizon:
        raise ContractError(f"actions cover {u.shape[1]} steps; k + horizon - 1 = {k - 1 + horizon} needed")
    report = CounterfactualReport([], [], [], k, n_rollouts, dim, cut)
    if horizon == 0:
        return report
    mask = np.ones_like(x) if mask is None else np.asarray(mask, float)
    xo = np.where(mask[:, :k] > 0, x[:, :k], 0.0)
    g, _ = net.infer(xo, u[:, :k], sample=False)
    z0 = np.repeat(g.means[:, k - 1], n_rollouts, axis=0)
    z_f, z_cf = z0, z0.copy()
    zero = np.zeros((N * n_rollouts, model.action_dim))
    for j in range(horizon):
        eps = rng.standard_normal(z0.shape)
        u_f = np.repeat(u[:, k - 1 + j], n_rollouts, axis=0)
        z_f = _advance(model, z_f, u_f, eps)
        z_cf = _advance(model, z_cf, zero, eps)
        report.steps.append(k + j + 1)
        report.factual.append(_high_fraction(model, z_f, dim, cut))
        report.counterfactual.append(_high_fraction(model, z_cf, dim, cut))
    return report


def _advance(model, z, u, eps):
    out = model.transition(ad.const(z), ad.const(u))
    return out.mean.value + np.sqrt(out.var.value) * eps


def _high_fraction(model, z, dim, cut) -> float:
    p = model.emission(ad.const(z)).mean.value[:, dim]
    return float((p > cut).mean())
