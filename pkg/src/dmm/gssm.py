"""Gaussian state-space generative models.

Four variants share one interface:

* ``LinearGSSM`` -- fixed linear-Gaussian system (scalar-diagonal dynamics),
* ``NonlinearGSSM2D`` -- two-dimensional system with learnable ``alpha`` and
  ``beta`` inside ``tanh``/``sin`` couplings,
* ``DMM`` -- deep Markov model with a gated transition and a Bernoulli MLP
  emission,
* ``DMM-Actions`` -- the same with an action vector fed to the transition.

All forward computations take and return :class:`~dmm.autodiff.Node` values
with a leading batch axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers
from .autodiff import Node, ParamStore

LOG_2PI = math.log(2.0 * math.pi)

VARIANTS = ("LinearGSSM", "NonlinearGSSM2D", "DMM", "DMM-Actions")


class ContractError(ValueError):
    pass


@dataclass
class TransitionOut:
    mean: Node
    var: Node


@dataclass
class EmissionOut:
    dist: str  # "bernoulli" | "gaussian"
    mean: Node  # probabilities for Bernoulli
    var: Node | None = None
    logits: Node | None = None


def gaussian_logpdf(x, mean, var) -> Node:
    """Elementwise diagonal-Gaussian log-density (no reduction)."""
    diff = ad.sub(x, mean)
    return ad.scale(ad.add(ad.add(ad.log(var), LOG_2PI), ad.div(ad.square(diff), var)), -0.5)


class GenerativeModel:
    variant: str = ""

    def __init__(self, latent_dim: int, obs_dim: int, action_dim: int = 0):
        self.latent_dim = latent_dim
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.store = ParamStore()
        self.prior_mean = np.zeros(latent_dim)
        self.prior_var = np.ones(latent_dim)

    # -- subclass hooks ---------------------------------------------------
    def _transition(self, z_prev: Node, u_prev: Node | None) -> TransitionOut:
        raise NotImplementedError

    def emission(self, z: Node) -> EmissionOut:
        raise NotImplementedError

    def config(self) -> dict:
        raise NotImplementedError

    # -- shared -----------------------------------------------------------
    def _base_config(self) -> dict:
        return {
            "variant": self.variant,
            "latent_dim": self.latent_dim,
            "obs_dim": self.obs_dim,
            "action_dim": self.action_dim,
            "prior_mean": self.prior_mean.tolist(),
            "prior_var": self.prior_var.tolist(),
        }

    def transition(self, z_prev, u_prev=None, dt: float = 1.0) -> TransitionOut:
        # dt is accepted for irregular sampling but every current variant treats it as 1
        z_prev = ad.as_node(z_prev)
        if z_prev.shape[-1] != self.latent_dim:
            raise ContractError(f"z_prev has dim {z_prev.shape[-1]}, model latent dim is {self.latent_dim}")
        if self.action_dim:
            if u_prev is None:
                raise ContractError(f"{self.variant} requires u_prev")
            u_prev = ad.as_node(u_prev)
        return self._transition(z_prev, u_prev if self.action_dim else None)

    def prior(self, batch: int) -> TransitionOut:
        return TransitionOut(
            ad.const(np.tile(self.prior_mean, (batch, 1))),
            ad.const(np.tile(self.prior_var, (batch, 1))),
        )

    def log_emission(self, x: np.ndarray, mask: np.ndarray, z) -> Node:
        """Per-sequence masked log-likelihood ``sum_d mask_d log p(x_d | z)``, shape ``[B]``."""
        x = np.asarray(x, dtype=np.float64)
        mask = np.asarray(mask, dtype=np.float64)
        if x.shape != mask.shape or x.shape[-1] != self.obs_dim:
            raise ContractError(f"x {x.shape} / mask {mask.shape} do not match obs dim {self.obs_dim}")
        x = np.where(mask > 0, x, 0.0)
        out = self.emission(ad.as_node(z))
        if out.dist == "bernoulli":
            if not np.isin(x, (0.0, 1.0)).all():
                raise ContractError("Bernoulli emission requires binary observations")
            # x*l - softplus(l) == x log p + (1-x) log(1-p)
            ll = ad.sub(ad.mul(ad.const(x), out.logits), ad.softplus(out.logits))
        else:
            ll = gaussian_logpdf(ad.const(x), out.mean, out.var)
        return ad.sum(ad.mul(ad.const(mask), ll), axis=-1)

    def sample_emission(self, z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        out = self.emission(ad.const(z))
        if out.dist == "bernoulli":
            return (rng.uniform(size=out.mean.shape) < out.mean.value).astype(np.float64)
        noise = rng.standard_normal(out.mean.shape)
        return out.mean.value + np.sqrt(out.var.value) * noise


class LinearGSSM(GenerativeModel):
    """``z_t ~ N(a z_{t-1} + c, q)``, ``x_t ~ N(h z_t, r)``, all diagonal.

    Defaults reproduce the one-dimensional compiled-inference system.
    """

    variant = "LinearGSSM"

    def __init__(self, dim=1, a=1.0, c=0.05, q=10.0, h=0.5, r=20.0, prior_mean=0.0, prior_var=1.0, trainable=False):
        super().__init__(dim, dim)
        for name, val in (("a", a), ("c", c), ("q", q), ("h", h), ("r", r)):
            self.store.add(name, np.broadcast_to(np.asarray(val, dtype=np.float64), (dim,)).copy(), trainable)
        self.prior_mean = np.broadcast_to(np.asarray(prior_mean, float), (dim,)).copy()
        self.prior_var = np.broadcast_to(np.asarray(prior_var, float), (dim,)).copy()

    def _transition(self, z_prev, u_prev):
        s = self.store
        mean = ad.add(ad.mul(z_prev, s["a"]), s["c"])
        return TransitionOut(mean, s["q"])

    def emission(self, z):
        s = self.store
        return EmissionOut("gaussian", ad.mul(z, s["h"]), s["r"])

    def to_linear_system(self):
        from .exact import LinearSystem

        v = {k: self.store[k].value for k in ("a", "c", "q", "h", "r")}
        return LinearSystem(
            A=np.diag(v["a"]),
            c=v["c"].copy(),
            Q=np.diag(v["q"]),
            H=np.diag(v["h"]),
            R=np.diag(v["r"]),
            mu0=self.prior_mean.copy(),
            S0=np.diag(self.prior_var),
        )

    def config(self):
        cfg = self._base_config()
        cfg.update({k: self.store[k].value.tolist() for k in ("a", "c", "q", "h", "r")})
        cfg["trainable"] = {k: self.store.trainable[k] for k in self.store}
        return cfg


class NonlinearGSSM2D(GenerativeModel):
    """``z_t ~ N([0.2 z0 + tanh(alpha z1); 0.2 z1 + sin(beta z0)], 1.0)``, ``x_t ~ N(0.5 z_t, 0.1)``."""

    variant = "NonlinearGSSM2D"

    def __init__(self, alpha=0.5, beta=-0.1, trans_var=1.0, obs_scale=0.5, obs_var=0.1, train_alpha_beta=True):
        super().__init__(2, 2)
        self.store.add("alpha", np.array([alpha], float), train_alpha_beta)
        self.store.add("beta", np.array([beta], float), train_alpha_beta)
        self.trans_var = float(trans_var)
        self.obs_scale = float(obs_scale)
        self.obs_var = float(obs_var)

    @property
    def alpha(self) -> float:
        return float(self.store["alpha"].value[0])

    @property
    def beta(self) -> float:
        return float(self.store["beta"].value[0])

    def _transition(self, z_prev, u_prev):
        z0 = ad.slice_last(z_prev, 0, 1)
        z1 = ad.slice_last(z_prev, 1, 2)
        m0 = ad.add(ad.scale(z0, 0.2), ad.tanh(ad.mul(z1, self.store["alpha"])))
        m1 = ad.add(ad.scale(z1, 0.2), ad.sin(ad.mul(z0, self.store["beta"])))
        return TransitionOut(ad.concat([m0, m1]), ad.const(np.full(z_prev.shape, self.trans_var)))

    def emission(self, z):
        return EmissionOut("gaussian", ad.scale(z, self.obs_scale), ad.const(np.full(z.shape, self.obs_var)))

    def config(self):
        cfg = self._base_config()
        cfg.update(
            alpha=self.alpha,
            beta=self.beta,
            trans_var=self.trans_var,
            obs_scale=self.obs_scale,
            obs_var=self.obs_var,
            train_alpha_beta=self.store.trainable["alpha"],
        )
        return cfg


class DMM(GenerativeModel):
    """Deep Markov model: gated transition and Bernoulli MLP emission.

    With ``action_dim > 0`` the gate and proposal MLPs read ``[z; u]`` while
    the linear skip path only sees ``z``.
    """

    variant = "DMM"

    def __init__(
        self,
        latent_dim: int,
        obs_dim: int,
        action_dim: int = 0,
        emission_hidden: int = 100,
        transition_hidden: int = 200,
        emission_nl: str = "tanh",
        seed: int | np.random.Generator = 0,
    ):
        super().__init__(latent_dim, obs_dim, action_dim)
        if action_dim:
            self.variant = "DMM-Actions"
        self.emission_hidden = emission_hidden
        self.transition_hidden = transition_hidden
        self.emission_nl = emission_nl
        rng = np.random.default_rng(seed)
        s = self.store
        d, k = latent_dim, latent_dim + action_dim
        layers.add_mlp(s, "trans.gate", [k, transition_hidden, d], rng)
        layers.add_mlp(s, "trans.prop", [k, transition_hidden, d], rng)
        s.add("trans.skip.W", np.eye(d))
        s.add("trans.skip.b", np.zeros(d))
        layers.add_linear(s, "trans.var", d, d, rng)
        layers.add_mlp(s, "emit.mlp", [d, emission_hidden, emission_hidden], rng)
        layers.add_linear(s, "emit.out", emission_hidden, obs_dim, rng)

    def gated_transition(self, inp: Node, z_prev: Node) -> TransitionOut:
        s = self.store
        g = layers.mlp(s, "trans.gate", inp, 2, "relu", "sigmoid")
        h = layers.mlp(s, "trans.prop", inp, 2, "relu", "identity")
        skip = layers.linear(s, "trans.skip", z_prev)
        mean = ad.add(ad.mul(ad.sub(1.0, g), skip), ad.mul(g, h))
        var = ad.softplus(layers.linear(s, "trans.var", ad.relu(h)))
        return TransitionOut(mean, var)

    def _transition(self, z_prev, u_prev):
        inp = ad.concat([z_prev, u_prev]) if self.action_dim else z_prev
        return self.gated_transition(inp, z_prev)

    def emission(self, z):
        h = layers.mlp(self.store, "emit.mlp", z, 2, self.emission_nl, self.emission_nl)
        logits = layers.linear(self.store, "emit.out", h)
        return EmissionOut("bernoulli", ad.sigmoid(logits), logits=logits)

    def config(self):
        cfg = self._base_config()
        cfg.update(
            emission_hidden=self.emission_hidden,
            transition_hidden=self.transition_hidden,
            emission_nl=self.emission_nl,
        )
        return cfg


def sample_sequence(
    model: GenerativeModel,
    T: int,
    rng: np.random.Generator,
    n: int = 1,
    u_seq: np.ndarray | None = None,
    z1: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Ancestral sampling of ``n`` paths; returns ``z [n,T,d]`` and ``x [n,T,D]``.

    Latents and observations draw from two child streams of ``rng`` so that
    observations can be regenerated from stored latents with
    :func:`emit_sequence`.
    """
    if T < 1:
        raise ContractError("T must be >= 1")
    latent_rng, obs_rng = rng.spawn(2)
    d = model.latent_dim
    z = np.empty((n, T, d))
    if z1 is None:
        z[:, 0] = model.prior_mean + np.sqrt(model.prior_var) * latent_rng.standard_normal((n, d))
    else:
        z[:, 0] = z1
    for t in range(1, T):
        u_prev = None if u_seq is None else u_seq[:, t - 1]
        out = model.transition(z[:, t - 1], u_prev)
        z[:, t] = out.mean.value + np.sqrt(out.var.value) * latent_rng.standard_normal((n, d))
    return z, emit_sequence(model, z, obs_rng)


def emit_sequence(model: GenerativeModel, z: np.ndarray, obs_rng: np.random.Generator) -> np.ndarray:
    n, T, _ = z.shape
    x = np.empty((n, T, model.obs_dim))
    for t in range(T):
        x[:, t] = model.sample_emission(z[:, t], obs_rng)
    return x


def model_from_config(cfg: dict) -> GenerativeModel:
    variant = cfg["variant"]
    if variant == "LinearGSSM":
        m = LinearGSSM(
            dim=cfg.get("latent_dim", 1),
            a=cfg.get("a", 1.0),
            c=cfg.get("c", 0.05),
            q=cfg.get("q", 10.0),
            h=cfg.get("h", 0.5),
            r=cfg.get("r", 20.0),
            prior_mean=cfg.get("prior_mean", 0.0),
            prior_var=cfg.get("prior_var", 1.0),
        )
        for k, flag in cfg.get("trainable", {}).items():
            m.store.trainable[k] = bool(flag)
        return m
    if variant == "NonlinearGSSM2D":
        return NonlinearGSSM2D(
            alpha=cfg.get("alpha", 0.5),
            beta=cfg.get("beta", -0.1),
            trans_var=cfg.get("trans_var", 1.0),
            obs_scale=cfg.get("obs_scale", 0.5),
            obs_var=cfg.get("obs_var", 0.1),
            train_alpha_beta=cfg.get("train_alpha_beta", True),
        )
    if variant in ("DMM", "DMM-Actions"):
        m = DMM(
            latent_dim=cfg["latent_dim"],
            obs_dim=cfg["obs_dim"],
            action_dim=cfg.get("action_dim", 0),
            emission_hidden=cfg.get("emission_hidden", 100),
            transition_hidden=cfg.get("transition_hidden", 200),
            emission_nl=cfg.get("emission_nl", "tanh"),
            seed=cfg.get("seed", 0),
        )
        if "prior_mean" in cfg:
            m.prior_mean = np.asarray(cfg["prior_mean"], float)
            m.prior_var = np.asarray(cfg["prior_var"], float)
        if (m.action_dim > 0) != (variant == "DMM-Actions"):
            raise ContractError(f"variant {variant} inconsistent with action_dim={m.action_dim}")
        return m
    raise ContractError(f"unknown model variant {variant!r}; expected one of {VARIANTS}")
