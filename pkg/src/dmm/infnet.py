"""Recurrent inference networks producing ``q(z_t | ...)``.

Variants (names as used in configs):

========  ====================================  =======================
variant   conditioning set for ``z_t``          encoder
========  ====================================  =======================
MF-L      x_1..x_t                              forward LSTM
MF-LR     x_1..x_T                              both directions
ST-L      z_{t-1}, x_1..x_t                     forward LSTM + combiner
DKS       z_{t-1}, x_t..x_T                     backward LSTM + combiner
ST-LR     z_{t-1}, x_1..x_T                     both + combiner
========  ====================================  =======================
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers
from .autodiff import Node, ParamStore
from .gssm import ContractError

INFERENCE_VARIANTS = ("MF-L", "MF-LR", "ST-L", "DKS", "ST-LR")
_USES_LEFT = {"MF-L", "MF-LR", "ST-L", "ST-LR"}
_USES_RIGHT = {"MF-LR", "DKS", "ST-LR"}
_STRUCTURED = {"ST-L", "DKS", "ST-LR"}


@dataclass
class EncoderState:
    h_left: list[Node] | None
    h_right: list[Node] | None


@dataclass
class GaussianSeq:
    """Diagonal Gaussian marginals, ``means``/``variances`` shaped ``[B, T, d]``."""

    means: np.ndarray
    variances: np.ndarray


@dataclass
class PosteriorPath:
    """Graph-level output of a left-to-right sweep (one node per step)."""

    means: list[Node]
    variances: list[Node]
    z: list[Node]

    def gaussian(self) -> GaussianSeq:
        return GaussianSeq(
            np.stack([m.value for m in self.means], axis=1),
            np.stack([v.value for v in self.variances], axis=1),
        )

    def z_array(self) -> np.ndarray:
        return np.stack([z.value for z in self.z], axis=1)


class InferenceNetwork:
    def __init__(
        self,
        variant: str,
        obs_dim: int,
        latent_dim: int,
        action_dim: int = 0,
        rnn_dim: int = 40,
        input_hidden: tuple[int, ...] = (20,),
        input_nl: str = "relu",
        seed: int | np.random.Generator = 0,
    ):
        if variant not in INFERENCE_VARIANTS:
            raise ContractError(f"unknown inference variant {variant!r}; expected one of {INFERENCE_VARIANTS}")
        self.variant = variant
        self.obs_dim = obs_dim
        self.latent_dim = latent_dim
        self.action_dim = action_dim
        self.rnn_dim = rnn_dim
        self.input_hidden = tuple(input_hidden)
        self.input_nl = input_nl
        self.uses_left = variant in _USES_LEFT
        self.uses_right = variant in _USES_RIGHT
        self.structured = variant in _STRUCTURED

        rng = np.random.default_rng(seed)
        s = self.store = ParamStore()
        sizes = [obs_dim + action_dim, *self.input_hidden]
        layers.add_mlp(s, "in", sizes, rng)
        feat = sizes[-1]
        if self.uses_left:
            layers.add_lstm(s, "rnn.fwd", feat, rnn_dim, rng)
        if self.uses_right:
            layers.add_lstm(s, "rnn.bwd", feat, rnn_dim, rng)
        if self.structured:
            layers.add_linear(s, "comb.z", latent_dim, rnn_dim, rng)
            layers.add_linear(s, "head.mu", rnn_dim, latent_dim, rng)
            layers.add_linear(s, "head.var", rnn_dim, latent_dim, rng)
        else:
            sides = ("l", "r") if variant == "MF-LR" else ("l",)
            for side in sides:
                layers.add_linear(s, f"head.{side}.mu", rnn_dim, latent_dim, rng)
                layers.add_linear(s, f"head.{side}.var", rnn_dim, latent_dim, rng)

    def config(self) -> dict:
        return {
            "variant": self.variant,
            "obs_dim": self.obs_dim,
            "latent_dim": self.latent_dim,
            "action_dim": self.action_dim,
            "rnn_dim": self.rnn_dim,
            "input_hidden": list(self.input_hidden),
            "input_nl": self.input_nl,
        }

    @classmethod
    def from_config(cls, cfg: dict, seed=0) -> "InferenceNetwork":
        return cls(
            cfg["variant"],
            cfg["obs_dim"],
            cfg["latent_dim"],
            action_dim=cfg.get("action_dim", 0),
            rnn_dim=cfg.get("rnn_dim", 40),
            input_hidden=tuple(cfg.get("input_hidden", (20,))),
            input_nl=cfg.get("input_nl", "relu"),
            seed=cfg.get("seed", seed),
        )

    # ------------------------------------------------------------------
    def encode(self, x: np.ndarray, u: np.ndarray | None = None) -> EncoderState:
        """Run the per-step input MLP and the LSTM direction(s) the variant needs.

        ``x`` is ``[B, T, obs_dim]`` (``[T, obs_dim]`` is promoted to a batch of one).
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
            u = None if u is None else np.asarray(u, float)[None]
        if x.shape[1] == 0:
            raise ContractError("cannot encode an empty sequence (T = 0)")
        if x.shape[-1] != self.obs_dim:
            raise ContractError(f"x has obs dim {x.shape[-1]}, network expects {self.obs_dim}")
        if self.action_dim:
            if u is None:
                raise ContractError("this network conditions on actions; u is required")
            x = np.concatenate([x, np.asarray(u, float)[:, : x.shape[1]]], axis=-1)
        n_layers = len(self.input_hidden)
        feats = [
            layers.mlp(self.store, "in", ad.const(x[:, t]), n_layers, self.input_nl, self.input_nl)
            for t in range(x.shape[1])
        ]
        left = layers.lstm_run(self.store, "rnn.fwd", feats, self.rnn_dim) if self.uses_left else None
        right = layers.lstm_run(self.store, "rnn.bwd", feats, self.rnn_dim, reverse=True) if self.uses_right else None
        return EncoderState(left, right)

    def _head(self, prefix: str, h: Node) -> tuple[Node, Node]:
        mu = layers.linear(self.store, f"{prefix}.mu", h)
        var = ad.softplus(layers.linear(self.store, f"{prefix}.var", h))
        return mu, var

    def combine_mf(self, h_left: Node, h_right: Node | None = None) -> tuple[Node, Node]:
        if self.structured:
            raise ContractError(f"combine_mf is not defined for {self.variant}")
        mu_l, var_l = self._head("head.l", h_left)
        if self.variant == "MF-L":
            return mu_l, var_l
        if h_right is None:
            raise ContractError("MF-LR needs both encoder directions")
        mu_r, var_r = self._head("head.r", h_right)
        return combine_gaussians(mu_l, var_l, mu_r, var_r)

    def combine_st(self, z_prev, h_left: Node | None = None, h_right: Node | None = None) -> tuple[Node, Node]:
        if not self.structured:
            raise ContractError(f"combine_st is not defined for {self.variant}")
        if self.uses_left and h_left is None or self.uses_right and h_right is None:
            raise ContractError(f"{self.variant} combiner is missing a required encoder state")
        parts = [ad.tanh(layers.linear(self.store, "comb.z", ad.as_node(z_prev)))]
        if self.uses_left:
            parts.append(h_left)
        if self.uses_right:
            parts.append(h_right)
        h = parts[0]
        for p in parts[1:]:
            h = ad.add(h, p)
        return self._head("head", ad.scale(h, 1.0 / len(parts)))

    def infer_path(
        self,
        x: np.ndarray,
        u: np.ndarray | None = None,
        rng: np.random.Generator | None = None,
        sample: bool = True,
        eps: np.ndarray | None = None,
    ) -> PosteriorPath:
        """Left-to-right sweep returning graph nodes.

        Noise ``eps`` (``[T, B, d]``) is drawn from ``rng`` in a single call
        when sampling and not supplied, so a fixed seed gives common random
        numbers across repeated evaluations.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
            u = None if u is None else np.asarray(u, float)[None]
        B, T = x.shape[:2]
        enc = self.encode(x, u)
        if sample and eps is None:
            if rng is None:
                raise ContractError("sampling requires an rng or explicit eps")
            eps = rng.standard_normal((T, B, self.latent_dim))
        z_prev = ad.const(np.zeros((B, self.latent_dim)))
        means, variances, zs = [], [], []
        for t in range(T):
            hl = enc.h_left[t] if enc.h_left is not None else None
            hr = enc.h_right[t] if enc.h_right is not None else None
            if self.structured:
                mu, var = self.combine_st(z_prev, hl, hr)
            else:
                mu, var = self.combine_mf(hl, hr)
            z = ad.add(mu, ad.mul(ad.sqrt(var), ad.const(eps[t]))) if sample else mu
            means.append(mu)
            variances.append(var)
            zs.append(z)
            z_prev = z
        return PosteriorPath(means, variances, zs)

    def infer(self, x, u=None, rng=None, sample: bool = True, eps=None) -> tuple[GaussianSeq, np.ndarray]:
        path = self.infer_path(x, u, rng, sample, eps)
        return path.gaussian(), path.z_array()


def combine_gaussians(mu_a, var_a, mu_b, var_b) -> tuple[Node, Node]:
    """Product of two diagonal Gaussian messages (precision-weighted mean)."""
    total = ad.add(var_a, var_b)
    mu = ad.div(ad.add(ad.mul(mu_b, var_a), ad.mul(mu_a, var_b)), total)
    var = ad.div(ad.mul(var_a, var_b), total)
    return mu, var
