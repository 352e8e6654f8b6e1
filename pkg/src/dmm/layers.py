"""Linear, MLP and LSTM building blocks over a :class:`ParamStore`."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ParamStore

ACTIVATIONS = {
    "relu": ad.relu,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "softplus": ad.softplus,
    "identity": lambda x: x,
}


def activation(name: str):
    try:
        return ACTIVATIONS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown nonlinearity {name!r}; expected one of {sorted(ACTIVATIONS)}") from None


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def add_linear(store: ParamStore, name: str, fan_in: int, fan_out: int, rng, trainable=True) -> None:
    store.add(f"{name}.W", glorot(rng, fan_in, fan_out), trainable)
    store.add(f"{name}.b", np.zeros(fan_out), trainable)


def linear(store: ParamStore, name: str, x: Node) -> Node:
    return ad.add(ad.matmul(x, store[f"{name}.W"]), store[f"{name}.b"])


def add_mlp(store: ParamStore, name: str, sizes: Sequence[int], rng, trainable=True) -> None:
    """Register layers ``name.0 .. name.{k-1}`` mapping sizes[0] -> ... -> sizes[-1]."""
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        add_linear(store, f"{name}.{i}", a, b, rng, trainable)


def mlp(store: ParamStore, name: str, x: Node, n_layers: int, hidden: str, final: str) -> Node:
    """Apply ``n_layers`` affine maps; ``hidden`` between them, ``final`` at the end."""
    h = x
    act_h, act_f = activation(hidden), activation(final)
    for i in range(n_layers):
        h = linear(store, f"{name}.{i}", h)
        h = act_f(h) if i == n_layers - 1 else act_h(h)
    return h


def add_lstm(store: ParamStore, name: str, input_dim: int, hidden_dim: int, rng, trainable=True) -> None:
    # gate order in the packed weight: input, forget, cell, output
    store.add(f"{name}.W", glorot(rng, input_dim + hidden_dim, 4 * hidden_dim), trainable)
    store.add(f"{name}.b", np.zeros(4 * hidden_dim), trainable)


def lstm_step(store: ParamStore, name: str, x: Node, h: Node, c: Node) -> tuple[Node, Node]:
    H = h.shape[-1]
    pre = ad.add(ad.matmul(ad.concat([x, h]), store[f"{name}.W"]), store[f"{name}.b"])
    i = ad.sigmoid(ad.slice_last(pre, 0, H))
    f = ad.sigmoid(ad.slice_last(pre, H, 2 * H))
    g = ad.tanh(ad.slice_last(pre, 2 * H, 3 * H))
    o = ad.sigmoid(ad.slice_last(pre, 3 * H, 4 * H))
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_new = ad.mul(o, ad.tanh(c_new))
    return h_new, c_new


def lstm_run(store: ParamStore, name: str, inputs: Sequence[Node], hidden_dim: int, reverse: bool = False) -> list[Node]:
    """Run the cell over ``inputs`` (each ``[B, in]``) from a zero state.

    With ``reverse`` the sweep starts at the last element; the returned list
    is always indexed by the original time order.
    """
    if not inputs:
        raise ValueError("lstm_run: empty input sequence")
    batch = inputs[0].shape[0]
    h = ad.const(np.zeros((batch, hidden_dim)))
    c = ad.const(np.zeros((batch, hidden_dim)))
    order = range(len(inputs) - 1, -1, -1) if reverse else range(len(inputs))
    out: list[Node | None] = [None] * len(inputs)
    for t in order:
        h, c = lstm_step(store, name, inputs[t], h, c)
        out[t] = h
    return out
