"""Sequence batches, synthetic generators, missingness masks and dataset files."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class SchemaError(ValueError):
    pass


class FormatVersionError(SchemaError):
    pass


@dataclass
class SequenceBatch:
    """``N`` sequences padded to a common ``T``.

    ``mask`` marks observed entries (1) and missing ones (0).  Entries past a
    sequence's length are padding: mask 0 and never swept (see :meth:`groups`).
    """

    x: np.ndarray
    mask: np.ndarray
    u: np.ndarray | None = None
    dt: np.ndarray | None = None
    z_star: np.ndarray | None = None
    lengths: np.ndarray = field(default=None)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.x.ndim != 3:
            raise SchemaError(f"x must be [N, T, D], got shape {self.x.shape}")
        if self.mask.shape != self.x.shape:
            raise SchemaError(f"mask shape {self.mask.shape} differs from x shape {self.x.shape}")
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise SchemaError("mask must be binary")
        N, T = self.x.shape[:2]
        if self.lengths is None:
            self.lengths = np.full(N, T, dtype=int)
        self.lengths = np.asarray(self.lengths, dtype=int)
        for name in ("u", "z_star"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr, dtype=np.float64)
                if arr.shape[:2] != (N, T):
                    raise SchemaError(f"{name} shape {arr.shape} inconsistent with x shape {self.x.shape}")
                setattr(self, name, arr)
        if self.dt is not None:
            self.dt = np.asarray(self.dt, dtype=np.float64)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def T(self) -> int:
        return self.x.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.x.shape[2]

    @property
    def action_dim(self) -> int:
        return 0 if self.u is None else self.u.shape[2]

    def observed_x(self) -> np.ndarray:
        """``x`` with every unobserved entry replaced by 0."""
        return np.where(self.mask > 0, self.x, 0.0)

    def take(self, idx) -> "SequenceBatch":
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return SequenceBatch(
            self.x[idx], self.mask[idx], pick(self.u), pick(self.dt), pick(self.z_star), self.lengths[idx]
        )

    def truncate(self, T: int) -> "SequenceBatch":
        cut = lambda a: None if a is None else a[:, :T]  # noqa: E731
        return SequenceBatch(
            self.x[:, :T], self.mask[:, :T], cut(self.u), cut(self.dt), cut(self.z_star), np.minimum(self.lengths, T)
        )

    def groups(self):
        """Yield ``(indices, sub_batch)`` for each distinct length, shortest first."""
        for L in np.unique(self.lengths):
            idx = np.flatnonzero(self.lengths == L)
            yield idx, self.take(idx).truncate(int(L))

    def missing_rate(self) -> float:
        valid = np.arange(self.T)[None, :] < self.lengths[:, None]
        total = valid.sum() * self.obs_dim
        return float(1.0 - self.mask[valid].sum() / total) if total else 0.0


def concat_batches(batches: list[SequenceBatch]) -> SequenceBatch:
    T = max(b.T for b in batches)

    def pad(arrs):
        if any(a is None for a in arrs):
            return None
        out = []
        for a in arrs:
            width = [(0, 0)] * a.ndim
            width[1] = (0, T - a.shape[1])
            out.append(np.pad(a, width))
        return np.concatenate(out)

    return SequenceBatch(
        pad([b.x for b in batches]),
        pad([b.mask for b in batches]),
        pad([b.u for b in batches]),
        pad([b.dt for b in batches]),
        pad([b.z_star for b in batches]),
        np.concatenate([b.lengths for b in batches]),
    )


# ----------------------------------------------------------------------------
# generators


def _generate(model, N, T, seed, u=None) -> SequenceBatch:
    from .gssm import sample_sequence

    z, x = sample_sequence(model, T, np.random.default_rng(seed), n=N, u_seq=u)
    return SequenceBatch(x, np.ones_like(x), u=u, z_star=z)


def gen_linear_fig2(N: int = 5000, T: int = 25, seed: int = 0) -> SequenceBatch:
    """``z_t ~ N(z_{t-1} + 0.05, 10)``, ``x_t ~ N(0.5 z_t, 20)``, ``z_1 ~ N(0, 1)``."""
    from .gssm import LinearGSSM

    return _generate(LinearGSSM(), N, T, seed)


def gen_nonlinear_fig3(N: int = 5000, T: int = 25, alpha: float = 0.5, beta: float = -0.1, seed: int = 0) -> SequenceBatch:
    from .gssm import NonlinearGSSM2D

    return _generate(NonlinearGSSM2D(alpha=alpha, beta=beta), N, T, seed)


def toy_binary_model(D: int, latent_dim: int = 2, hidden: int = 16, seed: int = 0, sharpness: float = 4.0):
    """The randomly initialized DMM behind :func:`gen_toy_binary`.

    Glorot-initialized output weights give emission probabilities bunched
    around 1/2; ``sharpness`` scales the output layer so the observations
    carry a usable signal about the latents.
    """
    from .gssm import DMM

    model = DMM(latent_dim, D, emission_hidden=hidden, transition_hidden=hidden, seed=seed)
    model.store["emit.out.W"].value = model.store["emit.out.W"].value * sharpness
    return model


def gen_toy_binary(N: int, T: int, D: int, seed: int = 0, latent_dim: int = 2, hidden: int = 16) -> SequenceBatch:
    if D < 2:
        raise ValueError("toy binary data needs D >= 2")
    model = toy_binary_model(D, latent_dim, hidden, seed)
    return _generate(model, N, T, np.random.SeedSequence([seed, 1]))


def gen_actions(
    N: int,
    T: int,
    seed: int = 0,
    policy: str = "bernoulli",
    p: float = 0.5,
    action_dim: int = 8,
    x: np.ndarray | None = None,
    obs_index: int = 0,
    level: float = 0.5,
    drug: int = 0,
) -> np.ndarray:
    """Binary action sequences ``[N, T, action_dim]``.

    ``bernoulli`` draws every bit i.i.d. with probability ``p``.
    ``threshold`` needs observations ``x`` and switches bit ``drug`` on from
    the first step where ``x[..., obs_index]`` exceeds ``level``.
    """
    rng = np.random.default_rng(seed)
    if policy == "bernoulli":
        if not 0.0 <= p <= 1.0:
            raise ValueError("p must lie in [0, 1]")
        return (rng.uniform(size=(N, T, action_dim)) < p).astype(np.float64)
    if policy == "threshold":
        if x is None:
            raise ValueError("threshold policy needs observations x")
        u = np.zeros((N, T, action_dim))
        u[:, :, drug] = np.maximum.accumulate(x[:, :T, obs_index] > level, axis=1)
        return u
    raise ValueError(f"unknown action policy {policy!r}")


@dataclass
class ActionSystem:
    """Known-effect generator: drug ``drug`` lowers latent 0 by ``effect``.

    ``z_t = decay * z_{t-1} + drift - effect * u_{t-1}[drug] * e_0 + noise``;
    observation 0 is ``Bernoulli(sigmoid(gain * z_0 - offset))`` and the
    remaining observations load on the latents through a random matrix.
    """

    D: int = 6
    action_dim: int = 2
    latent_dim: int = 2
    effect: float = 1.0
    decay: float = 0.8
    drift: float = 0.4
    noise: float = 0.3
    gain: float = 3.0
    offset: float = 2.0
    drug: int = 0
    seed: int = 0

    def loadings(self) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 7])
        W = rng.normal(0.0, 1.5, size=(self.latent_dim, self.D))
        W[:, 0] = 0.0
        W[0, 0] = self.gain
        return W

    def step_latent(self, z, u_prev, rng):
        mean = self.decay * z
        mean[:, 0] += self.drift - self.effect * u_prev[:, self.drug]
        return mean + self.noise * rng.standard_normal(z.shape)

    def emit_probs(self, z):
        logits = z @ self.loadings()
        logits[:, 0] -= self.offset
        return 1.0 / (1.0 + np.exp(-logits))


def gen_action_system(
    N: int,
    T: int,
    seed: int = 0,
    system: ActionSystem | None = None,
    policy: str = "bernoulli",
    p: float = 0.5,
) -> SequenceBatch:
    """Sample the action-conditioned system; actions follow ``policy``.

    With ``threshold`` the drug bit switches on (and stays on) once the
    indicator observation fires, the remaining bits stay Bernoulli(``p``).
    """
    system = system or ActionSystem()
    rng = np.random.default_rng(seed)
    lat_rng, obs_rng, act_rng = rng.spawn(3)
    A, d = system.action_dim, system.latent_dim
    z = np.zeros((N, T, d))
    x = np.zeros((N, T, system.D))
    u = (act_rng.uniform(size=(N, T, A)) < p).astype(np.float64)
    z[:, 0] = lat_rng.standard_normal((N, d))
    for t in range(T):
        if t > 0:
            z[:, t] = system.step_latent(z[:, t - 1].copy(), u[:, t - 1], lat_rng)
        x[:, t] = (obs_rng.uniform(size=(N, system.D)) < system.emit_probs(z[:, t])).astype(np.float64)
        if policy == "threshold":
            fired = x[:, t, 0] > 0.5
            if t > 0:
                fired |= u[:, t - 1, system.drug] > 0.5
            u[:, t, system.drug] = fired
        elif policy != "bernoulli":
            raise ValueError(f"unknown action policy {policy!r}")
    return SequenceBatch(x, np.ones_like(x), u=u, z_star=z)


def apply_missingness(batch: SequenceBatch, rate: float, seed: int = 0, columns=None) -> SequenceBatch:
    """Drop entries i.i.d. with probability ``rate`` in the chosen columns.

    Dropped entries get mask 0 and their ``x`` value is zeroed.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    cols = np.arange(batch.obs_dim) if columns is None else np.asarray(columns, dtype=int)
    drop = np.zeros(batch.x.shape, dtype=bool)
    drop[..., cols] = rng.uniform(size=batch.x.shape[:2] + (len(cols),)) < rate
    mask = np.where(drop, 0.0, batch.mask)
    return replace(batch, x=np.where(mask > 0, batch.x, 0.0), mask=mask)


# ----------------------------------------------------------------------------
# dataset files


def to_document(batch: SequenceBatch) -> dict:
    seqs = []
    for i in range(batch.n):
        L = int(batch.lengths[i])
        entry = {"x": batch.x[i, :L].tolist()}
        if not (batch.mask[i, :L] == 1).all():
            entry["mask"] = batch.mask[i, :L].tolist()
        if batch.u is not None:
            entry["u"] = batch.u[i, :L].tolist()
        if batch.dt is not None:
            entry["dt"] = batch.dt[i, :L].tolist()
        if batch.z_star is not None:
            entry["z_star"] = batch.z_star[i, :L].tolist()
        seqs.append(entry)
    return {"format_version": FORMAT_VERSION, "obs_dim": batch.obs_dim, "action_dim": batch.action_dim, "sequences": seqs}


def save(batch: SequenceBatch, path) -> None:
    Path(path).write_text(json.dumps(to_document(batch)))


def _field(entry, i, name, rows, width=None):
    try:
        arr = np.asarray(entry[name], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"sequence {i}: field {name!r} is not a numeric array ({exc})") from None
    if arr.ndim != 2 or (rows is not None and arr.shape[0] != rows) or (width is not None and arr.shape[1] != width):
        raise SchemaError(f"sequence {i}: field {name!r} has shape {arr.shape}, expected [{rows}, {width}]")
    return arr


def from_document(doc: dict) -> SequenceBatch:
    if not isinstance(doc, dict):
        raise SchemaError("dataset document must be a JSON object")
    if doc.get("format_version") != FORMAT_VERSION:
        raise FormatVersionError(
            f"unsupported dataset format_version {doc.get('format_version')!r}; expected {FORMAT_VERSION}"
        )
    for key in ("obs_dim", "sequences"):
        if key not in doc:
            raise SchemaError(f"missing top-level field {key!r}")
    D = int(doc["obs_dim"])
    A = int(doc.get("action_dim", 0))
    seqs = doc["sequences"]
    if not seqs:
        raise SchemaError("dataset has no sequences")
    parsed = []
    for i, entry in enumerate(seqs):
        if not isinstance(entry, dict) or "x" not in entry:
            raise SchemaError(f"sequence {i}: missing required field 'x'")
        x = _field(entry, i, "x", None, D)
        L = x.shape[0]
        if L == 0:
            raise SchemaError(f"sequence {i}: field 'x' is empty")
        item = {"x": x, "mask": _field(entry, i, "mask", L, D) if "mask" in entry else np.ones_like(x)}
        if not np.isin(item["mask"], (0.0, 1.0)).all():
            raise SchemaError(f"sequence {i}: field 'mask' must be binary")
        if A:
            if "u" not in entry:
                raise SchemaError(f"sequence {i}: missing required field 'u' (action_dim={A})")
            item["u"] = _field(entry, i, "u", L, A)
        if "z_star" in entry:
            item["z_star"] = _field(entry, i, "z_star", L, None)
        if "dt" in entry:
            dt = np.asarray(entry["dt"], dtype=np.float64)
            if dt.shape != (L,):
                raise SchemaError(f"sequence {i}: field 'dt' has shape {dt.shape}, expected [{L}]")
            item["dt"] = dt
        parsed.append(item)

    N, T = len(parsed), max(p["x"].shape[0] for p in parsed)
    lengths = np.array([p["x"].shape[0] for p in parsed])

    def stack(name, width):
        if not all(name in p for p in parsed):
            if any(name in p for p in parsed):
                missing = next(i for i, p in enumerate(parsed) if name not in p)
                raise SchemaError(f"sequence {missing}: missing field {name!r} present in other sequences")
            return None
        out = np.zeros((N, T) + (() if width is None else (width,)))
        for i, p in enumerate(parsed):
            out[i, : lengths[i]] = p[name]
        return out

    z_dim = parsed[0]["z_star"].shape[1] if "z_star" in parsed[0] else None
    if z_dim is not None and any("z_star" in p and p["z_star"].shape[1] != z_dim for p in parsed):
        bad = next(i for i, p in enumerate(parsed) if "z_star" in p and p["z_star"].shape[1] != z_dim)
        raise SchemaError(f"sequence {bad}: field 'z_star' width differs from sequence 0")
    return SequenceBatch(
        stack("x", D),
        stack("mask", D),
        stack("u", A) if A else None,
        stack("dt", None),
        stack("z_star", z_dim),
        lengths,
    )


def load(path) -> SequenceBatch:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return from_document(doc)


def split(batch: SequenceBatch, fractions, seed: int = 0) -> list[SequenceBatch]:
    """Shuffle and split into consecutive parts with the given fractions."""
    perm = np.random.default_rng(seed).permutation(batch.n)
    cuts = np.round(np.cumsum(fractions)[:-1] * batch.n).astype(int)
    return [batch.take(np.sort(p)) for p in np.split(perm, cuts)]
