"""Minibatch training of the generative model and inference network.

Each update samples one posterior path per sequence, forms the annealed
bound, and takes an Adam ascent step on every unfrozen parameter group.
After each epoch the true bound (anneal weight 1) is measured on the
validation set and the best parameters seen so far are retained.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore
from .data import SequenceBatch
from .elbo import anneal_weight, elbo
from .gssm import GenerativeModel, model_from_config
from .infnet import InferenceNetwork

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingAborted(RuntimeError):
    def __init__(self, update: int, reason: str, log: "TrainLog"):
        super().__init__(f"training aborted at update {update}: {reason}")
        self.update = update
        self.log = log


@dataclass
class TrainConfig:
    batch_size: int = 20
    epochs: int = 100
    lr: float = 0.0008
    anneal_horizon: int = 5000
    n_samples: int = 1
    seed: int = 0
    patience: int = 20
    train_model: bool = True
    train_net: bool = True
    max_updates: int | None = None
    valid_samples: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass
class TrainLog:
    updates: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0

    def write_csv(self, path) -> None:
        valid_at = {e["last_update"]: e["valid_bound"] for e in self.epochs}
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["update", "epoch", "objective", "recon", "kl", "anneal", "valid_bound"])
            for r in self.updates:
                vb = valid_at.get(r["update"])
                w.writerow(
                    [r["update"], r["epoch"], repr(r["objective"]), repr(r["recon"]), repr(r["kl"]), repr(r["anneal"]),
                     "" if vb is None else repr(vb)]
                )


def _snapshot(store: ParamStore) -> dict[str, np.ndarray]:
    return store.values()


class Trainer:
    """Stateful training loop; :meth:`save` / :meth:`load` capture everything
    needed to resume bit-for-bit (parameters, Adam moments, epoch position,
    best-so-far parameters and rng stream states)."""

    def __init__(
        self,
        model: GenerativeModel,
        net: InferenceNetwork,
        train_set: SequenceBatch,
        valid_set: SequenceBatch | None,
        cfg: TrainConfig,
    ):
        if train_set.n == 0:
            raise ValueError("empty training set")
        if model.latent_dim != net.latent_dim or model.obs_dim != train_set.obs_dim:
            raise ValueError(
                f"dimension mismatch: model latent {model.latent_dim} / obs {model.obs_dim}, "
                f"network latent {net.latent_dim}, data obs {train_set.obs_dim}"
            )
        self.model, self.net = model, net
        self.train_set, self.valid_set = train_set, valid_set
        self.cfg = cfg
        shuffle, noise, init = np.random.SeedSequence(cfg.seed).spawn(3)
        self.streams = {
            "shuffle": np.random.default_rng(shuffle),
            "noise": np.random.default_rng(noise),
            "init": np.random.default_rng(init),
        }
        self.update = 0
        self.epoch = 0
        self.perm: np.ndarray | None = None
        self.pos = 0
        self.best_valid = -np.inf
        self.best_params: tuple[dict, dict] | None = None
        self.since_best = 0
        self.stopped = False
        self.log = TrainLog()

    # ------------------------------------------------------------------
    def _leaves(self):
        leaves = {}
        if self.cfg.train_model:
            leaves.update({("model", k): v for k, v in self.model.store.trainable_leaves().items()})
        if self.cfg.train_net:
            leaves.update({("net", k): v for k, v in self.net.store.trainable_leaves().items()})
        return leaves

    def valid_bound(self) -> float:
        """Mean per-sequence bound on the validation set at anneal weight 1.

        Uses the same noise on every call so epochs are compared on common
        random numbers.
        """
        rng = np.random.default_rng([self.cfg.seed, 99])
        e = elbo(self.model, self.net, self.valid_set, 1.0, self.cfg.valid_samples, rng)
        return e.value

    def step(self) -> dict:
        n = self.train_set.n
        if self.perm is None or self.pos >= n:
            self.perm = self.streams["shuffle"].permutation(n)
            self.pos = 0
        idx = self.perm[self.pos : self.pos + self.cfg.batch_size]
        batch = self.train_set.take(idx)
        w = anneal_weight(self.update, self.cfg.anneal_horizon)
        before = (_snapshot(self.model.store), _snapshot(self.net.store))
        try:
            e = elbo(self.model, self.net, batch, w, self.cfg.n_samples, self.streams["noise"])
            leaves = self._leaves()
            grads = ad.gradient(e.objective, leaves) if leaves else {}
            if not all(np.isfinite(g).all() for g in grads.values()):
                raise ad.NonFiniteError("non-finite gradient")
        except ad.NonFiniteError as exc:
            self.model.store.set_values(before[0])
            self.net.store.set_values(before[1])
            raise TrainingAborted(self.update, str(exc), self.log) from exc
        for owner, store in (("model", self.model.store), ("net", self.net.store)):
            part = {k: g for (o, k), g in grads.items() if o == owner}
            if part:
                ad.adam_step(store, part, lr=self.cfg.lr, ascend=True)
        record = {
            "update": self.update,
            "epoch": self.epoch,
            "objective": e.value,
            "recon": e.reconstruction,
            "kl": e.kl_t1 + e.kl_rest,
            "anneal": w,
        }
        self.log.updates.append(record)
        self.update += 1
        self.pos += len(idx)
        if self.pos >= n:
            self._end_epoch()
        return record

    def _end_epoch(self) -> None:
        entry = {"epoch": self.epoch, "last_update": self.update - 1}
        if self.valid_set is not None:
            vb = self.valid_bound()
            entry["valid_bound"] = vb
            if vb > self.best_valid:
                self.best_valid = vb
                self.best_params = (_snapshot(self.model.store), _snapshot(self.net.store))
                self.since_best = 0
            else:
                self.since_best += 1
                if self.since_best >= self.cfg.patience:
                    self.stopped = True
            entry["best_valid"] = self.best_valid
            log.info("epoch %d update %d valid bound %.4f", self.epoch, self.update, vb)
        else:
            entry["valid_bound"] = None
        self.log.epochs.append(entry)
        self.epoch += 1

    def done(self) -> bool:
        if self.stopped or self.epoch >= self.cfg.epochs:
            return True
        return self.cfg.max_updates is not None and self.update >= self.cfg.max_updates

    def run(self, max_steps: int | None = None):
        start = time.perf_counter()
        steps = 0
        while not self.done() and (max_steps is None or steps < max_steps):
            self.step()
            steps += 1
        self.log.wall_clock += time.perf_counter() - start
        return self

    def finish(self) -> None:
        """Close a partial epoch (so its parameters are validated) and restore the best parameters."""
        if self.pos and self.pos < self.train_set.n and self.valid_set is not None:
            self.pos = self.train_set.n
            self._end_epoch()
        if self.best_params is not None:
            self.model.store.set_values(self.best_params[0])
            self.net.store.set_values(self.best_params[1])

    # ------------------------------------------------------------------
    def state_dict(self) -> dict:
        best = None
        if self.best_params is not None:
            best = [{k: v.tolist() for k, v in p.items()} for p in self.best_params]
        return {
            "format_version": CHECKPOINT_VERSION,
            "model": {"config": self.model.config(), "params": self.model.store.to_dict()},
            "net": {"config": self.net.config(), "params": self.net.store.to_dict()},
            "train_config": asdict(self.cfg),
            "update": self.update,
            "epoch": self.epoch,
            "pos": self.pos,
            "perm": None if self.perm is None else self.perm.tolist(),
            "best_valid": None if not np.isfinite(self.best_valid) else self.best_valid,
            "best_params": best,
            "since_best": self.since_best,
            "stopped": self.stopped,
            "rng": {k: g.bit_generator.state for k, g in self.streams.items()},
            "log": {"updates": self.log.updates, "epochs": self.log.epochs, "wall_clock": self.log.wall_clock},
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.state_dict()))

    @classmethod
    def load(cls, path, train_set: SequenceBatch, valid_set: SequenceBatch | None, **overrides) -> "Trainer":
        doc = read_checkpoint(path)
        model, net = models_from_checkpoint(doc)
        cfg_dict = dict(doc["train_config"])
        cfg_dict.update(overrides)
        tr = cls(model, net, train_set, valid_set, TrainConfig(**cfg_dict))
        tr.update, tr.epoch, tr.pos = doc["update"], doc["epoch"], doc["pos"]
        tr.perm = None if doc["perm"] is None else np.array(doc["perm"], dtype=np.int64)
        tr.best_valid = -np.inf if doc["best_valid"] is None else doc["best_valid"]
        if doc["best_params"] is not None:
            tr.best_params = tuple({k: np.array(v) for k, v in p.items()} for p in doc["best_params"])
        tr.since_best = doc["since_best"]
        tr.stopped = doc["stopped"]
        for k, state in doc["rng"].items():
            tr.streams[k].bit_generator.state = state
        tr.log = TrainLog(doc["log"]["updates"], doc["log"]["epochs"], doc["log"]["wall_clock"])
        return tr


class CheckpointError(ValueError):
    pass


def read_checkpoint(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    if not isinstance(doc, dict) or doc.get("format_version") != CHECKPOINT_VERSION:
        version = doc.get("format_version") if isinstance(doc, dict) else None
        raise CheckpointError(f"{path}: unsupported checkpoint format_version {version!r}; expected {CHECKPOINT_VERSION}")
    for key in ("model", "net"):
        if key not in doc:
            raise CheckpointError(f"{path}: corrupt checkpoint, missing section {key!r}")
    return doc


def models_from_checkpoint(doc: dict) -> tuple[GenerativeModel, InferenceNetwork]:
    model = model_from_config(doc["model"]["config"])
    model.store = ParamStore.from_dict(doc["model"]["params"])
    net = InferenceNetwork.from_config(doc["net"]["config"])
    net.store = ParamStore.from_dict(doc["net"]["params"])
    return model, net


def load_models(path) -> tuple[GenerativeModel, InferenceNetwork]:
    return models_from_checkpoint(read_checkpoint(path))


def save_models(model: GenerativeModel, net: InferenceNetwork, path) -> None:
    """Write a checkpoint holding only the two parameter sets (no trainer state)."""
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "model": {"config": model.config(), "params": model.store.to_dict()},
        "net": {"config": net.config(), "params": net.store.to_dict()},
    }
    Path(path).write_text(json.dumps(doc))


def train(model, net, train_set, valid_set, cfg: TrainConfig):
    """Train to completion and return ``(model, net, TrainLog)`` with the best
    validation parameters restored."""
    tr = Trainer(model, net, train_set, valid_set, cfg)
    try:
        tr.run()
    except TrainingAborted:
        if tr.best_params is not None:
            model.store.set_values(tr.best_params[0])
            net.store.set_values(tr.best_params[1])
        raise
    tr.finish()
    return model, net, tr.log
