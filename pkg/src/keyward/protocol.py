"""Collaborative training through a simulated parameter server.

Participants take turns in round-robin order. A turn downloads a fraction of
the shared parameters, (for attackers) trains a generator and adds its
samples as a placeholder class, trains locally for a number of epochs, and
uploads a fraction of the parameter change made during the turn.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import adversary as adv_mod
from . import nn
from .adversary import AdversaryState
from .data import Dataset
from .errors import ContractError, FrameworkSetupError, ParameterError
from .keys import ClassKey
from .model import (
    KeyProtectedClassifier,
    VanillaClassifier,
    cross_entropy_loss,
    key_regression_loss,
    keyed_accuracy,
    vanilla_accuracy,
)

# seed offset for the coordinate-selection stream, kept apart from training streams
SELECTION_STREAM = 10_000


@dataclass
class FrameworkConfig:
    theta_d: float = 1.0
    theta_u: float = 1.0
    n_epochs: int = 50
    schedule: str = "round_robin"
    d_key: int = 128
    fixed_layer: bool = False
    seed: int = 0
    local_epochs_per_turn: int = 1
    lr: float = 0.01
    lam: float = 1e-4
    batch_size: int = 32

    def __post_init__(self):
        for name in ("theta_d", "theta_u"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ParameterError(f"{name} must lie in [0, 1], got {v}")
        if self.schedule != "round_robin":
            raise ParameterError(f"unsupported schedule {self.schedule!r}")
        if self.lr <= 0 or self.lam < 0:
            raise ParameterError("lr must be positive and lam non-negative")
        if self.n_epochs < 0 or self.local_epochs_per_turn < 1 or self.batch_size < 1:
            raise ParameterError("epoch and batch counts must be positive")


@dataclass
class ParamServerState:
    params: np.ndarray
    frozen_digest: str
    architecture: tuple
    version: int = 0


@dataclass
class Participant:
    id: str
    local_data: Dataset
    local_keys: list[ClassKey]
    local_model: KeyProtectedClassifier | VanillaClassifier
    role: str = "honest"
    attacker_state: AdversaryState | None = None
    params_at_turn_start: np.ndarray | None = None
    trained_this_turn: bool = False

    def __post_init__(self):
        if self.role not in ("honest", "attacker"):
            raise ParameterError(f"unknown role {self.role!r}")
        if self.role == "honest" and self.attacker_state is not None:
            raise ParameterError("honest participants carry no attacker state")
        if self.role == "attacker" and self.attacker_state is None:
            raise ParameterError("attackers need an attacker state")

    @property
    def net(self) -> nn.Net:
        return self.local_model.net

    @property
    def real_classes(self) -> list:
        return self.local_data.classes


@dataclass
class TurnMetrics:
    epoch: int
    participant_id: str
    role: str
    local_loss: float
    local_acc: float
    gen_loss: float | None = None
    mpa: float | None = None


@dataclass
class RunLog:
    turns: list[TurnMetrics] = field(default_factory=list)
    mpa: list[float] = field(default_factory=list)
    published_keys: list[ClassKey] = field(default_factory=list)

    def rows(self):
        for t in self.turns:
            yield {
                "epoch": t.epoch,
                "participant_id": t.participant_id,
                "role": t.role,
                "local_loss": f"{t.local_loss:.9g}",
                "local_acc": f"{t.local_acc:.6f}",
                "mpa": "" if t.mpa is None else f"{t.mpa:.6f}",
                "gen_loss": "" if t.gen_loss is None else f"{t.gen_loss:.9g}",
            }

    def to_csv(self, path) -> None:
        cols = ["epoch", "participant_id", "role", "local_loss", "local_acc", "mpa", "gen_loss"]
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=cols)
            w.writeheader()
            w.writerows(self.rows())


# ---------------------------------------------------------------------------
# server


def init_server(participants: list[Participant]) -> ParamServerState:
    """Seed the server from the first participant after checking everyone is compatible."""
    if not participants:
        raise FrameworkSetupError("no participants")
    first = participants[0].net
    for p in participants:
        if p.net.architecture() != first.architecture():
            raise FrameworkSetupError(f"participant {p.id!r} has a different architecture")
        if p.net.frozen_digest() != first.frozen_digest():
            raise FrameworkSetupError(f"participant {p.id!r} has a different fixed layer")
        if p.role == "honest" and len(p.local_data) == 0:
            raise FrameworkSetupError(f"participant {p.id!r} has no training data")
    ids = [p.id for p in participants]
    if len(set(ids)) != len(ids):
        raise FrameworkSetupError("participant ids must be unique")
    return ParamServerState(first.get_params(), first.frozen_digest(), first.architecture())


def _select(n: int, theta: float, rng: np.random.Generator):
    k = math.ceil(round(theta * n, 9))
    if k >= n:
        return slice(None)
    return np.sort(rng.choice(n, size=k, replace=False))


def download(ps: ParamServerState, p: Participant, theta_d: float, rng: np.random.Generator) -> None:
    """Overwrite ceil(theta_d * L) random local coordinates with the server's values."""
    local = p.net.get_params()
    if local.shape != ps.params.shape:
        raise FrameworkSetupError(f"{p.id!r} holds {local.size} parameters, server {ps.params.size}")
    idx = _select(local.size, theta_d, rng)
    local[idx] = ps.params[idx]
    p.net.set_params(local)
    p.params_at_turn_start = local.copy()
    p.trained_this_turn = False


def upload(ps: ParamServerState, p: Participant, theta_u: float, rng: np.random.Generator) -> None:
    """Add ceil(theta_u * L) random coordinates of the turn's parameter change to the server."""
    if p.params_at_turn_start is None or not p.trained_this_turn:
        raise ContractError(f"{p.id!r} must download and train before uploading")
    local = p.net.params
    start = p.params_at_turn_start
    if local.shape != ps.params.shape:
        raise FrameworkSetupError(f"{p.id!r} holds {local.size} parameters, server {ps.params.size}")
    idx = _select(local.size, theta_u, rng)
    cur, new, old = ps.params[idx], local[idx], start[idx]
    # cur + (new - old) computed exactly when the server copy is unchanged since download
    updated = np.where(cur == old, new, cur + (new - old))
    if not np.all(np.isfinite(updated)):
        raise FloatingPointError(f"upload from {p.id!r} would put non-finite values on the server")
    ps.params[idx] = updated
    ps.version += 1
    p.params_at_turn_start = None
    p.trained_this_turn = False


# ---------------------------------------------------------------------------
# local training


def batch_loss(p: Participant, X, y, lam: float = 0.0):
    model = p.local_model
    if isinstance(model, KeyProtectedClassifier):
        return key_regression_loss(model, X, y, p.local_keys, lam, owner=p.id)
    return cross_entropy_loss(model, X, y, lam)


def local_train(p: Participant, data: Dataset, cfg: FrameworkConfig, rng: np.random.Generator) -> float:
    """``cfg.local_epochs_per_turn`` epochs of minibatch SGD; returns mean per-sample loss.

    The regularizer enters as weight decay in the SGD step rather than as a loss term.
    """
    total, count = 0.0, 0
    for _ in range(cfg.local_epochs_per_turn):
        order = rng.permutation(len(data))
        for s in range(0, len(order), cfg.batch_size):
            b = order[s : s + cfg.batch_size]
            loss, grads = batch_loss(p, data.samples[b], data.labels[b])
            nn.step(p.net, grads, cfg.lr, cfg.lam)
            total += loss
            count += len(b)
    p.trained_this_turn = True
    return total / max(count, 1)


def local_accuracy(p: Participant) -> float:
    model, d = p.local_model, p.local_data
    if isinstance(model, KeyProtectedClassifier):
        return keyed_accuracy(model, d.samples, d.labels, p.local_keys)
    return vanilla_accuracy(model, d.samples, d.labels, allowed=p.real_classes)


def merge(a: Dataset, b: Dataset) -> Dataset:
    return Dataset(np.concatenate([a.samples, b.samples]), np.concatenate([a.labels, b.labels]), a.split)


def run_turn(ps: ParamServerState, p: Participant, cfg: FrameworkConfig, rng: np.random.Generator,
             select_rng: np.random.Generator, epoch: int = 0) -> TurnMetrics:
    if p.net.frozen_digest() != ps.frozen_digest:
        raise FrameworkSetupError(f"{p.id!r} fixed layer drifted from the server's")
    download(ps, p, cfg.theta_d, select_rng)
    data, gen_loss = p.local_data, None
    if p.role == "attacker":
        adv = p.attacker_state
        gen_loss = adv_mod.train_generator(adv, p.local_model)
        data = merge(data, adv_mod.synthesize(adv, adv.m_samples))
    loss = local_train(p, data, cfg, rng)
    upload(ps, p, cfg.theta_u, select_rng)
    return TurnMetrics(epoch, p.id, p.role, loss, local_accuracy(p), gen_loss)


def participant_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def evaluation_keys(participants: list[Participant]) -> list[ClassKey]:
    """Keys of real classes, as published after training (placeholder classes excluded)."""
    out = []
    for p in participants:
        real = set(p.real_classes)
        out += [k for k in p.local_keys if k.class_label in real]
    return out


def mean_participant_accuracy(participants, test: Dataset, keys=None) -> float:
    classes = sorted({c for p in participants for c in p.real_classes})
    keep = np.isin(test.labels, classes)
    X, y = test.samples[keep], test.labels[keep]
    keys = evaluation_keys(participants) if keys is None else keys
    accs = []
    for p in participants:
        if isinstance(p.local_model, KeyProtectedClassifier):
            accs.append(keyed_accuracy(p.local_model, X, y, keys))
        else:
            accs.append(vanilla_accuracy(p.local_model, X, y, allowed=classes))
    return float(np.mean(accs))


def run_training(participants: list[Participant], cfg: FrameworkConfig, test: Dataset | None = None,
                 ps: ParamServerState | None = None, on_epoch=None, publish_keys: bool = True) -> RunLog:
    """Round-robin collaborative training for ``cfg.n_epochs`` rounds.

    ``on_epoch(epoch, participants, log)`` is called after each round.
    """
    ps = init_server(participants) if ps is None else ps
    rngs = [participant_rng(cfg.seed, i) for i in range(len(participants))]
    select_rng = participant_rng(cfg.seed, SELECTION_STREAM)
    log = RunLog()
    for epoch in range(1, cfg.n_epochs + 1):
        turns = [run_turn(ps, p, cfg, r, select_rng, epoch) for p, r in zip(participants, rngs)]
        if test is not None:
            mpa = mean_participant_accuracy(participants, test)
            log.mpa.append(mpa)
            for t in turns:
                t.mpa = mpa
        log.turns += turns
        if on_epoch is not None:
            on_epoch(epoch, participants, log)
    if publish_keys:
        log.published_keys = evaluation_keys(participants)
    log.server = ps
    return log


def train_centralized(model, data: Dataset, keys: list[ClassKey], owner: str, cfg: FrameworkConfig,
                      rng: np.random.Generator | None = None) -> Participant:
    """Plain local SGD over ``cfg.n_epochs`` epochs, using the same stream as participant 0."""
    p = Participant(owner, data, keys, model)
    rng = participant_rng(cfg.seed, 0) if rng is None else rng
    for _ in range(cfg.n_epochs):
        local_train(p, data, cfg, rng)
    return p
