"""GAN-style reconstruction attacks run by a participant against the shared model.

The attacker trains a local generator using its current copy of the shared
model as a frozen discriminator, then feeds generator samples back into its
local training under a placeholder class ``c_fake``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import Dataset
from .errors import ParameterError, ShapeError
from .keys import ClassKey
from .model import KeyProtectedClassifier, VanillaClassifier, _log_softmax

MODES = ("exact_key", "delta_key", "random_key", "vanilla")


@dataclass
class AdversaryState:
    generator: nn.Net
    attack_mode: str
    c_fake: int
    psi_fake: ClassKey | None = None  # labels synthesized samples (keyed modes)
    psi_attack: ClassKey | None = None  # drives generator training (keyed modes)
    c_attack: int | None = None  # vanilla-mode target class
    delta: float | None = None
    m_samples: int = 100
    gen_steps_per_turn: int = 20
    gen_batch: int = 32
    gen_lr: float = 0.01
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def __post_init__(self):
        if self.attack_mode not in MODES:
            raise ParameterError(f"unknown attack mode {self.attack_mode!r}")
        keyed = self.attack_mode != "vanilla"
        if keyed and (self.psi_attack is None or self.psi_fake is None):
            raise ParameterError("keyed attacks need psi_attack and psi_fake")
        if keyed and self.psi_attack.class_label == self.psi_fake.class_label:
            raise ParameterError("psi_attack and psi_fake must label different classes")
        if not keyed and self.c_attack is None:
            raise ParameterError("vanilla attack needs c_attack")
        if not keyed and self.c_attack == self.c_fake:
            raise ParameterError("c_attack and c_fake must differ")

    @property
    def noise_dim(self) -> int:
        return self.generator.in_dim


def generator_specs(noise_dim: int, data_dim: int, hidden=(64,), slope: float = 0.2) -> list:
    specs, prev = [], noise_dim
    for h in hidden:
        specs += [nn.dense(prev, h), nn.leaky_relu(h, slope)]
        prev = h
    specs.append(nn.dense(prev, data_dim))
    return specs


def build_generator(noise_dim: int, data_dim: int, seed: int, hidden=(64,)) -> nn.Net:
    return nn.init_net(generator_specs(noise_dim, data_dim, hidden), seed)


def sample_noise(rng, n, noise_dim):
    return rng.uniform(-1.0, 1.0, size=(n, noise_dim))


def _check_dims(gen: nn.Net, clf_net: nn.Net):
    if gen.out_dim != clf_net.in_dim:
        raise ShapeError(f"generator emits {gen.out_dim} dims, classifier expects {clf_net.in_dim}")


def _keyed_loss(adv, clf, z):
    x, tape_g = nn.forward(adv.generator, z)
    emb, tape_c = nn.forward(clf.net, x)
    loss = -float(np.mean(emb @ adv.psi_attack.vec))
    return loss, x, tape_g, tape_c


def keyed_generator_loss_and_grad(adv: AdversaryState, clf: KeyProtectedClassifier, z):
    """L_G = -mean_b <phi(G(z_b)), psi_attack> and its gradient w.r.t. the generator."""
    if adv.psi_attack.d_key != clf.d_key:
        raise ShapeError(f"attack key width {adv.psi_attack.d_key} != embedding width {clf.d_key}")
    loss, x, tape_g, tape_c = _keyed_loss(adv, clf, z)
    g_emb = np.broadcast_to(-adv.psi_attack.vec / len(z), (len(z), clf.d_key))
    _, gx = nn.backward(clf.net, tape_c, g_emb)
    grads, _ = nn.backward(adv.generator, tape_g, gx)
    return loss, grads


def vanilla_generator_loss_and_grad(adv: AdversaryState, clf: VanillaClassifier, z, c_attack):
    target = clf.class_index([c_attack])[0]
    x, tape_g = nn.forward(adv.generator, z)
    logits, tape_c = nn.forward(clf.net, x)
    logp = _log_softmax(logits)
    loss = -float(np.mean(logp[:, target]))
    g = np.exp(logp)
    g[:, target] -= 1.0
    _, gx = nn.backward(clf.net, tape_c, g / len(z))
    grads, _ = nn.backward(adv.generator, tape_g, gx)
    return loss, grads


def train_generator_keyed(adv: AdversaryState, clf: KeyProtectedClassifier, steps: int, batch: int,
                          lr: float, rng: np.random.Generator) -> float:
    """SGD on the generator towards samples whose embedding aligns with ``psi_attack``.

    The classifier is only read. Returns the loss on a fresh noise batch after the updates.
    """
    _check_dims(adv.generator, clf.net)
    for _ in range(steps):
        z = sample_noise(rng, batch, adv.noise_dim)
        _, grads = keyed_generator_loss_and_grad(adv, clf, z)
        nn.step(adv.generator, grads, lr)
    z = sample_noise(rng, batch, adv.noise_dim)
    return _keyed_loss(adv, clf, z)[0]


def train_generator_vanilla(adv: AdversaryState, clf: VanillaClassifier, c_attack, steps: int, batch: int,
                            lr: float, rng: np.random.Generator) -> float:
    """SGD on the generator towards samples the classifier labels ``c_attack``."""
    _check_dims(adv.generator, clf.net)
    clf.class_index([c_attack])  # unknown class -> ParameterError before any work
    for _ in range(steps):
        z = sample_noise(rng, batch, adv.noise_dim)
        _, grads = vanilla_generator_loss_and_grad(adv, clf, z, c_attack)
        nn.step(adv.generator, grads, lr)
    z = sample_noise(rng, batch, adv.noise_dim)
    return vanilla_generator_loss_and_grad(adv, clf, z, c_attack)[0]


def train_generator(adv: AdversaryState, clf, rng=None) -> float:
    rng = adv.rng if rng is None else rng
    if adv.attack_mode == "vanilla":
        return train_generator_vanilla(adv, clf, adv.c_attack, adv.gen_steps_per_turn, adv.gen_batch,
                                       adv.gen_lr, rng)
    return train_generator_keyed(adv, clf, adv.gen_steps_per_turn, adv.gen_batch, adv.gen_lr, rng)


def synthesize(adv: AdversaryState, m: int, rng=None) -> Dataset:
    """``m`` generator samples, all labelled ``c_fake``."""
    if m < 0:
        raise ParameterError(f"m must be non-negative, got {m}")
    rng = adv.rng if rng is None else rng
    if m == 0:
        x = np.zeros((0, adv.generator.out_dim))
    else:
        x = adv.generator(sample_noise(rng, m, adv.noise_dim))
    return Dataset(x, np.full(m, adv.c_fake, dtype=np.int64), "fake")
