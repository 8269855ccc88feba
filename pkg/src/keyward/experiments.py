"""Experiment assembly: builds participants, keys and adversaries from an
:class:`ExperimentConfig` and runs each experiment end to end."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import adversary as A
from . import data as D
from . import keys as K
from . import model as M
from . import nn
from .errors import ConfigError, ParameterError
from .gradcheck import numerical_grad, rel_error
from .protocol import (
    FrameworkConfig,
    Participant,
    RunLog,
    evaluation_keys,
    mean_participant_accuracy,
    run_training,
    train_centralized,
)

log = logging.getLogger(__name__)

EXPERIMENTS = ("collab", "attack", "key-stats", "softmax-oracle", "shared-class", "grad-check", "loss-compare")
REGIMES = ("exact_key", "delta_key", "random_key", "vanilla")

# label offset for placeholder classes, far above any real label
FAKE_LABEL_BASE = 1000


@dataclass
class ExperimentConfig:
    experiment: str = "collab"
    dataset: str = "blobs"
    data_dir: str = "data/mnist"
    seed: int = 0
    seeds: list = field(default_factory=list)
    out_dir: str = ""
    # framework
    n_participants: int = 2
    d_key: int = 128
    fixed_layer: bool = False
    d_emb: int = 64
    hidden: list = field(default_factory=lambda: [64, 64])
    head_activation: str = ""
    theta_d: float = 1.0
    theta_u: float = 1.0
    lr: float = 0.01
    lam: float = 1e-4
    n_epochs: int = 50
    batch_size: int = 32
    local_epochs_per_turn: int = 1
    # blobs
    n_classes: int = 10
    per_class: int = 100
    data_dim: int = 32
    spread: float = 0.3
    center_scale: float = 1.0
    # attack
    attackers: list = field(default_factory=lambda: [1])
    regime: str = "exact_key"
    delta: float = 0.5
    deltas: list = field(default_factory=lambda: [0.1, 0.5, 1.0, 1.3])
    target_class: int = 0
    noise_dim: int = 16
    gen_hidden: list = field(default_factory=lambda: [64])
    gen_lr: float = 0.05
    gen_steps_per_turn: int = 5
    gen_batch: int = 32
    m_samples: int = 0  # 0 -> local dataset size / number of local classes
    score_samples: int = 200
    score_window: int = 5
    dump_every: int = 10
    n_dump: int = 4
    # key-stats
    d_key_ladder: list = field(default_factory=lambda: [2**k for k in range(1, 15)])
    n_vectors: int = 100
    n_repeats: int = 1000
    distributions: list = field(default_factory=lambda: ["gaussian", "uniform"])
    # softmax-oracle
    mc_samples: int = 100_000
    mc_d_keys: list = field(default_factory=lambda: [2, 128, 1024])
    phi_norm: float = 1.0
    # shared-class
    n_trials: int = 100
    n_fresh: int = 1000
    shared_training: bool = True
    # grad-check
    n_instances: int = 50
    # loss-compare
    per_class_limit: int = 0

    def validate(self) -> "ExperimentConfig":
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment: must be one of {EXPERIMENTS}, got {self.experiment!r}")
        if self.dataset not in ("blobs", "mnist"):
            raise ConfigError(f"dataset: must be 'blobs' or 'mnist', got {self.dataset!r}")
        if self.regime not in REGIMES:
            raise ConfigError(f"regime: must be one of {REGIMES}, got {self.regime!r}")
        for name in ("theta_d", "theta_u"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name}: must lie in [0, 1]")
        if not 0.0 <= self.delta <= 2.0 or any(not 0.0 <= d <= 2.0 for d in self.deltas):
            raise ConfigError("delta/deltas: must lie in [0, 2]")
        if self.n_participants < 1:
            raise ConfigError("n_participants: must be >= 1")
        if any(not 0 <= a < self.n_participants for a in self.attackers):
            raise ConfigError("attackers: indices must address participants")
        if self.d_key < 2:
            raise ConfigError("d_key: must be >= 2")
        if self.lr <= 0 or self.lam < 0:
            raise ConfigError("lr must be positive and lam non-negative")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown field(s): {', '.join(unknown)}")
        defaults = cls()
        clean = {}
        for k, v in d.items():
            ref = getattr(defaults, k)
            clean[k] = _coerce(k, v, ref)
        return cls(**clean)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def framework(self, seed=None, **over) -> FrameworkConfig:
        kw = dict(
            theta_d=self.theta_d, theta_u=self.theta_u, n_epochs=self.n_epochs, d_key=self.d_key,
            fixed_layer=self.fixed_layer, seed=self.seed if seed is None else seed,
            local_epochs_per_turn=self.local_epochs_per_turn, lr=self.lr, lam=self.lam,
            batch_size=self.batch_size,
        )
        kw.update(over)
        return FrameworkConfig(**kw)

    def run_seeds(self) -> list:
        return list(self.seeds) if self.seeds else [self.seed]


def _coerce(name, value, ref):
    if isinstance(ref, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected a boolean, got {value!r}")
        return value
    if isinstance(ref, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if isinstance(ref, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(ref, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
        return value
    if isinstance(ref, list):
        if not isinstance(value, list):
            raise ConfigError(f"{name}: expected a list, got {value!r}")
        return value
    return value


# ---------------------------------------------------------------------------
# data and participants


def load_data(cfg: ExperimentConfig, seed: int):
    if cfg.dataset == "blobs":
        return D.synth_blobs(cfg.n_classes, cfg.per_class, cfg.data_dim, cfg.spread, seed,
                             center_scale=cfg.center_scale)
    train = D.load_mnist(cfg.data_dir, "train", cfg.per_class_limit or None)
    test = D.load_mnist(cfg.data_dir, "test")
    return train, test


def class_split(classes: list, n: int) -> dict:
    if n > len(classes):
        raise ConfigError(f"n_participants: {n} participants but only {len(classes)} classes")
    return {f"p{i}": [int(c) for c in part] for i, part in enumerate(np.array_split(np.array(classes), n))}


def arch_kwargs(cfg: ExperimentConfig) -> dict:
    """Without a fixed layer the embedding itself is the key space, so ``d_emb`` becomes ``d_key``."""
    if cfg.fixed_layer:
        return dict(hidden=tuple(cfg.hidden), d_emb=cfg.d_emb, d_key=cfg.d_key, fixed_layer=True)
    kw = dict(hidden=tuple(cfg.hidden), d_emb=cfg.d_key)
    if cfg.head_activation:
        kw.update(head_activation=cfg.head_activation)
    return kw


def make_key_model(cfg, in_dim, seed) -> M.KeyProtectedClassifier:
    return M.build_key_protected(in_dim, seed, **arch_kwargs(cfg))


def participant_keys(pid: str, classes, d_key: int, seed: int, index: int) -> list[K.ClassKey]:
    rng = np.random.default_rng([seed, 2000 + index])
    return [K.generate_key(d_key, rng, int(c), pid) for c in classes]


def honest_participants(cfg: ExperimentConfig, train: D.Dataset, seed: int, plan: D.PartitionPlan | None = None):
    plan = plan or D.PartitionPlan(class_split(train.classes, cfg.n_participants))
    parts = D.partition(train, plan, np.random.default_rng([seed, 1]))
    out = []
    for i, (pid, ds) in enumerate(parts.items()):
        out.append(Participant(pid, ds, participant_keys(pid, ds.classes, cfg.d_key, seed, i),
                               make_key_model(cfg, train.dim, seed)))
    # every local model must share one fixed layer; init from the same seed guarantees it
    for p in out[1:]:
        p.net.share_frozen_from(out[0].net)
    return out


# ---------------------------------------------------------------------------
# collaborative learning


def run_collab(cfg: ExperimentConfig, seed: int | None = None) -> dict:
    seed = cfg.seed if seed is None else seed
    train, test = load_data(cfg, seed)
    fw = cfg.framework(seed)
    participants = honest_participants(cfg, train, seed)
    runlog = run_training(participants, fw, test)

    owner = "central"
    central_keys = participant_keys(owner, train.classes, cfg.d_key, seed, 0)
    central = train_centralized(make_key_model(cfg, train.dim, seed), train, central_keys, owner, fw)
    central_acc = M.keyed_accuracy(central.local_model, test.samples, test.labels, central_keys)
    return dict(
        runlog=runlog,
        participants=participants,
        mpa=runlog.mpa[-1] if runlog.mpa else float("nan"),
        best_round=int(np.argmax(np.array(runlog.mpa) >= 0.9)) + 1 if max(runlog.mpa, default=0) >= 0.9 else None,
        centralized_acc=central_acc,
    )


# ---------------------------------------------------------------------------
# attacks


@dataclass
class AttackReport:
    regime: str
    delta: float | None
    d_key: int
    seed: int
    target_class: int
    scores: list  # oracle score of the first attacker per epoch
    final_score: float  # mean over the last ``score_window`` epochs
    run_score: float  # mean over all epochs
    honest_mpa: float
    runlog: RunLog
    samples: dict = field(default_factory=dict)  # (attacker id, epoch) -> array
    attacker_scores: dict = field(default_factory=dict)  # attacker id -> per-epoch scores
    oracle_accuracy: float = 0.0


def _attack_target(psi_attack: K.ClassKey, others: list[K.ClassKey]):
    return max(others, key=lambda k: (float(k.vec @ psi_attack.vec), k.sort_key)).class_label


def build_attack(cfg: ExperimentConfig, train: D.Dataset, regime: str, delta: float | None, seed: int):
    """Participants with adversaries attached, plus each attacker's target class."""
    plan = D.PartitionPlan(class_split(train.classes, cfg.n_participants))
    parts = D.partition(train, plan, np.random.default_rng([seed, 1]))
    pids = list(parts)
    attacker_ids = {pids[i] for i in cfg.attackers}
    fake_labels = {pid: FAKE_LABEL_BASE + i for i, pid in enumerate(pids)}
    all_classes = sorted(train.classes)
    vanilla_classes = all_classes + [fake_labels[p] for p in pids if p in attacker_ids]

    keys_of = {pid: participant_keys(pid, parts[pid].classes, cfg.d_key, seed, i) for i, pid in enumerate(pids)}
    owner_of = {c: pid for pid in pids for c in parts[pid].classes}
    participants, targets = [], {}
    for i, pid in enumerate(pids):
        ds = parts[pid]
        if regime == "vanilla":
            clf = M.build_vanilla(train.dim, vanilla_classes, seed, tuple(cfg.hidden), cfg.d_emb)
        else:
            clf = make_key_model(cfg, train.dim, seed)
        if pid not in attacker_ids:
            local_keys = [] if regime == "vanilla" else keys_of[pid]
            participants.append(Participant(pid, ds, local_keys, clf))
            continue
        arng = np.random.default_rng([seed, 3000 + i])
        gen = A.build_generator(cfg.noise_dim, train.dim, seed=int(arng.integers(2**31)),
                                hidden=tuple(cfg.gen_hidden))
        m = cfg.m_samples or max(1, len(ds) // max(1, len(ds.classes)))
        common = dict(m_samples=m, gen_steps_per_turn=cfg.gen_steps_per_turn, gen_batch=cfg.gen_batch,
                      gen_lr=cfg.gen_lr, rng=np.random.default_rng([seed, 4000 + i]))
        c_fake = fake_labels[pid]
        if regime == "vanilla":
            target = cfg.target_class
            if owner_of.get(target) in attacker_ids or target not in owner_of:
                raise ConfigError("target_class: must be held by an honest participant")
            adv = A.AdversaryState(gen, "vanilla", c_fake, c_attack=target, **common)
            local_keys = []
        else:
            psi_fake = K.generate_key(cfg.d_key, arng, c_fake, pid)
            if regime == "random_key":
                psi_attack = K.generate_key(cfg.d_key, arng, -1, pid)
                others = [k for q in pids if q != pid for k in keys_of[q]]
                target = _attack_target(psi_attack, others)
            else:
                target = cfg.target_class
                victim = owner_of.get(target)
                if victim is None or victim in attacker_ids:
                    raise ConfigError("target_class: must be held by an honest participant")
                true_key = next(k for k in keys_of[victim] if k.class_label == target)
                # the harness hands the attacker a copy; the attacker never holds the victim's object
                if regime == "exact_key":
                    psi_attack = K.ClassKey(true_key.vec.copy(), -1, pid)
                else:
                    psi_attack = K.generate_delta_key(true_key, delta, arng, class_label=-1, owner=pid)
            adv = A.AdversaryState(gen, regime, c_fake, psi_fake=psi_fake, psi_attack=psi_attack,
                                   delta=delta if regime == "delta_key" else None, **common)
            local_keys = keys_of[pid] + [psi_fake]
        targets[pid] = target
        participants.append(Participant(pid, ds, local_keys, clf, "attacker", adv))
    for p in participants[1:]:
        p.net.share_frozen_from(participants[0].net)
    return participants, targets


def run_attack(cfg: ExperimentConfig, regime: str | None = None, delta: float | None = None,
               seed: int | None = None, oracle: D.OracleClassifier | None = None,
               data=None) -> AttackReport:
    regime = regime or cfg.regime
    seed = cfg.seed if seed is None else seed
    if regime == "delta_key":
        delta = cfg.delta if delta is None else delta
    train, test = data or load_data(cfg, seed)
    oracle = oracle or D.train_oracle(train, test)
    participants, targets = build_attack(cfg, train, regime, delta, seed)
    attackers = [p for p in participants if p.role == "attacker"]
    honest = [p for p in participants if p.role == "honest"]
    eval_noise = np.random.default_rng([seed, 5000])
    z_eval = A.sample_noise(eval_noise, cfg.score_samples, cfg.noise_dim)
    per_attacker = {p.id: [] for p in attackers}
    samples = {}

    def on_epoch(epoch, parts, runlog):
        for p in attackers:
            x = p.attacker_state.generator(z_eval)
            per_attacker[p.id].append(D.oracle_score(oracle, x, targets[p.id]))
            if epoch % cfg.dump_every == 0 or epoch == cfg.n_epochs:
                samples[(p.id, epoch)] = x[: cfg.n_dump].copy()

    digest = oracle.digest()
    runlog = run_training(participants, cfg.framework(seed), test, on_epoch=on_epoch)
    assert oracle.digest() == digest, "oracle changed during the attack"
    honest_mpa = mean_participant_accuracy(honest, test, evaluation_keys(participants)) if honest else float("nan")
    first = per_attacker[attackers[0].id]
    window = first[-cfg.score_window :]
    return AttackReport(
        regime=regime, delta=delta, d_key=cfg.d_key, seed=seed, target_class=targets[attackers[0].id],
        scores=first, final_score=float(np.mean(window)) if window else 0.0,
        run_score=float(np.mean(first)) if first else 0.0, honest_mpa=honest_mpa, runlog=runlog,
        samples=samples, attacker_scores=per_attacker, oracle_accuracy=oracle.test_accuracy,
    )


def delta_sweep(cfg: ExperimentConfig) -> dict:
    """Run-averaged oracle score per delta, averaged over ``cfg.run_seeds()``."""
    rows, per_seed = [], {}
    for seed in cfg.run_seeds():
        data = load_data(cfg, seed)
        oracle = D.train_oracle(*data)
        for d in cfg.deltas:
            rep = run_attack(cfg, "delta_key", d, seed, oracle, data)
            per_seed.setdefault(d, []).append(rep.run_score)
            rows.append(dict(seed=seed, delta=d, run_score=rep.run_score, final_score=rep.final_score))
    curve = {d: float(np.mean(v)) for d, v in per_seed.items()}
    return dict(rows=rows, curve=curve, crossover=crossover(curve))


def crossover(curve: dict, level: float = 0.5):
    """Linear interpolation of the first delta where the score drops below ``level``."""
    ds = sorted(curve)
    for a, b in zip(ds, ds[1:]):
        sa, sb = curve[a], curve[b]
        if sa >= level > sb:
            return a + (sa - level) / (sa - sb) * (b - a)
    return None


# ---------------------------------------------------------------------------
# shared classes


@dataclass
class SharedClassReport:
    d_key: int
    n_trials: int
    dots_i: np.ndarray
    dots_j: np.ndarray
    fresh_max_abs: np.ndarray
    steps: np.ndarray

    @property
    def mean_dot_i(self) -> float:
        return float(self.dots_i.mean())

    @property
    def mean_dot_j(self) -> float:
        return float(self.dots_j.mean())

    @property
    def mean_fresh_max_abs(self) -> float:
        return float(self.fresh_max_abs.mean())


def converge_shared(psi_i, psi_j, phi0, lr=0.1, max_steps=10_000, tol=1e-12):
    """Projected gradient ascent of <psi_i, phi> + <psi_j, phi> over the unit sphere."""
    phi = phi0 / np.linalg.norm(phi0)
    g = psi_i + psi_j
    for it in range(1, max_steps + 1):
        tangent = g - (g @ phi) * phi
        new = phi + lr * tangent
        new /= np.linalg.norm(new)
        if np.linalg.norm(new - phi) < tol:
            return new, it
        phi = new
    return phi, max_steps


def shared_class_sim(d_key: int, n_trials: int, rng: np.random.Generator, n_fresh: int = 1000,
                     lr: float = 0.1) -> SharedClassReport:
    if d_key < 2:
        raise ParameterError("d_key must be >= 2")
    di, dj, fresh, steps = [], [], [], []
    for _ in range(n_trials):
        psi_i, psi_j, phi0 = K.sample_unit_rows(3, d_key, "gaussian", rng)
        phi, it = converge_shared(psi_i, psi_j, phi0, lr)
        di.append(phi @ psi_i)
        dj.append(phi @ psi_j)
        new = K.sample_unit_rows(n_fresh, d_key, "gaussian", rng)
        fresh.append(np.abs(new @ phi).max())
        steps.append(it)
    return SharedClassReport(d_key, n_trials, np.array(di), np.array(dj), np.array(fresh), np.array(steps))


def shared_class_training(cfg: ExperimentConfig, seed: int | None = None) -> dict:
    """Two participants that both hold class ``target_class`` train together."""
    seed = cfg.seed if seed is None else seed
    train, test = load_data(cfg, seed)
    split = class_split(train.classes, 2)
    shared = cfg.target_class
    for pid in split:
        if shared not in split[pid]:
            split[pid].append(shared)
    plan = D.PartitionPlan(split, {shared})
    participants = honest_participants(cfg, train, seed, plan)
    runlog = run_training(participants, cfg.framework(seed), test)
    keys = runlog.published_keys
    shared_keys = [k for k in keys if k.class_label == shared]
    X = test.of_class(shared).samples
    acc_shared = float(np.mean([
        np.mean(M.predict_from_embeddings(p.local_model.embed(X), keys) == shared) for p in participants
    ]))
    return dict(runlog=runlog, mpa=runlog.mpa[-1], shared_class_acc=acc_shared, n_shared_keys=len(shared_keys))


# ---------------------------------------------------------------------------
# key statistics and the generalized-softmax check


def key_stats_ladder(cfg: ExperimentConfig) -> list[K.KeyStatsReport]:
    out = []
    for dist in cfg.distributions:
        for i, d in enumerate(cfg.d_key_ladder):
            rng = np.random.default_rng([cfg.seed, i, 0 if dist == "gaussian" else 1])
            out.append(K.key_collision_stats(d, cfg.n_vectors, cfg.n_repeats, dist, rng))
    return out


def softmax_oracle_check(cfg: ExperimentConfig) -> list[dict]:
    rows = []
    for i, d in enumerate(cfg.mc_d_keys):
        rng = np.random.default_rng([cfg.seed, i])
        phi = K.sample_unit_rows(1, d, "gaussian", rng)[0] * cfg.phi_norm
        est, analytic = M.softmax_mc_oracle(phi, d, cfg.mc_samples, rng)
        rows.append(dict(d_key=d, estimate=est, analytic=analytic, rel_err=abs(est - analytic) / analytic))
    return rows


# ---------------------------------------------------------------------------
# gradient suite


def _away_from_kinks(net, x, margin):
    """True when no leaky_relu input lies within ``margin`` of zero (FD is invalid at kinks)."""
    h = np.atleast_2d(x)
    for layer in net.layers:
        if isinstance(layer, nn._LeakyReLU) and np.any(np.abs(h) < margin):
            return False
        h, _ = layer.forward(h)
    return True


def _random_layer_net(kind, rng):
    d = int(rng.integers(2, 9))
    o = int(rng.integers(2, 9))
    if kind == "dense":
        specs = [nn.dense(d, o)]
    elif kind == "fixed_dense":
        specs = [nn.fixed_dense(d, o), nn.dense(o, o)]
    elif kind == "layer_norm":
        specs = [nn.dense(d, o), nn.layer_norm(o)]
    elif kind == "l2_normalize":
        specs = [nn.dense(d, o), nn.l2_normalize(o)]
    elif kind == "leaky_relu":
        specs = [nn.dense(d, o), nn.leaky_relu(o)]
    else:
        specs = [nn.dense(d, o), nn.tanh(o)]
    net = nn.init_net(specs, int(rng.integers(2**31)))
    # perturb so layer_norm gain/bias are not at their trivial init
    net.set_params(net.params + 0.3 * rng.standard_normal(net.n_params))
    return net


def _instance(rng, build, margin, tries=100):
    for _ in range(tries):
        net, x = build(rng)
        if _away_from_kinks(net, x, margin):
            return net, x
    raise RuntimeError("could not draw an instance away from activation kinks")


def _max_err(analytic, numeric):
    return float(rel_error(analytic, numeric).max())


def grad_check_suite(n_instances: int = 50, seed: int = 0, h: float = 1e-4, order: int = 4) -> dict:
    """Max per-coordinate relative error of backprop vs central differences, per category."""
    rng = np.random.default_rng(seed)
    results = {}
    for kind in ("dense", "fixed_dense", "leaky_relu", "tanh", "layer_norm", "l2_normalize"):
        worst = 0.0
        for _ in range(n_instances):
            def build(r, kind=kind):
                net = _random_layer_net(kind, r)
                return net, r.standard_normal((3, net.in_dim))
            net, x = _instance(rng, build, 50 * h)
            w = rng.standard_normal((len(x), net.out_dim))
            y, tape = nn.forward(net, x)
            gp, gx = nn.backward(net, tape, w)

            def f_params(p, net=net, x=x, w=w):
                net.params[...] = p  # in-place write keeps layer views bound
                return float(np.sum(nn.forward(net, x)[0] * w))

            p0 = net.params.copy()
            if net.n_params:
                worst = max(worst, _max_err(gp, numerical_grad(f_params, p0.copy(), h, order)))
                net.params[...] = p0
            num_x = numerical_grad(lambda xx: float(np.sum(nn.forward(net, xx)[0] * w)), x.copy(), h, order)
            worst = max(worst, _max_err(gx, num_x))
        results[kind] = worst
    results["key_regression_loss"] = _loss_check(rng, n_instances, h, order, "key")
    results["cross_entropy_loss"] = _loss_check(rng, n_instances, h, order, "ce")
    return results


def _loss_check(rng, n, h, order, which):
    worst = 0.0
    for _ in range(n):
        in_dim = int(rng.integers(2, 7))
        lam = float(rng.uniform(0, 0.1))
        labels = [0, 1, 2]
        y = rng.choice(labels, size=4)

        def build(r):
            seed = int(r.integers(2**31))
            if which == "key":
                clf = M.build_key_protected(in_dim, seed, hidden=(6,), d_emb=5)
            else:
                clf = M.build_vanilla(in_dim, labels, seed, hidden=(6,), d_emb=5)
            return clf.net, r.standard_normal((4, in_dim))

        net, X = _instance(rng, build, 50 * h)
        if which == "key":
            clf = M.KeyProtectedClassifier(net, 5)
            ks = [K.generate_key(5, rng, c, "me") for c in labels]
            loss_fn = lambda: M.key_regression_loss(clf, X, y, ks, lam, owner="me")
        else:
            clf = M.VanillaClassifier(net, labels)
            loss_fn = lambda: M.cross_entropy_loss(clf, X, y, lam)
        _, grads = loss_fn()

        def f(p):
            net.params[...] = p
            return loss_fn()[0]

        p0 = net.params.copy()
        worst = max(worst, _max_err(grads, numerical_grad(f, p0.copy(), h, order)))
        net.params[...] = p0
    return worst


# ---------------------------------------------------------------------------
# key-based regression vs cross-entropy


def loss_compare(cfg: ExperimentConfig, seed: int | None = None) -> dict:
    """Centralized training with fixed orthonormal keys + tanh head vs a softmax classifier."""
    seed = cfg.seed if seed is None else seed
    train, test = load_data(cfg, seed)
    classes = train.classes
    fw = cfg.framework(seed)
    keys = K.generate_orthonormal_keys(cfg.d_emb, len(classes), np.random.default_rng([seed, 7]),
                                       labels=classes, owner="central")
    key_clf = M.build_key_protected(train.dim, seed, hidden=tuple(cfg.hidden), d_emb=cfg.d_emb,
                                    head_activation="tanh")
    p = train_centralized(key_clf, train, keys, "central", fw)
    key_acc = M.keyed_accuracy(p.local_model, test.samples, test.labels, keys)

    ce_clf = M.build_vanilla(train.dim, classes, seed, tuple(cfg.hidden), cfg.d_emb)
    q = train_centralized(ce_clf, train, [], "central", fw)
    ce_acc = M.vanilla_accuracy(q.local_model, test.samples, test.labels)
    return dict(key_regression_acc=key_acc, cross_entropy_acc=ce_acc, gap=abs(key_acc - ce_acc))


# ---------------------------------------------------------------------------
# dumps


def write_pgm(path, img: np.ndarray, shape: tuple) -> None:
    """Binary P5 greyscale; values clipped to [0, 1]."""
    rows, cols = shape
    px = np.rint(np.clip(np.asarray(img).reshape(rows, cols), 0.0, 1.0) * 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{cols} {rows}\n255\n".encode())
        f.write(px.tobytes())


def dump_samples(out: Path, regime: str, samples: dict, image_shape=None) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for (pid, epoch), xs in sorted(samples.items()):
        for i, x in enumerate(xs):
            stem = f"attack_{regime}_epoch{epoch}_sample{i}"
            if len({p for p, _ in samples}) > 1:
                stem = f"attack_{regime}_{pid}_epoch{epoch}_sample{i}"
            if image_shape is not None:
                path = out / f"{stem}.pgm"
                write_pgm(path, x, image_shape)
            else:
                path = out / f"{stem}.csv"
                path.write_text(",".join(f"{v:.9g}" for v in x) + "\n")
            written.append(path)
    return written
