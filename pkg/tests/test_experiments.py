import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from keyward import experiments as E
from keyward import keys as K
from keyward.errors import ConfigError, KeyAccessError


def test_config_rejects_unknown_and_mistyped_fields():
    with pytest.raises(ConfigError, match="bogus"):
        E.ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match="n_epochs"):
        E.ExperimentConfig.from_dict({"n_epochs": "ten"})
    with pytest.raises(ConfigError, match="fixed_layer"):
        E.ExperimentConfig.from_dict({"fixed_layer": 1})
    with pytest.raises(ConfigError, match="theta_u"):
        E.ExperimentConfig.from_dict({"theta_u": 2}).validate()
    with pytest.raises(ConfigError, match="regime"):
        E.ExperimentConfig.from_dict({"regime": "psychic"}).validate()
    cfg = E.ExperimentConfig.from_dict({"lr": 1})
    assert cfg.lr == 1.0 and isinstance(cfg.lr, float)


@given(st.integers(2, 64), st.integers(0, 2**31 - 1))
def test_shared_optimum_is_normalized_key_sum(d, seed):
    r = np.random.default_rng(seed)
    psi_i, psi_j, phi0 = K.sample_unit_rows(3, d, "gaussian", r)
    c = psi_i @ psi_j
    if c < -0.9:  # nearly antipodal keys make the objective flat
        return
    phi, _ = E.converge_shared(psi_i, psi_j, phi0)
    target = (psi_i + psi_j) / np.linalg.norm(psi_i + psi_j)
    np.testing.assert_allclose(phi, target, atol=1e-8)
    # both dots equal sqrt((1 + c) / 2)
    assert phi @ psi_i == pytest.approx(np.sqrt((1 + c) / 2), abs=1e-8)
    assert phi @ psi_j == pytest.approx(phi @ psi_i, abs=1e-8)


def test_shared_sim_orthogonal_limit():
    rep = E.shared_class_sim(4096, 10, np.random.default_rng(0), n_fresh=200)
    assert abs(rep.mean_dot_i - 1 / np.sqrt(2)) < 0.02
    assert rep.mean_fresh_max_abs < 0.1


def test_crossover_interpolation():
    assert E.crossover({0.1: 0.9, 0.5: 0.7, 1.0: 0.3, 1.3: 0.0}) == pytest.approx(0.5 + 0.2 / 0.4 * 0.5)
    assert E.crossover({0.1: 0.2, 1.0: 0.1}) is None


def test_attack_keys_are_owned_by_attacker(blobs):
    cfg = E.ExperimentConfig(experiment="attack", regime="exact_key", n_epochs=1)
    tr, _ = blobs
    parts, targets = E.build_attack(cfg, tr, "exact_key", None, 0)
    victim, attacker = parts
    adv = attacker.attacker_state
    true_key = next(k for k in victim.local_keys if k.class_label == cfg.target_class)
    assert adv.psi_attack is not true_key and adv.psi_attack.owner == attacker.id
    np.testing.assert_array_equal(adv.psi_attack.vec, true_key.vec)
    assert all(k.owner == attacker.id for k in attacker.local_keys)
    assert adv.psi_fake in attacker.local_keys and adv.psi_attack not in attacker.local_keys
    assert targets[attacker.id] == cfg.target_class


def test_attacker_cannot_train_with_victim_key(blobs):
    from keyward.model import key_regression_loss

    tr, _ = blobs
    cfg = E.ExperimentConfig(experiment="attack", n_epochs=1)
    victim, attacker = E.build_attack(cfg, tr, "exact_key", None, 0)[0]
    stolen = victim.local_keys[0]
    with pytest.raises(KeyAccessError):
        key_regression_loss(attacker.local_model, tr.samples[:1], [stolen.class_label],
                            attacker.local_keys + [stolen], owner=attacker.id)


def test_delta_attack_key_distance(blobs):
    tr, _ = blobs
    cfg = E.ExperimentConfig(experiment="attack", n_epochs=1)
    victim, attacker = E.build_attack(cfg, tr, "delta_key", 0.7, 0)[0]
    true_key = next(k for k in victim.local_keys if k.class_label == cfg.target_class)
    assert np.linalg.norm(attacker.attacker_state.psi_attack.vec - true_key.vec) == pytest.approx(0.7)


def test_random_attack_target_is_closest_foreign_key(blobs):
    tr, _ = blobs
    cfg = E.ExperimentConfig(experiment="attack", n_epochs=1)
    (victim, attacker), targets = E.build_attack(cfg, tr, "random_key", None, 0)
    psi = attacker.attacker_state.psi_attack.vec
    best = max(victim.local_keys, key=lambda k: k.vec @ psi)
    assert targets[attacker.id] == best.class_label


def test_attack_on_own_class_rejected(blobs):
    tr, _ = blobs
    cfg = E.ExperimentConfig(experiment="attack", target_class=9, n_epochs=1)
    with pytest.raises(ConfigError):
        E.build_attack(cfg, tr, "exact_key", None, 0)


def test_exact_attack_and_oracle_untouched():
    cfg = E.ExperimentConfig(experiment="attack", regime="exact_key", n_epochs=12, dump_every=6)
    rep = E.run_attack(cfg)
    assert len(rep.scores) == 12 and rep.final_score == pytest.approx(np.mean(rep.scores[-5:]))
    assert sorted(e for _, e in rep.samples) == [6, 12]
    assert rep.honest_mpa >= 0.9


def test_pgm_and_csv_dumps(tmp_path):
    img = np.linspace(0, 1, 6)
    E.write_pgm(tmp_path / "a.pgm", img, (2, 3))
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n3 2\n255\n") and list(raw[-6:]) == [0, 51, 102, 153, 204, 255]
    paths = E.dump_samples(tmp_path / "s", "exact_key", {("p1", 3): np.ones((2, 4))})
    assert [p.name for p in paths] == ["attack_exact_key_epoch3_sample0.csv", "attack_exact_key_epoch3_sample1.csv"]


def test_grad_suite_small():
    res = E.grad_check_suite(3, seed=1)
    assert set(res) >= {"dense", "layer_norm", "l2_normalize", "key_regression_loss", "cross_entropy_loss"}
    assert max(res.values()) < 1e-4
