import numpy as np
import pytest

from keyward import adversary as A
from keyward import keys as K
from keyward import model as M
from keyward.errors import ParameterError, ShapeError
from keyward.gradcheck import numerical_grad, rel_error


def _adv(mode="exact_key", d=6, data_dim=5, seed=0):
    r = np.random.default_rng(seed)
    gen = A.build_generator(4, data_dim, seed, hidden=(7,))
    if mode == "vanilla":
        return A.AdversaryState(gen, mode, 99, c_attack=0, rng=r)
    return A.AdversaryState(gen, mode, 99, psi_fake=K.generate_key(d, r, 99, "a"),
                            psi_attack=K.generate_key(d, r, -1, "a"), rng=r)


def test_state_validation(rng):
    gen = A.build_generator(4, 5, 0)
    psi = K.generate_key(6, rng, 3, "a")
    with pytest.raises(ParameterError):
        A.AdversaryState(gen, "sneaky", 9)
    with pytest.raises(ParameterError):
        A.AdversaryState(gen, "exact_key", 9, psi_fake=psi)
    with pytest.raises(ParameterError):
        A.AdversaryState(gen, "exact_key", 3, psi_fake=psi, psi_attack=psi)
    with pytest.raises(ParameterError):
        A.AdversaryState(gen, "vanilla", 9, c_attack=9)


def test_noise_is_uniform_box(rng):
    z = A.sample_noise(rng, 1000, 16)
    assert z.shape == (1000, 16) and z.min() >= -1 and z.max() < 1


def test_keyed_generator_gradient(rng):
    adv = _adv()
    clf = M.build_key_protected(5, 1, hidden=(6,), d_emb=6, head_activation="tanh")
    z = A.sample_noise(rng, 3, 4)
    loss, g = A.keyed_generator_loss_and_grad(adv, clf, z)
    assert loss == pytest.approx(-np.mean(clf.embed(adv.generator(z)) @ adv.psi_attack.vec))

    def f(p):
        adv.generator.params[...] = p
        return A.keyed_generator_loss_and_grad(adv, clf, z)[0]

    p0 = adv.generator.params.copy()
    num = numerical_grad(f, p0.copy(), 1e-4, order=4)
    adv.generator.params[...] = p0
    assert rel_error(g, num).max() < 1e-4


def test_vanilla_generator_gradient(rng):
    adv = _adv("vanilla")
    clf = M.build_vanilla(5, [0, 1, 99], 1, hidden=(6,), d_emb=4)
    z = A.sample_noise(rng, 3, 4)
    _, g = A.vanilla_generator_loss_and_grad(adv, clf, z, 0)

    def f(p):
        adv.generator.params[...] = p
        return A.vanilla_generator_loss_and_grad(adv, clf, z, 0)[0]

    p0 = adv.generator.params.copy()
    num = numerical_grad(f, p0.copy(), 1e-4, order=4)
    adv.generator.params[...] = p0
    assert rel_error(g, num).max() < 1e-4


def test_generator_training_leaves_classifier_untouched():
    adv = _adv()
    clf = M.build_key_protected(5, 1, hidden=(6,), d_emb=6)
    before = clf.net.params_digest()
    first = A.train_generator_keyed(adv, clf, 0, 64, 0.05, np.random.default_rng(0))
    last = A.train_generator_keyed(adv, clf, 200, 32, 0.05, np.random.default_rng(0))
    assert clf.net.params_digest() == before
    assert last < first


def test_vanilla_training_rejects_unknown_class():
    adv = _adv("vanilla")
    clf = M.build_vanilla(5, [1, 2], 1, hidden=(6,), d_emb=4)
    with pytest.raises(ParameterError):
        A.train_generator_vanilla(adv, clf, 0, 1, 8, 0.1, np.random.default_rng(0))


def test_dimension_mismatch():
    adv = _adv(data_dim=7)
    clf = M.build_key_protected(5, 1, hidden=(6,), d_emb=6)
    with pytest.raises(ShapeError):
        A.train_generator(adv, clf)
    adv = _adv(d=8)
    with pytest.raises(ShapeError):
        A.keyed_generator_loss_and_grad(adv, clf, np.zeros((1, 4)))


def test_synthesize_labels_and_counts():
    adv = _adv()
    ds = A.synthesize(adv, 11)
    assert len(ds) == 11 and set(ds.labels.tolist()) == {99} and ds.dim == 5
    assert len(A.synthesize(adv, 0)) == 0
    with pytest.raises(ParameterError):
        A.synthesize(adv, -1)
