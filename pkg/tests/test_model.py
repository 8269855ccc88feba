import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from keyward import keys as K
from keyward import model as M
from keyward import nn
from keyward.errors import KeyAccessError, ParameterError, ShapeError
from keyward.gradcheck import numerical_grad, rel_error


def _clf(seed=0, in_dim=5, d=6):
    return M.build_key_protected(in_dim, seed, hidden=(7,), d_emb=d)


def test_embedding_is_unit_norm(rng):
    clf = _clf()
    emb = clf.embed(rng.standard_normal((9, 5)))
    np.testing.assert_allclose(np.linalg.norm(emb, axis=1), 1.0, rtol=1e-12)


def test_fixed_layer_parameter_delta():
    # layer_norm after the fixed projection carries a gain and a bias per key dimension
    base = nn.Net(M.key_protected_specs(784, (64, 64), 64, 128, True)).n_params
    big = nn.Net(M.key_protected_specs(784, (64, 64), 64, 16384, True)).n_params
    assert big - base == 2 * (16384 - 128) == 32512


def test_key_width_must_match_without_fixed_layer():
    with pytest.raises(ShapeError):
        M.key_protected_specs(4, (3,), 8, d_key=16)


def test_predict_ties_break_by_owner_then_label():
    psi = np.array([1.0, 0.0])
    keys = [K.ClassKey(psi, 5, "bob"), K.ClassKey(psi, 2, "bob"), K.ClassKey(psi, 9, "alice")]
    emb = np.array([[1.0, 0.0]])
    assert M.predict_from_embeddings(emb, keys)[0] == 9
    assert M.predict_from_embeddings(emb, keys[:2])[0] == 2


def test_duplicate_keys_for_one_class_both_count():
    a, b = K.ClassKey(np.array([1.0, 0.0]), 3, "p"), K.ClassKey(np.array([0.0, 1.0]), 3, "q")
    c = K.ClassKey(np.array([-1.0, 0.0]), 4, "p")
    emb = np.array([[0.0, 1.0], [0.9, 0.1]])
    assert list(M.predict_from_embeddings(emb, [a, b, c])) == [3, 3]


def test_prediction_invariant_to_key_order(rng):
    clf = _clf()
    ks = [K.generate_key(6, rng, c, "o") for c in range(4)]
    X = rng.standard_normal((20, 5))
    np.testing.assert_array_equal(M.predict(clf, X, ks), M.predict(clf, X, ks[::-1]))


def test_key_regression_loss_value_and_regularizer(rng):
    clf = _clf()
    ks = [K.generate_key(6, rng, c, "me") for c in range(3)]
    X, y = rng.standard_normal((4, 5)), np.array([0, 2, 1, 0])
    emb = clf.embed(X)
    expected = -sum(emb[i] @ ks[c].vec for i, c in enumerate(y))
    loss, _ = M.key_regression_loss(clf, X, y, ks)
    assert loss == pytest.approx(expected, rel=1e-12)
    theta = clf.net.params
    loss_l, grads_l = M.key_regression_loss(clf, X, y, ks, lam=0.3)
    _, grads = M.key_regression_loss(clf, X, y, ks)
    assert loss_l == pytest.approx(expected + 0.3 * theta @ theta, rel=1e-12)
    np.testing.assert_allclose(grads_l - grads, 0.6 * theta, atol=1e-12)


def test_regularizer_alone_without_trainable_params(rng):
    # a net with no trainable parameters: the loss is exactly the score term for any lam
    clf = M.KeyProtectedClassifier(nn.init_net([nn.fixed_dense(3, 4), nn.l2_normalize(4)], 0), 4)
    ks = [K.generate_key(4, rng, 0, "me")]
    X, y = rng.standard_normal((3, 3)), np.zeros(3, dtype=int)
    a, ga = M.key_regression_loss(clf, X, y, ks, lam=0.0)
    b, gb = M.key_regression_loss(clf, X, y, ks, lam=5.0)
    assert a == b and ga.size == gb.size == 0


@given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.1))
def test_key_regression_gradient(seed, lam):
    r = np.random.default_rng(seed)
    clf = M.build_key_protected(4, seed, hidden=(5,), d_emb=4, head_activation="tanh")
    ks = [K.generate_key(4, r, c, "me") for c in range(3)]
    X, y = r.standard_normal((5, 4)), r.integers(0, 3, 5)
    _, g = M.key_regression_loss(clf, X, y, ks, lam)

    def f(p):
        clf.net.params[...] = p
        return M.key_regression_loss(clf, X, y, ks, lam)[0]

    p0 = clf.net.params.copy()
    num = numerical_grad(f, p0.copy(), 1e-4, order=4)
    clf.net.params[...] = p0
    assert rel_error(g, num).max() < 1e-4


def test_key_access_rules(rng):
    clf = _clf()
    mine = [K.generate_key(6, rng, 0, "me")]
    theirs = [K.generate_key(6, rng, 1, "you")]
    X = rng.standard_normal((2, 5))
    with pytest.raises(KeyAccessError):
        M.key_regression_loss(clf, X, [0, 1], mine + theirs, owner="me")
    with pytest.raises(KeyAccessError):
        M.key_regression_loss(clf, X, [0, 1], mine, owner="me")
    with pytest.raises(ParameterError):
        M.key_regression_loss(clf, X, [0, 0], mine + [K.generate_key(6, rng, 0, "me")])


def test_requires_l2_head(rng):
    clf = M.KeyProtectedClassifier(nn.init_net([nn.dense(3, 4)], 0), 4)
    with pytest.raises(ShapeError):
        M.key_regression_loss(clf, np.ones((1, 3)), [0], [K.generate_key(4, rng, 0)])


def test_cross_entropy_matches_manual(rng):
    clf = M.build_vanilla(4, ["a", "b", "c"], 0, hidden=(5,), d_emb=3)
    X, y = rng.standard_normal((6, 4)), ["a", "c", "b", "a", "b", "c"]
    z = clf.logits(X)
    idx = clf.class_index(y)
    expected = -np.sum(z[np.arange(6), idx] - np.log(np.exp(z).sum(1)))
    assert M.cross_entropy_loss(clf, X, y)[0] == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ParameterError):
        clf.class_index(["zzz"])


def test_vanilla_predict_allowed_subset():
    clf = M.build_vanilla(2, [0, 1, 99], 0, hidden=(3,), d_emb=3)
    clf.net.params[:] = 0
    clf.net.layers[-1].b[:] = [0.0, 1.0, 5.0]
    X = np.zeros((2, 2))
    assert list(M.vanilla_predict(clf, X)) == [99, 99]
    assert list(M.vanilla_predict(clf, X, allowed=[0, 1])) == [1, 1]


@pytest.mark.parametrize("d", [2, 16, 128])
def test_softmax_mc_oracle_matches_closed_form(d):
    r = np.random.default_rng(d)
    phi = K.sample_unit_rows(1, d, "gaussian", r)[0]
    est, analytic = M.softmax_mc_oracle(phi, d, 200_000, r)
    assert analytic == pytest.approx(np.exp(0.5))
    assert abs(est - analytic) / analytic < 0.01


def test_softmax_mc_oracle_input_checks(rng):
    with pytest.raises(ShapeError):
        M.softmax_mc_oracle(np.ones(3), 4, 10, rng)
    with pytest.raises(ParameterError):
        M.softmax_mc_oracle(np.ones(3), 3, 0, rng)
    with pytest.raises(ParameterError):
        M.softmax_mc_oracle(np.array([np.nan, 1.0]), 2, 10, rng)


def test_generalized_softmax_prob(rng):
    clf = _clf()
    psi = K.generate_key(6, rng, 0)
    x = rng.standard_normal(5)
    assert M.generalized_softmax_prob(clf, x, psi) == pytest.approx(np.exp(clf.embed(x) @ psi.vec - 0.5))
