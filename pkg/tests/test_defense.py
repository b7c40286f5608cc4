import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robustkit import data, defense, nn
from robustkit.attack import AttackConfig


# ---------------------------------------------------------------------------
# smooth_labels
# ---------------------------------------------------------------------------

def test_smooth_labels_alpha_zero_is_identity():
    y = defense.one_hot([4], 10)[0]
    assert np.array_equal(defense.smooth_labels(y, 0.0, 10), y)


def test_smooth_labels_alpha_one_is_uniform():
    y = defense.one_hot([2], 10)[0]
    assert np.allclose(defense.smooth_labels(y, 1.0, 10), np.full(10, 0.1))


def test_smooth_labels_alpha_point_two():
    y = defense.one_hot([7], 10)[0]
    warm = defense.smooth_labels(y, 0.2, 10)
    assert warm[7] == pytest.approx(0.82)
    off = np.delete(warm, 7)
    assert np.allclose(off, 0.02)


def test_smooth_labels_validates():
    y = defense.one_hot([0], 10)[0]
    with pytest.raises(ValueError):
        defense.smooth_labels(y, 1.5, 10)
    with pytest.raises(ValueError):
        defense.smooth_labels(np.array([0.5, 0.5]), 0.1, 2)


@settings(max_examples=50, deadline=None)
@given(alpha=st.floats(0.0, 1.0), label=st.integers(0, 9))
def test_smooth_labels_is_simplex_point(alpha, label):
    warm = defense.smooth_labels(defense.one_hot([label], 10)[0], alpha, 10)
    assert warm.min() >= 0.0
    assert warm.sum() == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------------------
# cross_entropy
# ---------------------------------------------------------------------------

def test_cross_entropy_uniform_logits_ln10():
    logits = np.zeros((4, 10))
    target = defense.one_hot([0, 3, 5, 9], 10)
    loss, _ = defense.cross_entropy(logits, target)
    assert loss == pytest.approx(math.log(10.0), abs=1e-12)


def test_cross_entropy_stationary_at_matching_softmax():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(3, 5))
    target = nn.softmax(logits)
    _, grad = defense.cross_entropy(logits, target)
    assert np.abs(grad).max() < 1e-15


def test_cross_entropy_matches_brute_force_log_sum_exp():
    rng = np.random.default_rng(1)
    logits = rng.normal(scale=3.0, size=(6, 3))
    target = defense.one_hot(rng.integers(0, 3, size=6), 3)
    loss, grad = defense.cross_entropy(logits, target)
    # brute-force oracle straight from the formula
    expected = 0.0
    for i in range(6):
        lse = math.log(sum(math.exp(v) for v in logits[i]))
        expected += sum(target[i, c] * (lse - logits[i, c]) for c in range(3))
    expected /= 6
    assert loss == pytest.approx(expected, abs=1e-12)
    for i in range(6):
        p = np.exp(logits[i]) / np.exp(logits[i]).sum()
        assert np.allclose(grad[i], (p - target[i]) / 6, atol=1e-12)


def test_cross_entropy_validates():
    with pytest.raises(nn.NonFiniteError):
        defense.cross_entropy(np.array([[np.inf, 0.0]]), np.array([[1.0, 0.0]]))
    with pytest.raises(ValueError):
        defense.cross_entropy(np.zeros((1, 2)), np.array([[0.6, 0.6]]))


# ---------------------------------------------------------------------------
# logit squeezing
# ---------------------------------------------------------------------------

def test_squeeze_zero_logits():
    pen, grad = defense.logit_squeeze_penalty(np.zeros((3, 4)), beta=1.5)
    assert pen == 0.0
    assert np.array_equal(grad, np.zeros((3, 4)))


def test_squeeze_three_four_five():
    pen, grad = defense.logit_squeeze_penalty(np.array([[3.0, 4.0]]), beta=1.0)
    assert pen == pytest.approx(5.0, abs=1e-12)
    assert np.allclose(grad, [[0.6, 0.8]])


def test_squeeze_batch_of_two():
    pen, _ = defense.logit_squeeze_penalty(np.array([[1.0, 0.0], [0.0, 1.0]]), beta=2.0)
    assert pen == pytest.approx(2.0 * math.sqrt(2.0), abs=1e-12)


def test_squeeze_squared_variant():
    pen, grad = defense.logit_squeeze_penalty(np.array([[3.0, 4.0]]), beta=1.0, squared=True)
    assert pen == pytest.approx(25.0)
    assert np.allclose(grad, [[6.0, 8.0]])


@settings(max_examples=40, deadline=None)
@given(c=st.floats(0.01, 100.0))
def test_squeeze_positively_homogeneous(c):
    z = np.array([[1.0, -2.0, 0.5], [0.3, 0.0, -1.2]])
    p1, _ = defense.logit_squeeze_penalty(z, beta=0.7)
    p2, _ = defense.logit_squeeze_penalty(c * z, beta=0.7)
    assert p2 == pytest.approx(c * p1, rel=1e-12)


# ---------------------------------------------------------------------------
# cw loss
# ---------------------------------------------------------------------------

def test_cw_loss_arithmetic():
    loss, grad = defense.cw_loss(np.array([2.0, 5.0, 1.0]), 0)
    assert loss == 3.0
    assert np.array_equal(grad, [-1.0, 1.0, 0.0])
    loss, _ = defense.cw_loss(np.array([5.0, 2.0, 1.0]), 0)
    assert loss == -3.0


def test_cw_loss_tie_takes_lowest_class():
    loss, grad = defense.cw_loss(np.array([1.0, 1.0, 1.0]), 2)
    assert loss == 0.0
    assert np.array_equal(grad, [1.0, 0.0, -1.0])


def test_cw_loss_needs_two_classes():
    with pytest.raises(ValueError):
        defense.cw_loss(np.array([1.0]), 0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.integers(0, 2))
def test_cw_loss_sign_iff_misclassified(zs, y):
    z = np.array(zs)
    loss, _ = defense.cw_loss(z, y)
    if loss < 0:
        assert z.argmax() == y
    if z.argmax() == y and (z == z.max()).sum() == 1:
        assert loss < 0


# ---------------------------------------------------------------------------
# adversarial objective
# ---------------------------------------------------------------------------

def tiny_net_and_batch():
    net = nn.build_network((4,), [
        {"kind": "dense", "units": 8}, {"kind": "relu"}, {"kind": "dense", "units": 3},
    ], seed=3)
    rng = np.random.default_rng(3)
    x = rng.uniform(0.2, 0.8, size=(6, 4))
    y = rng.integers(0, 3, size=6)
    return net, x, y


def test_adversarial_objective_kappa_one_matches_natural():
    net, x, y = tiny_net_and_batch()
    cfg = AttackConfig(family="pgd", epsilon=0.1, steps=3, step_size=0.05,
                       random_init=False, seed=1)
    loss, grads = defense.adversarial_objective(net, x, y, 1.0, cfg)
    trace = nn.forward(net, x)
    nat_loss, dl = defense.cross_entropy(trace.logits, defense.one_hot(y, 3))
    nat_grads = nn.param_gradients(net, trace, dl)
    assert loss == nat_loss
    for g, ng in zip(grads, nat_grads):
        for k in g:
            assert np.array_equal(g[k], ng[k])


def test_adversarial_objective_kappa_zero_eps_zero_is_natural():
    net, x, y = tiny_net_and_batch()
    cfg = AttackConfig(family="pgd", epsilon=0.0, steps=2, step_size=0.1,
                       random_init=False, seed=1)
    loss, _ = defense.adversarial_objective(net, x, y, 0.0, cfg)
    nat_loss, _ = defense.cross_entropy(nn.forward(net, x).logits, defense.one_hot(y, 3))
    assert loss == pytest.approx(nat_loss, abs=1e-15)


def test_adversarial_objective_mixes_losses():
    net, x, y = tiny_net_and_batch()
    cfg = AttackConfig(family="fgsm", epsilon=0.2, random_init=False, seed=5)
    from robustkit import attack as attack_mod
    x_adv = attack_mod.run_attack(net, x, y, cfg)
    clean, _ = defense.cross_entropy(nn.forward(net, x).logits, defense.one_hot(y, 3))
    adv, _ = defense.cross_entropy(nn.forward(net, x_adv).logits, defense.one_hot(y, 3))
    loss, _ = defense.adversarial_objective(net, x, y, 0.5, cfg)
    assert loss == pytest.approx(0.5 * clean + 0.5 * adv, abs=1e-12)


# ---------------------------------------------------------------------------
# TrainConfig
# ---------------------------------------------------------------------------

def test_train_config_regime_validation():
    with pytest.raises(ValueError):
        defense.TrainConfig(regime="natural", alpha=0.2)
    with pytest.raises(ValueError):
        defense.TrainConfig(regime="label_smooth", beta=0.5)
    with pytest.raises(ValueError):
        defense.TrainConfig(regime="adversarial")
    with pytest.raises(ValueError):
        defense.TrainConfig(alpha=1.5, regime="combined")
    defense.TrainConfig(regime="combined", alpha=0.2, beta=0.5, sigma=0.5)


def test_train_config_kv_roundtrip():
    cfg = defense.TrainConfig(regime="adversarial", arch="mlp", kappa=0.5,
                              iterations=123, seed=9,
                              attack=AttackConfig(family="pgd", epsilon=0.3,
                                                  steps=40, step_size=0.01,
                                                  random_init=True, seed=4))
    text = cfg.to_kv()
    back = defense.TrainConfig.from_kv(text)
    assert back == cfg


def test_train_config_kv_rejects_unknown_key():
    with pytest.raises(ValueError):
        defense.TrainConfig.from_kv("bogus=1\n")


# ---------------------------------------------------------------------------
# train loop (small budgets)
# ---------------------------------------------------------------------------

def blob_config(**kw):
    base = dict(regime="natural", arch="linear", iterations=300, batch_size=20,
                lr=0.5, momentum=0.9, weight_decay=0.0, seed=1, log_every=50)
    base.update(kw)
    return defense.TrainConfig(**base)


def test_train_linear_separable_blobs_to_full_accuracy():
    ds = data.synth_blobs(400, 3, dim=6, separation=0.8, seed=2, std=0.03)
    net, log = defense.train(blob_config(), ds)
    from robustkit.attack import evaluate
    assert evaluate(net, ds).accuracy == 1.0
    assert log.records[0]["iteration"] == 50
    assert log.final()["iteration"] == 300


def test_train_deterministic_checkpoints(tmp_path):
    ds = data.synth_blobs(200, 3, dim=6, separation=0.6, seed=2)
    net1, _ = defense.train(blob_config(iterations=100), ds)
    net2, _ = defense.train(blob_config(iterations=100), ds)
    a, b = tmp_path / "a.rbk", tmp_path / "b.rbk"
    nn.save_checkpoint(net1, a)
    nn.save_checkpoint(net2, b)
    assert a.read_bytes() == b.read_bytes()


def test_train_label_smooth_alpha_zero_matches_natural():
    ds = data.synth_blobs(200, 3, dim=6, separation=0.6, seed=2)
    net1, log1 = defense.train(blob_config(iterations=80), ds)
    net2, log2 = defense.train(blob_config(iterations=80, regime="label_smooth"), ds)
    assert log1.records == log2.records
    for l1, l2 in zip(net1.layers, net2.layers):
        for k in l1.params:
            assert np.array_equal(l1.params[k], l2.params[k])


def test_train_squeeze_lowers_logit_magnitude():
    ds = data.synth_blobs(600, 3, dim=6, separation=0.7, seed=4, std=0.05)
    nat, _ = defense.train(blob_config(iterations=400), ds)
    sq, _ = defense.train(blob_config(iterations=400, regime="logit_squeeze",
                                      beta=0.5, sigma=0.3), ds)
    z_nat = np.abs(nn.forward(nat, ds.images).logits).mean()
    z_sq = np.abs(nn.forward(sq, ds.images).logits).mean()
    assert z_sq < z_nat


def test_train_divergence_raises_with_iteration():
    ds = data.synth_blobs(100, 3, dim=6, separation=0.6, seed=2)
    # squared squeezing with a huge beta feeds the logits back into their
    # own gradient, so the weights blow up to inf within a few steps
    cfg = blob_config(lr=10.0, iterations=2000, regime="logit_squeeze",
                      beta=1e6, squeeze_squared=True)
    with pytest.raises(nn.NonFiniteError, match="iteration"):
        defense.train(cfg, ds)


def test_train_kappa_one_adversarial_matches_natural():
    ds = data.synth_blobs(200, 3, dim=6, separation=0.6, seed=2)
    atk = AttackConfig(family="pgd", epsilon=0.1, steps=2, step_size=0.05,
                       random_init=False, seed=7)
    nat, _ = defense.train(blob_config(iterations=60), ds)
    adv, _ = defense.train(blob_config(iterations=60, regime="adversarial",
                                       kappa=1.0, attack=atk), ds)
    for l1, l2 in zip(nat.layers, adv.layers):
        for k in l1.params:
            assert np.array_equal(l1.params[k], l2.params[k])
