import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsfas import tensor as T
from dsfas.losses import (
    BCE_EPS,
    BatchFeatures,
    InsufficientSamplesError,
    LossWeights,
    TripletConfig,
    combined_loss,
    l_c,
    l_dis,
    l_gen,
    l_live,
    l_r,
    l_recon,
    l_t,
    triplet_hard,
    triplet_normal,
)
from dsfas.tensor import ShapeError, Tensor

from gradcheck import max_grad_error


# -- brute-force oracles ----------------------------------------------------


def sqd(u, v):
    return sum((a - b) ** 2 for a, b in zip(u, v))


def oracle_normal(feats, labels, alpha, positive_only=True):
    live = [i for i, y in enumerate(labels) if y == 0]
    spoof = [i for i, y in enumerate(labels) if y == 1]
    losses = []
    for a in live:
        for p in live:
            if p == a:
                continue
            for n in spoof:
                losses.append(max(sqd(feats[a], feats[p]) - sqd(feats[a], feats[n]) + alpha, 0.0))
    pos = [v for v in losses if v > 0]
    if positive_only:
        return sum(pos) / len(pos) if pos else 0.0
    return sum(losses) / len(losses)


def oracle_hard(feats, labels, m):
    live = [i for i, y in enumerate(labels) if y == 0]
    spoof = [i for i, y in enumerate(labels) if y == 1]
    total = 0.0
    for a in live:
        far = max(sqd(feats[a], feats[p]) for p in live if p != a)
        near = min(sqd(feats[a], feats[n]) for n in spoof)
        total += max(far - near + m, 0.0)
    return total / len(live)


def random_batch(rng, size, dim):
    n_live = rng.integers(2, size)  # leaves >= 1 spoof
    labels = np.array([0] * n_live + [1] * (size - n_live))
    rng.shuffle(labels)
    return rng.normal(size=(size, dim)), labels


# -- reconstruction-style losses --------------------------------------------


def test_l_live_examples():
    x = np.random.default_rng(0).uniform(size=(2, 3, 4, 4))
    assert l_live(Tensor(x), Tensor(x)).item() == 0.0
    assert l_live(Tensor(np.ones((2, 3, 4, 4))), Tensor(np.zeros((2, 3, 4, 4)))).item() == 1.0
    y = np.random.default_rng(1).uniform(size=x.shape)
    acc = 0.0
    for v in (x - y).ravel():
        acc += v * v
    assert abs(l_live(Tensor(x), Tensor(y)).item() - acc / (2 * 48)) < 1e-12
    with pytest.raises(ShapeError):
        l_live(Tensor(x), Tensor(x[:1]))


def test_l_recon_same_formula():
    rng = np.random.default_rng(2)
    x, y = rng.uniform(size=(3, 3, 4, 4)), rng.uniform(size=(3, 3, 4, 4))
    assert l_recon(Tensor(x), Tensor(x)).item() == 0.0
    assert l_recon(Tensor(x), Tensor(y)).item() == l_live(Tensor(x), Tensor(y)).item()
    assert abs(l_recon(Tensor(x), Tensor(y)).item() - float(np.sum((x - y) ** 2)) / x.size) < 1e-12


def test_adversarial_examples():
    assert l_gen(Tensor(np.ones(4))).item() == 0.0
    assert l_gen(Tensor(np.zeros(4))).item() == 1.0
    assert l_gen(Tensor([0.5, 0.25])).item() == 0.40625
    assert l_dis(Tensor(np.ones(3)), Tensor(np.zeros(3))).item() == 0.0
    assert l_dis(Tensor(np.zeros(3)), Tensor(np.ones(3))).item() == 2.0
    rng = np.random.default_rng(3)
    r, f = rng.uniform(size=5), rng.uniform(size=7)
    ref = sum((v - 1) ** 2 for v in r) / 5 + sum(v * v for v in f) / 7
    assert abs(l_dis(Tensor(r), Tensor(f)).item() - ref) < 1e-12
    with pytest.raises(ValueError):
        l_gen(Tensor(np.zeros(0)))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=8), st.lists(st.floats(0, 1), min_size=1, max_size=8))
def test_l_dis_complement_symmetry(real, fake):
    r, f = np.array(real), np.array(fake)
    a = l_dis(Tensor(r), Tensor(f)).item()
    b = l_dis(Tensor(1 - f), Tensor(1 - r)).item()
    assert abs(a - b) < 1e-12


# -- triplets ---------------------------------------------------------------


def test_triplet_degenerate_and_separated():
    labels = [0, 0, 0, 1, 1]
    same = Tensor(np.ones((5, 3)))
    assert triplet_normal(BatchFeatures(same, labels), 0.2).item() == pytest.approx(0.2, abs=1e-15)
    assert triplet_hard(BatchFeatures(same, labels), 0.5).item() == pytest.approx(0.5, abs=1e-15)
    sep = np.zeros((5, 3))
    sep[3:] = 10.0
    assert triplet_normal(BatchFeatures(Tensor(sep), labels), 0.2).item() == 0.0
    assert triplet_hard(BatchFeatures(Tensor(sep), labels), 0.5).item() == 0.0


def test_triplet_insufficient_samples():
    with pytest.raises(InsufficientSamplesError):
        triplet_normal(BatchFeatures(Tensor(np.ones((3, 2))), [0, 1, 1]), 0.2)
    with pytest.raises(InsufficientSamplesError):
        triplet_hard(BatchFeatures(Tensor(np.ones((3, 2))), [0, 0, 0]), 0.2)


def test_triplet_random_vs_enumeration():
    rng = np.random.default_rng(4)
    f, y = random_batch(rng, 6, 3)
    assert abs(triplet_normal(BatchFeatures(Tensor(f), y), 0.7).item() - oracle_normal(f, y, 0.7)) <= 1e-10
    f, y = random_batch(rng, 8, 3)
    assert abs(triplet_hard(BatchFeatures(Tensor(f), y), 0.9).item() - oracle_hard(f, y, 0.9)) <= 1e-10
    assert abs(
        triplet_normal(BatchFeatures(Tensor(f), y), 0.7, positive_only=False).item()
        - oracle_normal(f, y, 0.7, positive_only=False)
    ) <= 1e-10


@settings(max_examples=60, deadline=None)
@given(size=st.integers(3, 10), dim=st.integers(1, 4), seed=st.integers(0, 2**31), shift=st.floats(-5, 5))
def test_triplet_permutation_and_translation_invariance(size, dim, seed, shift):
    rng = np.random.default_rng(seed)
    f, y = random_batch(rng, size, dim)
    perm = rng.permutation(size)
    base_n = triplet_normal(BatchFeatures(Tensor(f), y), 0.5).item()
    base_h = triplet_hard(BatchFeatures(Tensor(f), y), 0.5).item()
    for g, lab in ((f[perm], y[perm]), (f + shift, y)):
        assert triplet_normal(BatchFeatures(Tensor(g), lab), 0.5).item() == pytest.approx(base_n, abs=1e-9)
        assert triplet_hard(BatchFeatures(Tensor(g), lab), 0.5).item() == pytest.approx(base_h, abs=1e-9)


def test_l_t_composition():
    labels = [0, 0, 1, 1]
    cfg = TripletConfig(alpha=0.2, margin=0.5)
    same = [BatchFeatures(Tensor(np.zeros((4, d))), labels) for d in (4, 2, 1)]
    assert l_t(same, cfg).item() == pytest.approx(3 * (0.2 + 0.5))
    assert l_t(same, cfg, normal_only=True).item() == pytest.approx(3 * 0.2)
    sep = np.zeros((4, 2))
    sep[2:] = 5.0
    assert l_t([BatchFeatures(Tensor(sep), labels)] * 3, cfg).item() == 0.0
    rng = np.random.default_rng(5)
    layers = [random_batch(rng, 7, d) for d in (3, 2, 1)]
    want = sum(oracle_normal(f, y, 0.2) + oracle_hard(f, y, 0.5) for f, y in layers)
    got = l_t([BatchFeatures(Tensor(f), y) for f, y in layers], cfg).item()
    assert abs(got - want) < 1e-10
    with pytest.raises(ValueError):
        l_t(same[:2], cfg)


def test_triplet_config_validation():
    with pytest.raises(ValueError):
        TripletConfig(alpha=0.0)
    with pytest.raises(ValueError):
        TripletConfig(margin=-1.0)


# -- spoof-map and classifier losses ----------------------------------------


def test_l_r_examples():
    assert l_r(Tensor(np.zeros((2, 1, 4, 4)))).item() == 0.0
    assert l_r(Tensor(np.full((2, 1, 4, 4), 0.5))).item() == 0.5
    m = np.random.default_rng(6).uniform(size=(3, 1, 4, 4))
    per_sample = [sum(abs(v) for v in m[i].ravel()) / 16 for i in range(3)]
    assert abs(l_r(Tensor(m)).item() - sum(per_sample) / 3) < 1e-12
    with pytest.raises(ValueError):
        l_r(Tensor(m), labels=[0, 1, 0])


def test_l_c_examples():
    y = np.array([0.0, 1.0, 1.0, 0.0])
    assert l_c(y, Tensor(y)).item() <= -math.log(1 - BCE_EPS) + 1e-15
    assert l_c(y, Tensor(np.full(4, 0.5))).item() == pytest.approx(math.log(2), abs=1e-12)
    p = np.random.default_rng(7).uniform(0.05, 0.95, size=6)
    lab = np.array([1, 0, 1, 1, 0, 0])
    ref = -sum(t * math.log(q) + (1 - t) * math.log(1 - q) for t, q in zip(lab, p)) / 6
    assert abs(l_c(lab, Tensor(p)).item() - ref) < 1e-12
    with pytest.raises(ShapeError):
        l_c([0, 1], Tensor(p))


def test_combined_loss():
    w = LossWeights()
    assert (w.recon, w.adversarial, w.triplet, w.live_map, w.classifier) == (4, 1, 3, 5, 5)
    assert combined_loss(0, 0, 0, 0, 0, w) == 0.0
    assert combined_loss(1, 1, 1, 1, 1, w) == 18.0  # 4 + 1 + 3 + 5 + 5
    comps = np.random.default_rng(8).uniform(size=5)
    want = 4 * comps[0] + 1 * comps[1] + 3 * comps[2] + 5 * comps[3] + 5 * comps[4]
    assert abs(combined_loss(*comps, w) - want) < 1e-12
    tensors = [Tensor(c) for c in comps]
    assert combined_loss(*tensors, w).item() == combined_loss(*map(float, comps), w)
    assert combined_loss(1, None, 1, None, 1, w) == 12.0
    with pytest.raises(ValueError):
        combined_loss(1, float("nan"), 0, 0, 0, w)
    with pytest.raises(ValueError):
        LossWeights(recon=-1)


def test_losses_nonnegative_and_zero_at_minimum():
    rng = np.random.default_rng(9)
    for _ in range(20):
        x, y = rng.uniform(size=(2, 3, 4, 4)), rng.uniform(size=(2, 3, 4, 4))
        assert l_live(Tensor(x), Tensor(y)).item() >= 0
        s = rng.uniform(size=4)
        assert l_gen(Tensor(s)).item() >= 0 and l_dis(Tensor(s), Tensor(s)).item() >= 0
        f, lab = random_batch(rng, 6, 2)
        assert triplet_normal(BatchFeatures(Tensor(f), lab), 0.2).item() >= 0
        assert triplet_hard(BatchFeatures(Tensor(f), lab), 0.2).item() >= 0
        assert l_c(lab, Tensor(rng.uniform(size=6))).item() >= 0


# -- gradients of every loss through a small random network -----------------


def tiny_net(x, k):
    return T.sigmoid(T.conv2d(x, k, stride=2, padding=1))


LABELS = np.array([0, 1, 0, 1, 0])


def _features(x, k):
    h = tiny_net(x, k)
    return T.mean(h, axes=(2, 3))


LOSS_GRAD_CASES = {
    "l_live": lambda x, k, t: l_live(tiny_net(x, k), t),
    "l_recon": lambda x, k, t: l_recon(tiny_net(x, k), t),
    "l_gen": lambda x, k, t: l_gen(T.mean(tiny_net(x, k), axes=(1, 2, 3))),
    "l_dis": lambda x, k, t: l_dis(T.mean(tiny_net(x, k), axes=(1, 2, 3)), T.mean(t, axes=(1, 2, 3))),
    "triplet_normal": lambda x, k, t: triplet_normal(BatchFeatures(_features(x, k), LABELS), 0.5),
    "triplet_hard": lambda x, k, t: triplet_hard(BatchFeatures(_features(x, k), LABELS), 0.5),
    "l_t": lambda x, k, t: l_t([BatchFeatures(_features(x, k), LABELS)] * 3, TripletConfig(0.5, 0.5)),
    "l_r": lambda x, k, t: l_r(tiny_net(x, k)),
    "l_c": lambda x, k, t: l_c(LABELS, T.mean(tiny_net(x, k), axes=(1, 2, 3))),
}


@pytest.mark.parametrize("name", sorted(LOSS_GRAD_CASES))
def test_loss_gradients_match_finite_differences(name):
    rng = np.random.default_rng(10)
    x = rng.normal(size=(5, 2, 4, 4))
    k = rng.normal(size=(3, 2, 3, 3))
    target = rng.uniform(size=(5, 3, 2, 2))
    fn = LOSS_GRAD_CASES[name]
    assert max_grad_error(lambda a, b: fn(a, b, Tensor(target)), [x, k]) < 1e-4
