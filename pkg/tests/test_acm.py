import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stagedtrain.acm import (
    ActivationSet,
    acm,
    acm_of_model,
    class_radius,
    cluster_center,
    cluster_stats,
    dump_activations,
    inter_class_distance,
    intra_class_distance,
    load_activations,
    penultimate_activations,
)
from stagedtrain.errors import CorruptPayload, DegenerateCluster, EmptyClass, SameClass, TooFewClasses
from stagedtrain.nn import desknet, forward

from oracles import center, dist, naive_acm

PAIR = {0: np.array([[0.0, 0.0], [0.0, 2.0]]), 1: np.array([[10.0, 0.0], [10.0, 2.0]])}


def random_set(rng, k=None, n=None, d=None):
    k = k or int(rng.integers(2, 11))
    d = d or int(rng.integers(1, 17))
    sizes = [int(rng.integers(2, (n or 20) + 1)) for _ in range(k)]
    return ActivationSet({c: rng.normal(loc=rng.normal(0, 3, d), size=(m, d)) for c, m in enumerate(sizes)})


def test_cluster_center_examples():
    assert cluster_center({0: np.array([[1.5, -2.0]])}, 0).tolist() == [1.5, -2.0]
    assert cluster_center(PAIR, 0).tolist() == [0.0, 1.0]


def test_cluster_center_vs_naive_sum():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(100, 7))
    assert np.allclose(cluster_center({0: a}, 0), center(a.tolist()), atol=1e-6)


def test_intra_and_radius_examples():
    single = {0: np.array([[3.0, 4.0]])}
    assert intra_class_distance(single, 0) == 0
    assert class_radius(single, 0) == 0
    assert intra_class_distance(PAIR, 0) == 1
    assert class_radius(PAIR, 0) == 1


def test_intra_and_radius_vs_loops():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(50, 5))
    c = center(a.tolist())
    ds = [dist(p, c) for p in a.tolist()]
    assert intra_class_distance({0: a}, 0) == pytest.approx(sum(ds) / len(ds), abs=1e-6)
    assert class_radius({0: a}, 0) == pytest.approx(max(ds), abs=1e-6)


def test_inter_class_examples():
    assert inter_class_distance(PAIR, 0, 1) == 10
    dup = {0: np.array([[1.0, 1.0], [5.0, 5.0]]), 1: np.array([[1.0, 1.0]])}
    assert inter_class_distance(dup, 0, 1) == 0
    with pytest.raises(SameClass):
        inter_class_distance(PAIR, 1, 1)


def test_inter_class_symmetric():
    rng = np.random.default_rng(2)
    s = random_set(rng, k=3)
    assert inter_class_distance(s, 0, 2) == inter_class_distance(s, 2, 0)


def test_empty_class_errors():
    s = {0: np.zeros((0, 2)), 1: np.ones((2, 2))}
    for fn in (cluster_center, intra_class_distance, class_radius):
        with pytest.raises(EmptyClass):
            fn(s, 0)
    with pytest.raises(EmptyClass):
        inter_class_distance(s, 0, 1)
    with pytest.raises(EmptyClass):
        inter_class_distance(s, 1, 5)


def test_acm_hand_case():
    assert acm(PAIR) == 5.0


def test_acm_errors():
    with pytest.raises(TooFewClasses):
        acm({0: np.ones((3, 2))})
    with pytest.raises(DegenerateCluster):
        acm({0: np.ones((1, 2)), 1: np.zeros((1, 2))})


def test_acm_vs_oracle_random():
    rng = np.random.default_rng(3)
    for _ in range(10):
        s = random_set(rng, n=30)
        assert acm(s) == pytest.approx(naive_acm([s[c].tolist() for c in sorted(s)]), abs=1e-6)


def test_cluster_stats_invariants():
    s = random_set(np.random.default_rng(4))
    st_ = cluster_stats(s)
    assert np.all(st_.intra <= st_.radius)
    assert np.array_equal(st_.inter, st_.inter.T)


finite = st.floats(-100, 100, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), c=st.floats(0.05, 20))
def test_acm_scaling_law(seed, c):
    s = random_set(np.random.default_rng(seed))
    scaled = ActivationSet({k: v * c for k, v in s.items()})
    assert acm(scaled) == pytest.approx(acm(s) / c, rel=1e-6)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), shift=st.lists(finite, min_size=16, max_size=16))
def test_acm_rigid_motion_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    s = random_set(rng, d=16)
    q, _ = np.linalg.qr(rng.normal(size=(16, 16)))
    moved = ActivationSet({k: v @ q + np.array(shift) for k, v in s.items()})
    assert acm(moved) == pytest.approx(acm(s), rel=1e-6, abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_acm_label_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    s = random_set(rng)
    perm = rng.permutation(len(s))
    relabeled = ActivationSet({int(perm[k]): v for k, v in s.items()})
    assert acm(relabeled) == pytest.approx(acm(s), rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_sigma_never_exceeds_radius(seed):
    s = random_set(np.random.default_rng(seed))
    for c in s:
        assert intra_class_distance(s, c) <= class_radius(s, c)


def test_acm_of_untrained_model_and_determinism():
    rng = np.random.default_rng(0)
    x = rng.random((40, 3, 12, 12)).astype(np.float32)
    y = np.repeat(np.arange(4), 10)
    a = acm_of_model(desknet((3, 12, 12), 4, seed=1), x, y)
    b = acm_of_model(desknet((3, 12, 12), 4, seed=1), x, y)
    assert a > 0
    assert a == b


def test_penultimate_activations_match_forward():
    net = desknet((3, 12, 12), 3, seed=2)
    x = np.random.default_rng(1).random((7, 3, 12, 12)).astype(np.float32)
    _, acts = forward(net, x, record=True)
    got = penultimate_activations(net, x, batch_size=3)
    assert got.shape == (7, 128)
    assert np.allclose(got, acts[net.penultimate_index], rtol=1e-5, atol=1e-6)


def test_activation_dump_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    a = rng.normal(size=(9, 5)).astype(np.float32)
    y = rng.integers(0, 3, 9)
    path = dump_activations(tmp_path / "a.act", a, y, 3)
    raw = path.read_bytes()
    assert raw[:6] == b"STACT1" and len(raw) == 6 + 8 + 9 * (4 + 20)
    b, yb, k = load_activations(path)
    assert k == 3 and np.array_equal(a, b) and np.array_equal(y, yb)
    path.write_bytes(raw[:-1])
    with pytest.raises(CorruptPayload):
        load_activations(path)
