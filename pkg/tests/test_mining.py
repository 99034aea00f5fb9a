import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from solar import oracles
from solar.errors import ValidationError
from solar.mining import (DESK_MINING, LabeledPool, MinedTriplet, MiningConfig, build_triplets,
                          mine_epoch, mine_hard_negatives, sample_anchors)


def unit_rows(g, n, d):
    v = g.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_config_defaults():
    cfg = MiningConfig()
    assert (cfg.anchors_per_epoch, cfg.negatives_per_anchor, cfg.pool_size) == (2000, 5, 20000)
    assert (DESK_MINING.anchors_per_epoch, DESK_MINING.negatives_per_anchor, DESK_MINING.pool_size) == (64, 5, 512)


def test_config_rejects_zero():
    with pytest.raises(ValidationError):
        MiningConfig(negatives_per_anchor=0)


def test_pool_validation(rng):
    with pytest.raises(ValidationError):
        LabeledPool(unit_rows(rng, 3, 2), [0, 1, 2], ["a", "a", "b"])
    with pytest.raises(ValidationError):
        LabeledPool(2 * unit_rows(rng, 2, 2), [0, 1], ["a", "b"])
    with pytest.raises(ValidationError):
        LabeledPool(unit_rows(rng, 2, 2), [0], ["a", "b"])


def test_anchor_pairs_same_class():
    labels = np.repeat(np.arange(4), 2)
    pairs = sample_anchors(labels, 4, np.random.default_rng(0))
    assert len(pairs) == 4
    for a, p in pairs:
        assert a != p and labels[a] == labels[p]
    assert len({a for a, _ in pairs}) == 4


def test_anchor_sampling_deterministic():
    labels = np.repeat(np.arange(5), 4)
    assert sample_anchors(labels, 7, 11) == sample_anchors(labels, 7, 11)


def test_anchor_saturation_warns():
    labels = np.array([0, 0, 1, 1, 2, 2, 3, 4])  # 3 and 4 are singletons
    with pytest.warns(UserWarning, match="only 6"):
        pairs = sample_anchors(labels, 10, np.random.default_rng(0))
    assert len(pairs) == 6


def test_own_class_excluded():
    desc = np.array([[1.0, 0], [1.0, 0], [0, 1.0], [-1.0, 0]])
    pool = LabeledPool(desc, [7, 7, 1, 2], ["a", "b", "c", "d"])
    assert mine_hard_negatives(np.array([1.0, 0]), 7, pool, 2) == [2, 3]


def test_one_negative_per_class():
    desc = np.array([[1.0, 0], [0.99, np.sqrt(1 - 0.99**2)], [0, 1.0]])
    pool = LabeledPool(desc, [1, 1, 2], ["x", "y", "z"])
    assert mine_hard_negatives(np.array([1.0, 0]), 0, pool, 2) == [0, 2]


def test_ties_break_on_item_id():
    desc = np.array([[0, 1.0], [0, 1.0], [0, -1.0]])
    pool = LabeledPool(desc, [1, 2, 3], ["zeta", "alpha", "mid"])
    # all three sit at distance sqrt(2) from the anchor; ids decide
    got = mine_hard_negatives(np.array([1.0, 0]), 0, pool, 3)
    assert got == [1, 2, 0]
    assert got == oracles.hard_negatives(np.array([1.0, 0]), 0, desc, [1, 2, 3], ["zeta", "alpha", "mid"], 3)


def test_shortfall_error_message(rng):
    pool = LabeledPool(unit_rows(rng, 6, 3), [0, 1, 1, 2, 2, 3], list("abcdef"))
    with pytest.raises(ValidationError, match="short by 2"):
        mine_hard_negatives(unit_rows(rng, 1, 3)[0], 0, pool, 5)


def test_default_k_five(rng):
    pool = LabeledPool(unit_rows(rng, 40, 4), np.arange(40) % 8, [f"i{i}" for i in range(40)])
    negs = mine_hard_negatives(unit_rows(rng, 1, 4)[0], 0, pool, MiningConfig().negatives_per_anchor)
    assert len(negs) == 5


def test_matches_oracle_pool_200(rng):
    desc = unit_rows(rng, 200, 8)
    classes = rng.integers(0, 30, size=200)
    ids = [f"img{i:03d}" for i in rng.permutation(200)]
    pool = LabeledPool(desc, classes, ids)
    for _ in range(20):
        a, c = unit_rows(rng, 1, 8)[0], int(rng.integers(0, 30))
        assert mine_hard_negatives(a, c, pool, 5) == oracles.hard_negatives(a, c, desc, classes, ids, 5)


def test_build_triplets_counts():
    five = build_triplets(0, 1, [5, 6, 7, 8, 9], "c0", ["c1", "c2", "c3", "c4", "c5"])
    assert len(five) == 5 and all(isinstance(t, MinedTriplet) for t in five)
    one = build_triplets(3, 4, [8], "c0", ["c9"])
    assert one == [MinedTriplet(3, 4, 8, "c0", "c9")]


def test_build_triplets_fields():
    t = build_triplets(10, 11, [20, 30], 1, [2, 3])
    assert [(x.anchor, x.positive, x.negative, x.negative_class) for x in t] == [(10, 11, 20, 2), (10, 11, 30, 3)]
    with pytest.raises(ValidationError):
        build_triplets(0, 1, [], 0, [])


def epoch_fixture(seed):
    g = np.random.default_rng(seed)
    labels = np.repeat(np.arange(10), 6)
    desc = unit_rows(g, len(labels), 6)
    ids = [f"item{i:03d}" for i in range(len(labels))]
    return desc, labels, ids


def test_epoch_deterministic():
    desc, labels, ids = epoch_fixture(0)
    cfg = MiningConfig(anchors_per_epoch=12, pool_size=40, seed=3)
    assert mine_epoch(desc, labels, ids, cfg, 2) == mine_epoch(desc, labels, ids, cfg, 2)
    assert mine_epoch(desc, labels, ids, cfg, 2) != mine_epoch(desc, labels, ids, cfg, 3)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 20), st.integers(1, 5))
def test_epoch_negatives_valid(seed, epoch, k):
    desc, labels, ids = epoch_fixture(seed)
    cfg = MiningConfig(anchors_per_epoch=16, negatives_per_anchor=k, pool_size=50, seed=seed)
    for group in mine_epoch(desc, labels, ids, cfg, epoch):
        assert len(group) == k
        classes = [t.negative_class for t in group]
        assert len(set(classes)) == k
        for t in group:
            assert labels[t.negative] != labels[t.anchor] == labels[t.positive]
            assert t.anchor != t.positive


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_restricted_candidates(seed):
    desc, labels, ids = epoch_fixture(seed)
    cand = np.flatnonzero(labels < 7)
    cfg = MiningConfig(anchors_per_epoch=10, pool_size=30, seed=seed)
    for group in mine_epoch(desc, labels, ids, cfg, 0, candidates=cand):
        for t in group:
            assert labels[t.anchor] < 7 and labels[t.negative] < 7
