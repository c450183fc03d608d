"""Acceptance criteria, each checked at its stated tolerance and time budget.

The end-to-end and ablation checks train on the full desk corpus and take
about 20 minutes together on one core.
"""

import time

import numpy as np
import pytest

from helpers import (PRIMITIVES, check_primitive, desk_corpus, oracle_ground, random_binary,
                     random_instance, random_tree, small_store)
from rvgtree import diffcore as dc
from rvgtree import training as tr
from rvgtree.dataio import build_vocab
from rvgtree.diffcore import GumbelSampler
from rvgtree.encoders import UNK_ID
from rvgtree.grounding import recursive_ground
from rvgtree.treebuilder import (STOP_WORDS, ExpertTree, binarize_constituency, build_tree,
                                 prune_sentence, to_bracketed, validate_tree)

criterion = pytest.mark.criterion


@criterion("gradient suite: 20 configurations < 1e-3, primitives < 1e-4, under 2 min")
def test_gradient_suite(details):
    start = time.perf_counter()
    cases = tr.gradient_suite(20, seed=0, dim=8, max_m=6, max_n=5, tol=1e-3)
    primitives = {name: check_primitive(name, 1e-4) for name in PRIMITIVES}
    elapsed = time.perf_counter() - start
    worst = max(c.max_rel_error for c in cases)
    details(f"worst {worst:.2e}, {elapsed:.1f}s")
    assert len(cases) == 20 and all(c.m <= 6 and c.n <= 5 for c in cases)
    assert all(c.passed for c in cases), [c for c in cases if not c.passed]
    assert all(r.passed for r in primitives.values()), [k for k, r in primitives.items() if not r.passed]
    assert elapsed < 120


@criterion("structural suite: 1000 random trees valid, 100 expert trees reproduced, under 30 s")
def test_structural_suite(details):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    modes = ["eval", "train", "expert"]
    for k in range(1000):
        m = int(rng.integers(1, 11))
        store = small_store(k % 10)
        _, states, _, _ = random_instance(rng, store, m, 2)
        mode = modes[k % 3]
        kw = {}
        if mode == "train":
            kw["sampler"] = GumbelSampler(1.0, True, k)
        if mode == "expert":
            kw["expert"] = [int(rng.integers(0, m - t)) for t in range(1, m)]
        tree = build_tree(states, store.recurrent, store.merge, mode, **kw)
        validate_tree(tree)
        assert len(tree.leaves()) == m and len(tree.internal()) == m - 1
        for node in tree.internal():
            left, right = tree.nodes[node.left], tree.nodes[node.right]
            assert left.span[1] == right.span[0]
            assert node.span == (left.span[0], right.span[1])
    reproduced = 0
    for k in range(100):
        m = int(rng.integers(1, 11))
        words = [f"w{i}" for i in range(m)]
        store = small_store(k % 10)
        _, states, _, _ = random_instance(rng, store, m, 2)
        expert = random_binary(rng, words)
        tree = build_tree(states, store.recurrent, store.merge, "expert",
                          expert=ExpertTree(expert, words), tokens=words)
        reproduced += tree.structure() == expert
    elapsed = time.perf_counter() - start
    details(f"{reproduced}/100 experts, {elapsed:.1f}s")
    assert reproduced == 100
    assert elapsed < 30


@criterion("recursion oracle: 500 instances within 1e-9, under 30 s")
def test_recursion_oracle(details):
    start = time.perf_counter()
    rng = np.random.default_rng(500)
    worst = 0.0
    for k in range(500):
        m, n = int(rng.integers(1, 11)), int(rng.integers(1, 8))
        store = small_store(k % 25, spread=2.0)
        _, states, emb, X = random_instance(rng, store, m, n)
        tree = random_tree(rng, store, states, "expert" if k % 2 else "eval")
        got, _ = recursive_ground(tree, states, emb, X, store.grounding)
        want = oracle_ground(tree, store, states.value, emb.value, X)
        worst = max(worst, float(np.max(np.abs(got.value - want))))
    elapsed = time.perf_counter() - start
    details(f"max abs diff {worst:.1e}, {elapsed:.1f}s")
    assert worst < 1e-9
    assert elapsed < 30


@criterion("straight-through Gumbel-Softmax: one-hot, exact softmax, saturation, TV < 0.01")
def test_straight_through_estimator(details):
    rng = np.random.default_rng(9)
    sampler = GumbelSampler(0.7, True, 1)
    for _ in range(200):
        s = dc.gumbel_st_sample(sampler, rng.normal(size=int(rng.integers(2, 7))))
        assert set(np.unique(s.onehot.value)) <= {0.0, 1.0} and s.onehot.value.sum() == 1.0
        assert s.onehot.value[s.index] == 1.0
    for _ in range(50):
        logits = rng.normal(size=5) * 3
        s = dc.gumbel_st_sample(GumbelSampler(1.0, False), logits)
        assert np.array_equal(s.soft.value, dc.softmax(logits).value)
    for gap in (0.1, 0.5, 2.0):
        logits = np.array([0.0, gap, -1.0, gap - 0.3])
        assert dc.gumbel_st_sample(GumbelSampler(1e-3, False), logits).soft.value.max() >= 1 - 1e-6
    logits = np.array([0.0, 0.5, 1.0])
    sampler = GumbelSampler(1.0, True, 2024)
    counts = np.bincount([dc.gumbel_st_sample(sampler, logits).index for _ in range(100_000)],
                         minlength=3)
    tv = 0.5 * np.abs(counts / counts.sum() - dc.softmax(logits).value).sum()
    details(f"TV {tv:.4f}")
    assert tv < 0.01


@criterion("binarization of the five-child example")
def test_binarization():
    tree = binarize_constituency(["a", "furry", "and", "black", "dog"])
    assert tree == ((("a", "furry"), ("and", "black")), "dog")
    assert to_bracketed(tree) == "(((a furry) (and black)) dog)"


@criterion("pruning stop list and vocabulary frequency threshold")
def test_pruning_and_vocab():
    assert STOP_WORDS == {"a", "an", "another", "any", "both", "each", "either", "those", "that"}
    assert prune_sentence(["either", "the", "dog", "or", "any", "cat", "."]) == ["the", "dog", "or", "cat"]
    vocab = build_vocab([["four"]] * 4 + [["five"]] * 5 + [["six"]] * 6, min_freq=5)
    assert vocab.id("four") == UNK_ID
    assert vocab.id("five") != UNK_ID and vocab.id("six") != UNK_ID


@criterion("complexity: exactly 2(m-1) score-head families per example")
def test_complexity_counter(details):
    rng = np.random.default_rng(3)
    for k in range(200):
        m, n = int(rng.integers(1, 11)), int(rng.integers(1, 6))
        store = small_store(k % 5)
        _, states, emb, X = random_instance(rng, store, m, n)
        tree = random_tree(rng, store, states)
        _, trace = recursive_ground(tree, states, emb, X, store.grounding)
        assert trace.counter.node_heads == 2 * (m - 1)
    details("200 instances")


# -- desk-scale training ---------------------------------------------------------------


@pytest.fixture(scope="module")
def desk():
    start = time.perf_counter()
    train_ex, test_ex, vocab = desk_corpus(seed=0)
    return train_ex, test_ex, vocab, time.perf_counter() - start


def _train_variant(desk, variant):
    train_ex, test_ex, vocab, setup = desk
    start = time.perf_counter()
    cfg = tr.TrainConfig(variant=variant)
    store = tr.ParameterStore(len(vocab), cfg.emb_dim, cfg.hidden, train_ex[0].regions.shape[1], cfg.seed)
    tr.train(store, train_ex, cfg)
    acc, _ = tr.evaluate(store, test_ex, tr.configure_ablation(variant))
    return acc, setup + time.perf_counter() - start


@pytest.fixture(scope="module")
def full_run(desk):
    return _train_variant(desk, "Full")


@criterion("end to end: held-out accuracy >= 0.80 within 15 min")
def test_end_to_end(desk, full_run, details):
    train_ex, test_ex, _, _ = desk
    acc, elapsed = full_run
    details(f"accuracy {acc:.3f}, {elapsed:.0f}s, {len(train_ex)} train / {len(test_ex)} test")
    assert acc >= 0.80
    assert elapsed < 900


@criterion("ablation: Full >= each of NoNode, NoS, NoF minus 0.02")
def test_ablation(desk, full_run, details):
    full = full_run[0]
    others = {v: _train_variant(desk, v)[0] for v in ("NoNode", "NoS", "NoF")}
    details(f"Full {full:.3f}, " + ", ".join(f"{v} {a:.3f}" for v, a in others.items()))
    assert all(full >= acc - 0.02 for acc in others.values())
