"""Shared fixtures for the test suite, including an independent grounding evaluator."""

from __future__ import annotations

import numpy as np

from rvgtree import dataio
from rvgtree import diffcore as dc
from rvgtree.dataio import Example
from rvgtree.encoders import bilstm_leaf_states, embed_tokens
from rvgtree.grounding import ScoreTerms
from rvgtree.training import ParameterStore
from rvgtree.treebuilder import (ExpertTree, RvGTree, binarize_constituency, binary_leaves,
                                 build_tree)


def small_store(seed: int = 0, vocab: int = 12, dim: int = 8, region_dim: int | None = None,
                spread: float = 1.0) -> ParameterStore:
    """A tiny model; ``spread`` rescales every parameter to make scores less flat."""
    store = ParameterStore(vocab, dim, dim, region_dim or dim, seed)
    if spread != 1.0:
        for t in store.named().values():
            t.value *= spread
    return store


def random_instance(rng: np.random.Generator, store: ParameterStore, m: int, n: int):
    """Leaf states, word embeddings and regions for a random ``m``-token sentence."""
    ids = rng.integers(2, store.dims["vocab_size"], size=m)
    emb, _ = embed_tokens(ids, store.embedding)
    states = bilstm_leaf_states(emb, store.recurrent)
    X = rng.normal(size=(n, store.dims["region_dim"]))
    return ids, states, emb, X


def random_tree(rng: np.random.Generator, store: ParameterStore, states, mode: str = "eval") -> RvGTree:
    """Build a tree over ``states``; in expert mode the merge order is random."""
    m = states.shape[0]
    if mode == "expert":
        targets = [int(rng.integers(0, m - t)) for t in range(1, m)]
        return build_tree(states, store.recurrent, store.merge, "expert", expert=targets)
    return build_tree(states, store.recurrent, store.merge, mode)


def random_binary(rng: np.random.Generator, words: list[str]):
    """Uniformly random bracketing of ``words`` by recursive split points."""
    if len(words) == 1:
        return words[0]
    k = int(rng.integers(1, len(words)))
    return (random_binary(rng, words[:k]), random_binary(rng, words[k:]))


# -- independent post-order evaluator ----------------------------------------


def _unit_rows(a: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    a = np.atleast_2d(a)
    out = np.zeros_like(a)
    for i, row in enumerate(a):
        norm = np.sqrt(np.sum(row * row))
        if norm > eps:
            out[i] = row / norm
    return out


def _soft(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - np.max(v))
    return e / np.sum(e)


def oracle_ground(tree: RvGTree, store: ParameterStore, states: np.ndarray, words: np.ndarray,
                  X: np.ndarray, terms: ScoreTerms = ScoreTerms(),
                  offsets: dict[int, float] | None = None) -> np.ndarray:
    """Root scores by an explicit-stack post-order walk, eval mode, numpy only.

    Written from the scoring rules directly: the pairwise head multiplies the
    full concatenation ``[x_i, x_ctx]`` by its projection, roles come from
    comparing the role query against both children, and every head is a dot
    product with a unit-normalized elementwise product. ``offsets`` adds a
    constant to the in-node single score of the given internal nodes.
    """
    offsets = offsets or {}
    g = store.grounding
    S2, s1 = g.heads.single_proj.value, g.heads.single_out.value
    P2, p1 = g.heads.pair_proj.value, g.heads.pair_out.value
    role_q = g.role.query.value
    att_s, att_p = g.attention.single.value, g.attention.pair.value
    n = X.shape[0]

    def single(y):
        return np.array([s1 @ _unit_rows((X[i] @ S2) * y)[0] for i in range(n)])

    def pair(ctx, y):
        return np.array([p1 @ _unit_rows((np.concatenate([X[i], ctx]) @ P2) * y)[0] for i in range(n)])

    def lang(span):
        a, b = span
        if b - a == 1:
            return words[a], words[a]
        ws = _soft(states[a:b] @ att_s)
        wp = _soft(states[a:b] @ att_p)
        return ws @ words[a:b], wp @ words[a:b]

    nodes = tree.nodes
    root = nodes[tree.root]
    if root.is_leaf:
        return single(words[root.span[0]])
    full: dict[int, np.ndarray] = {}
    stack = [(tree.root, False)]
    while stack:
        nid, expanded = stack.pop()
        node = nodes[nid]
        if node.is_leaf:
            continue
        if not expanded:
            stack += [(nid, True), (node.right, False), (node.left, False)]
            continue
        left, right = nodes[node.left], nodes[node.right]
        vl, vr = left.state.value, right.state.value
        feat, score = (left, right) if role_q @ vl >= role_q @ vr else (right, left)
        y_s, y_p = lang(node.span)
        total = np.zeros(n)
        if terms.single:
            total = total + single(y_s) + offsets.get(nid, 0.0)
        if terms.pair:
            f_scores = single(words[feat.span[0]]) if feat.is_leaf else full[feat.id]
            total = total + pair(_soft(f_scores) @ X, y_p)
        if terms.accumulate:
            if score.is_leaf:
                if terms.leaf_scores:
                    total = total + single(words[score.span[0]])
            else:
                total = total + full[score.id]
        full[nid] = total
    return full[tree.root]


# -- desk-scale corpus ---------------------------------------------------------


def desk_corpus(seed: int = 0, n_scenes: int = 3000, max_len: int = 10, min_freq: int = 5):
    """Train/test examples (2000/500 scenes at the default size) and the vocabulary."""
    data = dataio.generate_corpus(seed, dataio.CorpusConfig(n_scenes=n_scenes, split=(2 / 3, 1 / 6, 1 / 6)))
    prune = lambda s: dataio.prune_sentence(dataio.tokenize(s.expression.text))  # noqa: E731
    vocab = dataio.build_vocab([prune(s) for s in data["train"]], min_freq)

    def examples(samples):
        out = []
        for s in samples:
            toks = prune(s)
            tree = binarize_constituency(s.tree)
            out.append(Example(s.expression.id, toks, vocab.encode(toks, max_len), s.scene.features,
                               s.expression.gt, s.scene.boxes, ExpertTree(tree, binary_leaves(tree))))
        return out

    return examples(data["train"]), examples(data["test"]), vocab


# -- per-primitive gradient cases ----------------------------------------------

_RNG = np.random.default_rng(7)
_A = _RNG.normal(size=(3, 4))
_B = _RNG.normal(size=(3, 4))
_M = _RNG.normal(size=(4, 2))
_V = _RNG.normal(size=4)
_W = _RNG.normal(size=(3, 2))

PRIMITIVES = {
    "add": (lambda a, b: dc.add(a, b), [_A, _B]),
    "add_broadcast": (lambda a, v: dc.add(a, v), [_A, _V]),
    "sub": (lambda a, b: dc.sub(a, b), [_A, _B]),
    "mul": (lambda a, b: dc.mul(a, b), [_A, _B]),
    "mul_broadcast": (lambda a, v: dc.mul(a, v), [_A, _V]),
    "neg": (lambda a: dc.neg(a), [_A]),
    "scale": (lambda a: dc.scale(a, -2.5), [_A]),
    "tanh": (lambda a: dc.tanh(a), [_A]),
    "sigmoid": (lambda a: dc.sigmoid(a), [_A]),
    "exp": (lambda a: dc.exp(a), [_A]),
    "log": (lambda a: dc.log(dc.add(dc.mul(a, a), 0.5)), [_A]),
    "matmul_mm": (lambda a, m: dc.matmul(a, m), [_A, _M]),
    "matmul_mv": (lambda a, v: dc.matmul(a, v), [_A, _V]),
    "matmul_vm": (lambda v, m: dc.matmul(v, m), [_V, _M]),
    "matmul_vv": (lambda u, v: dc.matmul(u, v), [_V, _V * 0.5 + 1]),
    "concat": (lambda a, b: dc.concat([a, b], axis=-1), [_A, _B]),
    "stack": (lambda a, b: dc.stack([a, b]), [_A, _B]),
    "take_slice": (lambda a: a[1:, :3], [_A]),
    "take_rows": (lambda a: dc.take(a, [0, 2, 0]), [_A]),
    "reshape": (lambda a: dc.reshape(a, (4, 3)), [_A]),
    "sum_all": (lambda a: dc.sum(a), [_A]),
    "sum_axis": (lambda a: dc.sum(a, axis=0), [_A]),
    "softmax": (lambda a: dc.softmax(a), [_A]),
    "softmax_masked": (lambda v: dc.softmax(v, mask=[True, False, True, True]), [_V]),
    "log_softmax": (lambda a: dc.log_softmax(a), [_A]),
    "l2_normalize": (lambda a: dc.l2_normalize(a), [_A]),
}


def check_primitive(name: str, tol: float = 1e-4):
    """Central-difference report for one entry of ``PRIMITIVES`` under a random linear readout."""
    fn, values = PRIMITIVES[name]
    inputs = [dc.Tensor(v.copy(), requires_grad=True, name=f"in{i}") for i, v in enumerate(values)]
    weights = np.random.default_rng(3).normal(size=fn(*inputs).shape)

    def f():
        out = fn(*inputs)
        return dc.sum(dc.mul(out, weights)) if out.shape else out

    return dc.check_gradients(f, inputs, eps=1e-5, tol=tol)
