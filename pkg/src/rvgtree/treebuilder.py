"""Latent binary-tree construction over a pruned sentence.

Trees are built bottom-up: every adjacent pair of the current layer is
composed with the TreeLSTM, scored against a learned query, and one pair is
selected (Gumbel straight-through while training, argmax at evaluation,
forced while imitating an expert tree). Unselected nodes are carried to the
next layer unchanged.

Expert trees come from bracketed s-expressions; multi-branch constituency
trees are binarized by pairing consecutive children left to right.
"""

from __future__ import annotations

import re
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from . import diffcore as dc
from .diffcore import GumbelSampler, Tensor
from .encoders import RecurrentParams, treelstm_merge

STOP_WORDS = frozenset({"a", "an", "another", "any", "both", "each", "either", "those", "that"})
_PUNCT = set(string.punctuation)

MODES = ("train", "eval", "expert")

# nested binary structure: a leaf is a token string, an internal node a pair
Binary = Union[str, tuple["Binary", "Binary"]]


class UnparseableExpression(ValueError):
    pass


class TreeError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    return re.findall(r"[\w']+|[^\w\s]", text.lower())


def is_punct(tok: str) -> bool:
    return bool(tok) and all(ch in _PUNCT for ch in tok)


def prune_sentence(tokens: Sequence[str]) -> list[str]:
    """Drop stop-list determiners and punctuation, keeping survivor order."""
    kept = [t for t in tokens if t.lower() not in STOP_WORDS and not is_punct(t)]
    if not kept:
        raise UnparseableExpression(f"nothing left after pruning {list(tokens)!r}")
    return kept


# -- tree types -----------------------------------------------------------


@dataclass
class TreeNode:
    id: int
    span: tuple[int, int]  # half-open range of pruned-token positions
    left: int | None = None
    right: int | None = None
    layer: int = 1  # leaves live on layer 1; a merge at layer t creates a node on t + 1
    state: Tensor | None = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None


@dataclass
class MergeRecord:
    layer: int
    position: int
    probs: Tensor  # softmax over the layer's candidate parents


@dataclass
class RvGTree:
    nodes: list[TreeNode]
    root: int
    merge_log: list[MergeRecord] = field(default_factory=list)
    tokens: list[str] | None = None

    @property
    def n_leaves(self) -> int:
        return sum(1 for n in self.nodes if n.is_leaf)

    def leaves(self) -> list[TreeNode]:
        return sorted((n for n in self.nodes if n.is_leaf), key=lambda n: n.span[0])

    def internal(self) -> list[TreeNode]:
        return [n for n in self.nodes if not n.is_leaf]

    def postorder(self) -> list[TreeNode]:
        out: list[TreeNode] = []
        stack = [(self.root, False)]
        while stack:
            nid, done = stack.pop()
            node = self.nodes[nid]
            if done or node.is_leaf:
                out.append(node)
                continue
            stack.append((nid, True))
            stack.append((node.right, False))
            stack.append((node.left, False))
        return out

    def structure(self) -> Binary:
        def rec(nid: int) -> Binary:
            n = self.nodes[nid]
            if n.is_leaf:
                return self.tokens[n.span[0]] if self.tokens else str(n.span[0])
            return (rec(n.left), rec(n.right))

        return rec(self.root)

    def spans(self) -> set[tuple[int, int]]:
        return {n.span for n in self.internal()}

    def to_bracketed(self) -> str:
        return to_bracketed(self.structure())


@dataclass
class ExpertTree:
    tree: Binary
    leaves: list[str]

    @property
    def n_leaves(self) -> int:
        return len(self.leaves)

    def merge_targets(self) -> list[int]:
        return merge_targets(self.tree)


@dataclass
class MergePolicyParams:
    query: Tensor  # scores a candidate parent state

    @classmethod
    def init(cls, rng: np.random.Generator, width: int) -> "MergePolicyParams":
        return cls(Tensor(rng.normal(0.0, 1.0 / np.sqrt(width), width), True, "merge_query"))


# -- binary-structure helpers ------------------------------------------------


def binary_leaves(tree: Binary) -> list[str]:
    if isinstance(tree, str):
        return [tree]
    return binary_leaves(tree[0]) + binary_leaves(tree[1])


def binary_spans(tree: Binary) -> set[tuple[int, int]]:
    spans: set[tuple[int, int]] = set()

    def rec(t, start):
        if isinstance(t, str):
            return start + 1
        mid = rec(t[0], start)
        end = rec(t[1], mid)
        spans.add((start, end))
        return end

    rec(tree, 0)
    return spans


def to_bracketed(tree: Binary) -> str:
    if isinstance(tree, str):
        return tree
    return f"({to_bracketed(tree[0])} {to_bracketed(tree[1])})"


def merge_targets(tree: Binary) -> list[int]:
    """Layer-by-layer merge positions that rebuild ``tree``.

    At each layer the leftmost adjacent pair that forms a node of the tree
    is merged.
    """
    wanted = binary_spans(tree)
    layer = [(i, i + 1) for i in range(len(binary_leaves(tree)))]
    targets = []
    while len(layer) > 1:
        for j in range(len(layer) - 1):
            joined = (layer[j][0], layer[j + 1][1])
            if joined in wanted:
                targets.append(j)
                layer[j:j + 2] = [joined]
                break
        else:  # pragma: no cover - a binary tree always has a mergeable pair
            raise TreeError("expert tree has no mergeable adjacent pair")
    return targets


# -- s-expressions and binarization -------------------------------------------


def parse_sexpr(text: str):
    """Parse one parenthesized expression into nested lists of token strings."""
    toks = text.replace("(", " ( ").replace(")", " ) ").split()
    if not toks:
        raise TreeError("empty tree")
    pos = 0

    def rec():
        nonlocal pos
        tok = toks[pos]
        pos += 1
        if tok == ")":
            raise TreeError(f"unexpected ')' at token {pos}")
        if tok != "(":
            return tok
        items = []
        while True:
            if pos >= len(toks):
                raise TreeError("unbalanced brackets: missing ')'")
            if toks[pos] == ")":
                pos += 1
                break
            items.append(rec())
        if not items:
            raise TreeError("empty bracket pair")
        return items

    out = rec()
    if pos != len(toks):
        raise TreeError(f"trailing tokens after tree: {' '.join(toks[pos:])}")
    return out


def strip_labels(tree):
    """Drop constituent labels from a labeled ``(NP (DT a) (NN dog))`` parse."""
    if isinstance(tree, str):
        return tree
    label, *rest = tree
    if not isinstance(label, str) or not rest:
        raise TreeError(f"expected a labeled constituent, got {tree!r}")
    if len(rest) == 1 and isinstance(rest[0], str):
        return rest[0]
    return [strip_labels(c) for c in rest]


def binarize_constituency(tree) -> Binary:
    """Binarize a multi-branch tree (nested lists, string leaves).

    Children are paired left to right, an odd last child stands alone, and
    the pairing repeats on the new level until two nodes remain.
    """
    if isinstance(tree, str):
        return tree
    if isinstance(tree, tuple) and len(tree) == 2:
        tree = list(tree)
    if not tree:
        raise TreeError("empty tree")
    level = [binarize_constituency(c) for c in tree]
    while len(level) > 2:
        grouped = [(level[i], level[i + 1]) for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            grouped.append(level[-1])
        level = grouped
    return level[0] if len(level) == 1 else (level[0], level[1])


def parse_binary(text: str) -> Binary:
    tree = parse_sexpr(text)

    def rec(t):
        if isinstance(t, str):
            return t
        if len(t) == 1:
            return rec(t[0])
        if len(t) != 2:
            raise TreeError(f"node with {len(t)} children in a binary tree")
        return (rec(t[0]), rec(t[1]))

    return rec(tree)


def load_expert_trees(path: str | Path,
                      expressions: dict[str, Sequence[str]] | None = None) -> dict[str, ExpertTree]:
    """Read ``<id>\\t<bracketed binary tree>`` lines.

    With ``expressions`` (id -> pruned tokens) every tree's leaves are checked
    against its expression.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"expert tree file not found: {path}")
    trees: dict[str, ExpertTree] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise TreeError(f"{path}:{lineno}: expected '<id>\\t<tree>'")
            eid, text = line.split("\t", 1)
            try:
                tree = parse_binary(text)
            except TreeError as exc:
                raise TreeError(f"{path}:{lineno}: {exc}") from None
            leaves = binary_leaves(tree)
            if expressions is not None:
                want = expressions.get(eid)
                if want is None:
                    raise TreeError(f"{path}:{lineno}: unknown expression id {eid!r}")
                if list(want) != leaves:
                    raise TreeError(f"{path}:{lineno}: leaves {leaves} do not match expression {list(want)}")
            trees[eid] = ExpertTree(tree, leaves)
    return trees


def write_expert_trees(path: str | Path, trees: dict[str, Binary]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for eid, tree in trees.items():
            fh.write(f"{eid}\t{to_bracketed(tree)}\n")


# -- construction ---------------------------------------------------------


def candidate_parents(layer: Tensor, recurrent: RecurrentParams,
                      merge: MergePolicyParams) -> tuple[Tensor, Tensor]:
    """Compose every adjacent pair; returns (candidate states, merge logits)."""
    k = layer.shape[0]
    if k < 2:
        raise ValueError(f"need at least two nodes to merge, got {k}")
    cand = treelstm_merge(layer[:-1], layer[1:], recurrent)
    return cand, cand @ merge.query


def candidate_scores(layer: Tensor, recurrent: RecurrentParams, merge: MergePolicyParams) -> Tensor:
    return dc.softmax(candidate_parents(layer, recurrent, merge)[1])


def select_merge(logits: Tensor, mode: str, sampler: GumbelSampler | None = None,
                 target: int | None = None, mask=None) -> tuple[int, Tensor, Tensor]:
    """Pick a candidate; returns (position, selection vector, softmax probs).

    In ``train`` mode the selection vector is the straight-through Gumbel
    one-hot. In ``eval`` and ``expert`` modes it is a constant one-hot.
    """
    n = logits.shape[0]
    if mode == "train":
        if sampler is None:
            raise ValueError("train mode needs a GumbelSampler")
        s = dc.gumbel_st_sample(sampler, logits, mask)
        return s.index, s.onehot, Tensor(dc.softmax_values(logits.value, mask))
    probs = dc.softmax(logits, mask if mode == "eval" else None)
    if mode == "eval":
        pos = int(np.argmax(probs.value))
    elif mode == "expert":
        if target is None or not 0 <= target < n:
            raise ValueError(f"expert target {target} out of range for {n} candidates")
        pos = target
    else:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    return pos, Tensor(dc.onehot(pos, n)), probs


def _candidate_mask(blocked: list[bool]):
    mask = np.array([not (blocked[j] or blocked[j + 1]) for j in range(len(blocked) - 1)])
    return None if mask.all() or not mask.any() else mask


def build_tree(leaf_states: Tensor, recurrent: RecurrentParams, merge: MergePolicyParams,
               mode: str = "eval", sampler: GumbelSampler | None = None,
               expert: ExpertTree | Sequence[int] | None = None,
               unk: Sequence[bool] | None = None,
               tokens: Sequence[str] | None = None) -> RvGTree:
    """Merge leaf states bottom-up until one root remains.

    ``unk`` flags leaves holding the unknown-word token: candidates touching
    an unmerged unk leaf are masked out of selection while any alternative
    exists, so unknown words are merged last.
    """
    m = leaf_states.shape[0]
    if m < 1:
        raise ValueError("cannot build a tree over zero leaves")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    targets = None
    if mode == "expert":
        if expert is None:
            raise ValueError("expert mode needs an expert tree")
        targets = expert.merge_targets() if isinstance(expert, ExpertTree) else list(expert)
        if len(targets) != m - 1:
            raise TreeError(f"expert tree has {len(targets) + 1} leaves, sentence has {m}")

    nodes = [TreeNode(i, (i, i + 1), state=leaf_states[i]) for i in range(m)]
    current = list(range(m))
    blocked = list(unk) if unk is not None else [False] * m
    layer = leaf_states
    log: list[MergeRecord] = []
    for t in range(1, m):
        k = len(current)
        cand, logits = candidate_parents(layer, recurrent, merge)
        pos, sel, probs = select_merge(
            logits, mode, sampler, targets[t - 1] if targets else None, _candidate_mask(blocked))
        layer = _advance_layer(layer, cand, sel, k)
        left, right = nodes[current[pos]], nodes[current[pos + 1]]
        parent = TreeNode(len(nodes), (left.span[0], right.span[1]), left.id, right.id,
                          layer=t + 1, state=layer[pos])
        nodes.append(parent)
        current[pos:pos + 2] = [parent.id]
        blocked[pos:pos + 2] = [False]
        log.append(MergeRecord(t, pos, probs))
    return RvGTree(nodes, current[0], log, list(tokens) if tokens is not None else None)


def _advance_layer(layer: Tensor, cand: Tensor, sel: Tensor, k: int) -> Tensor:
    """Next layer: states left of the merge kept, the merge, states right shifted.

    Written as ``L*left + sel*cand + R*right`` with ``L``/``R`` derived from the
    selection vector so the straight-through gradient reaches every candidate.
    """
    n = k - 1
    tri = np.tril(np.ones((n, n)))
    done = dc.matmul(tri, sel)  # running sum of the selection
    keep_left = dc.sub(np.ones(n), done)
    keep_right = dc.sub(done, sel)
    col = lambda v: dc.reshape(v, (n, 1))  # noqa: E731
    out = dc.add(dc.mul(col(keep_left), layer[:-1]), dc.mul(col(sel), cand))
    return dc.add(out, dc.mul(col(keep_right), layer[1:]))


def merge_nll(tree: RvGTree) -> Tensor:
    """Mean over layers of -log p(chosen merge); 0 for single-leaf trees."""
    if not tree.merge_log:
        return Tensor(0.0)
    terms = [dc.log(rec.probs[rec.position]) for rec in tree.merge_log]
    return dc.scale(dc.sum(dc.stack(terms)), -1.0 / len(terms))


def validate_tree(tree: RvGTree, tokens: Sequence[str] | None = None) -> None:
    """Raise TreeError unless ``tree`` satisfies every structural invariant."""
    leaves = tree.leaves()
    m = len(leaves)
    internal = tree.internal()
    if len(internal) != m - 1:
        raise TreeError(f"{len(internal)} internal nodes for {m} leaves")
    if [l.span for l in leaves] != [(i, i + 1) for i in range(m)]:
        raise TreeError("leaves are not in token order")
    if tree.nodes[tree.root].span != (0, m):
        raise TreeError(f"root span {tree.nodes[tree.root].span} does not cover (0, {m})")
    seen_children = set()
    for n in internal:
        l, r = tree.nodes[n.left], tree.nodes[n.right]
        if l.span[1] != r.span[0] or n.span != (l.span[0], r.span[1]):
            raise TreeError(f"node {n.id} span {n.span} is not its children's concatenation")
        if n.left in seen_children or n.right in seen_children:
            raise TreeError(f"node {n.id} reuses a child")
        seen_children.update((n.left, n.right))
    if len(tree.merge_log) != m - 1:
        raise TreeError(f"merge log has {len(tree.merge_log)} entries, expected {m - 1}")
    for t, rec in enumerate(tree.merge_log, 1):
        if rec.layer != t or not 0 <= rec.position < m - t:
            raise TreeError(f"merge {t} at position {rec.position} is not adjacent in its layer")
    if tokens is not None and tree.tokens is not None and list(tokens) != tree.tokens:
        raise TreeError("leaf tokens differ from the pruned sentence")
