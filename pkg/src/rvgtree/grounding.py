"""Recursive grounding scores over a built tree.

Every internal node classifies its children into a feature child (which
hands up a softmax-weighted context region feature) and a score child (whose
scores are accumulated). The node's own score for region ``x_i`` is

    S(x_i) = single(x_i, y_s) + pair([x_i, x_ctx], y_p) + S_score_child(x_i)

with ``y_s``/``y_p`` attention-pooled word embeddings over the node's span.
Leaves return zero scores; a leaf acting as the feature child pools regions
with its own single-region score against its word embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import GumbelSampler, Tensor
from .treebuilder import RvGTree, TreeNode


@dataclass
class Region:
    feature: np.ndarray
    box: tuple[float, float, float, float] | None = None

    def __post_init__(self) -> None:
        self.feature = np.asarray(self.feature, dtype=float)
        if self.box is not None:
            x1, y1, x2, y2 = self.box
            if not (x2 > x1 and y2 > y1):
                raise ValueError(f"degenerate box {self.box}")


@dataclass
class NodeRoleParams:
    query: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, width: int) -> "NodeRoleParams":
        return cls(Tensor(rng.normal(0.0, 1.0 / np.sqrt(width), width), True, "role_query"))


@dataclass
class AttentionParams:
    single: Tensor
    pair: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, width: int) -> "AttentionParams":
        s = 1.0 / np.sqrt(width)
        return cls(Tensor(rng.normal(0.0, s, width), True, "att_single"),
                   Tensor(rng.normal(0.0, s, width), True, "att_pair"))


@dataclass
class ScoreHeadParams:
    single_proj: Tensor  # (d, b)
    single_out: Tensor  # (b,)
    pair_proj: Tensor  # (2d, b)
    pair_out: Tensor  # (b,)

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, b: int) -> "ScoreHeadParams":
        return cls(
            Tensor(rng.uniform(-1, 1, (d, b)) / np.sqrt(d), True, "single_proj"),
            Tensor(rng.uniform(-1, 1, b) / np.sqrt(b), True, "single_out"),
            Tensor(rng.uniform(-1, 1, (2 * d, b)) / np.sqrt(2 * d), True, "pair_proj"),
            Tensor(rng.uniform(-1, 1, b) / np.sqrt(b), True, "pair_out"),
        )


@dataclass
class GroundingParams:
    role: NodeRoleParams
    attention: AttentionParams
    heads: ScoreHeadParams


@dataclass(frozen=True)
class ScoreTerms:
    """Which terms of the node score are summed (ablation switches)."""

    single: bool = True
    pair: bool = True
    accumulate: bool = True
    # score-child leaves report their single-word score instead of zero
    leaf_scores: bool = False


@dataclass
class EvalCounter:
    node_single: int = 0
    node_pair: int = 0
    leaf_single: int = 0

    @property
    def node_heads(self) -> int:
        return self.node_single + self.node_pair


@dataclass
class NodeTrace:
    node: int
    span: tuple[int, int]
    role: str  # "root", "score" or "feature"
    p_feature: float | None = None
    single: np.ndarray | None = None
    pair: np.ndarray | None = None
    context: np.ndarray | None = None
    total: np.ndarray | None = None


@dataclass
class GroundingTrace:
    nodes: dict[int, NodeTrace] = field(default_factory=dict)
    counter: EvalCounter = field(default_factory=EvalCounter)

    def role_of(self, node_id: int) -> str:
        return self.nodes[node_id].role

    def feature_choices(self, tree: RvGTree) -> dict[tuple[int, int], int]:
        """Span of each internal node -> index of its feature child."""
        return {n.span: 0 if self.nodes[n.left].role == "feature" else 1 for n in tree.internal()}


# -- primitives -----------------------------------------------------------


@dataclass
class RoleChoice:
    feature: int  # 0: left child is the feature node, 1: right child
    onehot: Tensor
    p_left_feature: float


def classify_children(left: Tensor, right: Tensor, params: NodeRoleParams,
                      mode: str = "eval", sampler: GumbelSampler | None = None,
                      forced: int | None = None) -> RoleChoice:
    """Pick the feature child; ``forced`` pins the choice (constant one-hot)."""
    logits = dc.stack([left @ params.query, right @ params.query])
    if forced is not None:
        idx = int(forced)
        oh = Tensor(dc.onehot(idx, 2))
    elif mode == "train":
        if sampler is None:
            raise ValueError("train mode needs a GumbelSampler")
        s = dc.gumbel_st_sample(sampler, logits)
        idx, oh = s.index, s.onehot
    elif mode == "eval":
        idx = int(np.argmax(logits.value))
        oh = Tensor(dc.onehot(idx, 2))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    p = dc.softmax_values(logits.value)
    return RoleChoice(idx, oh, float(p[0]))


def language_features(span: tuple[int, int], leaf_states: Tensor, word_embeddings: Tensor,
                      params: AttentionParams) -> tuple[Tensor, Tensor]:
    """Attention-pooled word embeddings over the leaves in ``span``."""
    a, b = span
    if b <= a:
        raise ValueError(f"empty span {span}")
    if b - a == 1:
        w = word_embeddings[a]
        return w, w
    keys = leaf_states[a:b]
    words = word_embeddings[a:b]
    y_s = dc.softmax(keys @ params.single) @ words
    y_p = dc.softmax(keys @ params.pair) @ words
    return y_s, y_p


def _head(proj: Tensor, y: Tensor, out: Tensor) -> Tensor:
    return dc.l2_normalize(dc.mul(proj, y)) @ out


def score_single(x, y_s: Tensor, params: ScoreHeadParams) -> Tensor:
    """Score one region (d,) or a stack of regions (n, d)."""
    return _head(dc.as_tensor(x) @ params.single_proj, y_s, params.single_out)


def score_pair(x, x_ctx, y_p: Tensor, params: ScoreHeadParams) -> Tensor:
    x, x_ctx = dc.as_tensor(x), dc.as_tensor(x_ctx)
    if x.value.ndim == 2 and x_ctx.value.ndim == 1:
        n = x.shape[0]
        x_ctx = dc.add(dc.reshape(x_ctx, (1, -1)), np.zeros((n, 1)))
    pair = dc.concat([x, x_ctx], axis=-1)
    return _head(pair @ params.pair_proj, y_p, params.pair_out)


def aggregate_feature(scores: Tensor, regions) -> Tensor:
    """Softmax(scores)-weighted sum of region features."""
    X = regions.value if isinstance(regions, Tensor) else np.asarray(regions, dtype=float)
    if scores.shape[0] != X.shape[0] or X.shape[0] < 1:
        raise ValueError("need one score per region and at least one region")
    return dc.softmax(scores) @ X


def iou(box_a, box_b) -> float:
    ax1, ay1, ax2, ay2 = box_a
    bx1, by1, bx2, by2 = box_b
    if ax2 <= ax1 or ay2 <= ay1 or bx2 <= bx1 or by2 <= by1:
        raise ValueError("degenerate box")
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


# -- recursion --------------------------------------------------------------


class _Evaluator:
    def __init__(self, tree, leaf_states, word_embeddings, X, params, mode, sampler, terms, roles):
        self.tree = tree
        self.roles = roles or {}
        self.leaf_states = leaf_states
        self.words = word_embeddings
        self.X = X
        self.params = params
        self.mode = mode
        self.sampler = sampler
        self.terms = terms
        self.trace = GroundingTrace()
        d = X.shape[1]
        h = params.heads
        # region projections are shared by every node
        self.proj_single = dc.matmul(X, h.single_proj)
        self.proj_pair = dc.matmul(X, h.pair_proj[:d]) if terms.pair else None
        self.pair_ctx_w = h.pair_proj[d:] if terms.pair else None
        self._leaf_cache: dict[int, Tensor] = {}

    def leaf_single(self, node: TreeNode) -> Tensor:
        s = self._leaf_cache.get(node.id)
        if s is None:
            self.trace.counter.leaf_single += 1
            w = self.words[node.span[0]]
            s = _head(self.proj_single, w, self.params.heads.single_out)
            self._leaf_cache[node.id] = s
        return s

    def run(self) -> Tensor:
        root = self.tree.nodes[self.tree.root]
        if root.is_leaf:
            total = self.leaf_single(root)
            self.trace.nodes[root.id] = NodeTrace(root.id, root.span, "root", total=total.value)
            return total
        total = self.visit(root)
        self.trace.nodes[root.id].role = "root"
        return total

    def _score_out(self, node: TreeNode, result):
        """Score passed up by ``node`` acting as a score child (None = zeros)."""
        if node.is_leaf:
            return self.leaf_single(node) if self.terms.leaf_scores else None
        return result

    def _feature_scores(self, node: TreeNode, result) -> Tensor:
        return self.leaf_single(node) if node.is_leaf else result

    def visit(self, node: TreeNode) -> Tensor:
        nodes = self.tree.nodes
        left, right = nodes[node.left], nodes[node.right]
        res_l = None if left.is_leaf else self.visit(left)
        res_r = None if right.is_leaf else self.visit(right)

        role = classify_children(left.state, right.state, self.params.role, self.mode, self.sampler,
                                 self.roles.get(node.span))
        feat, score = (left, right) if role.feature == 0 else (right, left)
        for child, name in ((feat, "feature"), (score, "score")):
            p = role.p_left_feature if child is left else 1.0 - role.p_left_feature
            tr = self.trace.nodes.setdefault(child.id, NodeTrace(child.id, child.span, name))
            tr.role, tr.p_feature = name, p

        soft = role.onehot.requires_grad
        t = self.terms
        context = None
        if t.pair:
            if soft:
                ctx_l = aggregate_feature(self._feature_scores(left, res_l), self.X)
                ctx_r = aggregate_feature(self._feature_scores(right, res_r), self.X)
                context = dc.add(dc.mul(role.onehot[0], ctx_l), dc.mul(role.onehot[1], ctx_r))
            else:
                res_f = res_l if feat is left else res_r
                context = aggregate_feature(self._feature_scores(feat, res_f), self.X)

        parts: list[Tensor] = []
        single = pair = None
        if t.single or t.pair:
            y_s, y_p = language_features(node.span, self.leaf_states, self.words, self.params.attention)
            if t.single:
                self.trace.counter.node_single += 1
                single = _head(self.proj_single, y_s, self.params.heads.single_out)
                parts.append(single)
            if t.pair:
                self.trace.counter.node_pair += 1
                shifted = dc.add(self.proj_pair, context @ self.pair_ctx_w)
                pair = _head(shifted, y_p, self.params.heads.pair_out)
                parts.append(pair)
        if t.accumulate:
            acc_l = self._score_out(left, res_l)
            acc_r = self._score_out(right, res_r)
            if soft:
                # left is the score child when the right one is the feature child
                if acc_l is not None:
                    parts.append(dc.mul(role.onehot[1], acc_l))
                if acc_r is not None:
                    parts.append(dc.mul(role.onehot[0], acc_r))
            else:
                acc = acc_r if feat is left else acc_l
                if acc is not None:
                    parts.append(acc)

        total = parts[0] if parts else Tensor(np.zeros(self.X.shape[0]))
        for p in parts[1:]:
            total = dc.add(total, p)
        tr = self.trace.nodes.setdefault(node.id, NodeTrace(node.id, node.span, "score"))
        tr.single = None if single is None else single.value
        tr.pair = None if pair is None else pair.value
        tr.context = None if context is None else context.value
        tr.total = total.value
        return total


def recursive_ground(tree: RvGTree, leaf_states: Tensor, word_embeddings: Tensor, regions,
                     params: GroundingParams, mode: str = "eval",
                     sampler: GumbelSampler | None = None,
                     terms: ScoreTerms = ScoreTerms(),
                     roles: dict[tuple[int, int], int] | None = None) -> tuple[Tensor, GroundingTrace]:
    """Root scores (one per region) and a per-node trace.

    ``leaf_states``/``word_embeddings`` are indexed by pruned-token position
    and must cover exactly the tree's leaves. ``roles`` pins the feature
    child (0 left, 1 right) of internal nodes keyed by span.
    """
    X = np.asarray(regions.value if isinstance(regions, Tensor) else regions, dtype=float)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("need a (n, d) region matrix with n >= 1")
    if leaf_states.shape[0] != tree.n_leaves or word_embeddings.shape[0] != tree.n_leaves:
        raise ValueError("leaf inputs do not match the tree's leaf count")
    ev = _Evaluator(tree, leaf_states, word_embeddings, X, params, mode, sampler, terms, roles)
    return ev.run(), ev.trace
