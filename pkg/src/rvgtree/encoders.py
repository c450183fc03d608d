"""Word embeddings, BiLSTM leaf encoder and binary TreeLSTM composition.

Node states are stored as ``v = [h; c]`` rows. Leaves carry both LSTM
directions, ``h = [h_fwd; h_bwd]`` and ``c = [c_fwd; c_bwd]``, so with LSTM
width ``H`` every node state has width ``4H`` and merging is closed.

The recurrent cells are fused tape ops with hand-written backward passes;
tests check them against central differences.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

log = logging.getLogger(__name__)

PAD_ID = 0
UNK_ID = 1


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class EmbeddingTable:
    rows: Tensor  # (vocab_size, b)

    @property
    def vocab_size(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, vocab_size: int, dim: int) -> "EmbeddingTable":
        rows = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(vocab_size, dim))
        return cls(Tensor(rows, requires_grad=True, name="embedding"))


@dataclass
class RecurrentParams:
    """BiLSTM gate weights act on ``[x; h_prev]`` with gate order (i, f, o, u).

    The TreeLSTM weight acts on ``[h_left; h_right]`` producing gate blocks
    (i, f_left, f_right, o, u); its bias has blocks (i, f, o, u) with the
    forget bias shared by both children.
    """

    fwd_W: Tensor
    fwd_b: Tensor
    bwd_W: Tensor
    bwd_b: Tensor
    tree_W: Tensor
    tree_b: Tensor

    @property
    def hidden(self) -> int:
        return self.fwd_b.shape[0] // 4

    @property
    def state_width(self) -> int:
        return 4 * self.hidden

    @classmethod
    def init(cls, rng: np.random.Generator, emb_dim: int, hidden: int) -> "RecurrentParams":
        H = hidden
        hw = 2 * H

        def lstm(tag):
            W = uniform_init(rng, emb_dim + H, (emb_dim + H, 4 * H))
            b = np.zeros(4 * H)
            b[H:2 * H] = 1.0
            return (Tensor(W, True, f"lstm_{tag}_W"), Tensor(b, True, f"lstm_{tag}_b"))

        fW, fb = lstm("fwd")
        bW, bb = lstm("bwd")
        tW = uniform_init(rng, 2 * hw, (2 * hw, 5 * hw))
        tb = np.zeros(4 * hw)
        tb[hw:2 * hw] = 1.0
        return cls(fW, fb, bW, bb, Tensor(tW, True, "tree_W"), Tensor(tb, True, "tree_b"))

    def tensors(self) -> list[Tensor]:
        return [self.fwd_W, self.fwd_b, self.bwd_W, self.bwd_b, self.tree_W, self.tree_b]


class NodeState:
    """View over a state row ``v = [h; c]``; ``h``/``c`` are slices, never copies."""

    __slots__ = ("v",)

    def __init__(self, v: Tensor):
        if v.value.ndim != 1 or v.shape[0] % 2:
            raise ValueError(f"node state must be an even-width vector, got {v.shape}")
        self.v = v

    @property
    def width(self) -> int:
        return self.v.shape[0] // 2

    @property
    def h(self) -> Tensor:
        return self.v[: self.width]

    @property
    def c(self) -> Tensor:
        return self.v[self.width:]


# -- embedding ------------------------------------------------------------


def embed_tokens(ids, table: EmbeddingTable) -> tuple[Tensor, np.ndarray]:
    """Look up rows for ``ids``; returns (embeddings (m, b), non-pad mask)."""
    ids = np.asarray(ids, dtype=np.intp).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= table.vocab_size):
        raise IndexError(f"token id out of range for vocabulary of {table.vocab_size}")
    if ids.size == 0:
        return Tensor(np.zeros((0, table.dim))), np.zeros(0, dtype=bool)
    return dc.take(table.rows, ids), ids != PAD_ID


# -- BiLSTM ----------------------------------------------------------------


def _lstm_forward(X: np.ndarray, W: np.ndarray, b: np.ndarray, reverse: bool):
    m = X.shape[0]
    H = b.shape[0] // 4
    order = range(m - 1, -1, -1) if reverse else range(m)
    Hs = np.zeros((m, H))
    Cs = np.zeros((m, H))
    inputs = np.zeros((m, X.shape[1] + H))
    gates = np.zeros((m, 4 * H))
    prev_c = np.zeros((m, H))
    h = np.zeros(H)
    c = np.zeros(H)
    for t in order:
        z = np.concatenate([X[t], h])
        a = z @ W + b
        i = dc._sigmoid(a[:H])
        f = dc._sigmoid(a[H:2 * H])
        o = dc._sigmoid(a[2 * H:3 * H])
        u = np.tanh(a[3 * H:])
        prev_c[t] = c
        c = f * c + i * u
        h = o * np.tanh(c)
        inputs[t] = z
        gates[t] = np.concatenate([i, f, o, u])
        Hs[t] = h
        Cs[t] = c
    return Hs, Cs, (inputs, gates, prev_c, Cs, list(order))


def _lstm_backward(cache, W: np.ndarray, dH: np.ndarray, dC: np.ndarray, emb_dim: int):
    inputs, gates, prev_c, Cs, order = cache
    m, H = dH.shape
    dA = np.zeros((m, 4 * H))
    dX = np.zeros((m, emb_dim))
    dh_next = np.zeros(H)
    dc_next = np.zeros(H)
    for t in reversed(order):
        i, f, o, u = gates[t, :H], gates[t, H:2 * H], gates[t, 2 * H:3 * H], gates[t, 3 * H:]
        tc = np.tanh(Cs[t])
        dh = dH[t] + dh_next
        dcell = dC[t] + dc_next + dh * o * (1.0 - tc * tc)
        da = np.concatenate([
            dcell * u * i * (1.0 - i),
            dcell * prev_c[t] * f * (1.0 - f),
            dh * tc * o * (1.0 - o),
            dcell * i * (1.0 - u * u),
        ])
        dA[t] = da
        dz = W @ da
        dX[t] = dz[:emb_dim]
        dh_next = dz[emb_dim:]
        dc_next = dcell * f
    return dX, inputs.T @ dA, dA.sum(axis=0)


def bilstm_leaf_states(embeddings: Tensor, params: RecurrentParams) -> Tensor:
    """Leaf states (m, 4H) laid out as ``[h_fwd, h_bwd, c_fwd, c_bwd]``.

    Pad positions are run through the recurrence like any other token;
    callers drop them with the embedding mask.
    """
    X = embeddings.value
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("need at least one token to encode")
    p = params
    Hf, Cf, cache_f = _lstm_forward(X, p.fwd_W.value, p.fwd_b.value, reverse=False)
    Hb, Cb, cache_b = _lstm_forward(X, p.bwd_W.value, p.bwd_b.value, reverse=True)
    H = p.hidden
    b = X.shape[1]

    def grad(g):
        dXf, dWf, dbf = _lstm_backward(cache_f, p.fwd_W.value, g[:, :H], g[:, 2 * H:3 * H], b)
        dXb, dWb, dbb = _lstm_backward(cache_b, p.bwd_W.value, g[:, H:2 * H], g[:, 3 * H:], b)
        return dXf + dXb, dWf, dbf, dWb, dbb

    V = np.concatenate([Hf, Hb, Cf, Cb], axis=1)
    return dc.record(V, (embeddings, p.fwd_W, p.fwd_b, p.bwd_W, p.bwd_b), grad)


# -- TreeLSTM --------------------------------------------------------------


def treelstm_merge(left: Tensor, right: Tensor, params: RecurrentParams) -> Tensor:
    """Compose child states into parent states.

    Works row-wise: ``left``/``right`` may be single states (w,) or stacks
    (k, w) of candidate pairs, which is how every adjacent pair of a layer is
    scored in one call.
    """
    if left.shape != right.shape:
        raise ValueError(f"child state shapes differ: {left.shape} vs {right.shape}")
    single = left.value.ndim == 1
    VL = left.value.reshape(1, -1) if single else left.value
    VR = right.value.reshape(1, -1) if single else right.value
    W, bias = params.tree_W.value, params.tree_b.value
    hw = VL.shape[1] // 2
    if W.shape != (2 * hw, 5 * hw):
        raise ValueError(f"state width {2 * hw} does not match TreeLSTM weights {W.shape}")
    hl, cl = VL[:, :hw], VL[:, hw:]
    hr, cr = VR[:, :hw], VR[:, hw:]
    z = np.concatenate([hl, hr], axis=1)
    a = z @ W
    bi, bf, bo, bu = bias[:hw], bias[hw:2 * hw], bias[2 * hw:3 * hw], bias[3 * hw:]
    i = dc._sigmoid(a[:, :hw] + bi)
    fl = dc._sigmoid(a[:, hw:2 * hw] + bf)
    fr = dc._sigmoid(a[:, 2 * hw:3 * hw] + bf)
    o = dc._sigmoid(a[:, 3 * hw:4 * hw] + bo)
    u = np.tanh(a[:, 4 * hw:] + bu)
    c = fl * cl + fr * cr + i * u
    tc = np.tanh(c)
    h = o * tc
    out = np.concatenate([h, c], axis=1)

    def grad(g):
        g = g.reshape(out.shape)
        dh, dcell = g[:, :hw], g[:, hw:]
        dcell = dcell + dh * o * (1.0 - tc * tc)
        da_i = dcell * u * i * (1.0 - i)
        da_fl = dcell * cl * fl * (1.0 - fl)
        da_fr = dcell * cr * fr * (1.0 - fr)
        da_o = dh * tc * o * (1.0 - o)
        da_u = dcell * i * (1.0 - u * u)
        da = np.concatenate([da_i, da_fl, da_fr, da_o, da_u], axis=1)
        dz = da @ W.T
        dW = z.T @ da
        dbias = np.concatenate([
            da_i.sum(0), (da_fl + da_fr).sum(0), da_o.sum(0), da_u.sum(0)])
        dVL = np.concatenate([dz[:, :hw], dcell * fl], axis=1)
        dVR = np.concatenate([dz[:, hw:], dcell * fr], axis=1)
        if single:
            dVL, dVR = dVL[0], dVR[0]
        return dVL, dVR, dW, dbias

    return dc.record(out[0] if single else out, (left, right, params.tree_W, params.tree_b), grad)


# -- warm start -------------------------------------------------------------


def load_word_vectors(path: str | Path, vocab: dict[str, int], table: EmbeddingTable) -> int:
    """Overwrite embedding rows from a ``token v1 ... vb`` text file.

    Tokens missing from the file keep their random init. Returns the number
    of rows filled.
    """
    filled = 0
    rows = table.rows.value
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            tok, nums = parts[0], parts[1:]
            if tok not in vocab:
                continue
            if len(nums) != table.dim:
                raise ValueError(f"{path}:{lineno}: expected {table.dim} values, got {len(nums)}")
            rows[vocab[tok]] = np.array(nums, dtype=float)
            filled += 1
    log.info("warm-started %d/%d embedding rows from %s", filled, len(vocab), path)
    return filled
