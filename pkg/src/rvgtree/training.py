"""Parameter registry, losses, Adam, and the pretrain / fine-tune loops."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .dataio import Example
from .diffcore import GumbelSampler, Tape, Tensor
from .encoders import UNK_ID, EmbeddingTable, RecurrentParams, bilstm_leaf_states, embed_tokens
from .grounding import (AttentionParams, GroundingParams, GroundingTrace, NodeRoleParams,
                        ScoreHeadParams, ScoreTerms, iou, recursive_ground, score_single)
from .treebuilder import MergePolicyParams, RvGTree, build_tree, merge_nll

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
VARIANTS = ("Full", "Chain", "Fix", "Scratch", "NoNode", "NoS", "NoF")


class ConfigError(ValueError):
    pass


class NumericalError(FloatingPointError):
    pass


# -- configuration ----------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 0.001
    beta1: float = 0.8
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    tau: float = 1.0
    noise: bool = True
    max_len: int = 10
    seed: int = 0
    variant: str = "Full"
    phase: str = "finetune"
    pretrain_epochs: int = 5
    finetune_epochs: int = 20
    tree_loss_weight: float = 1.0
    emb_dim: int = 64
    hidden: int = 64
    min_freq: int = 5

    def validate(self) -> "TrainConfig":
        for key in ("lr", "adam_eps", "tau"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")
        for key in ("beta1", "beta2"):
            if not 0 <= getattr(self, key) < 1:
                raise ConfigError(f"{key} must lie in [0, 1), got {getattr(self, key)}")
        for key in ("batch_size", "max_len", "emb_dim", "hidden", "min_freq"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1, got {getattr(self, key)}")
        for key in ("pretrain_epochs", "finetune_epochs"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0, got {getattr(self, key)}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.phase not in ("pretrain", "finetune"):
            raise ConfigError(f"phase must be 'pretrain' or 'finetune', got {self.phase!r}")
        return self

    def updated(self, **overrides) -> "TrainConfig":
        known = {f.name for f in fields(self)}
        for key in overrides:
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
        return replace(self, **overrides).validate()

    @classmethod
    def parse_assignments(cls, text: str, source: str = "<config>") -> dict:
        """Typed ``key = value`` pairs, one per line; ``#`` starts a comment."""
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
            values[key] = _coerce(key, val, types[key], f"{source}:{lineno}")
        return values

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "TrainConfig":
        return cls().updated(**cls.parse_assignments(text, source))

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), str(path))

    def to_text(self) -> str:
        return "".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n"
                       for k, v in asdict(self).items())


def _coerce(key: str, val: str, typ: str, where: str):
    try:
        if typ == "bool":
            if val.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return val.lower() in ("true", "1", "yes")
        if typ == "int":
            return int(val)
        if typ == "float":
            return float(val)
    except ValueError:
        raise ConfigError(f"{where}: bad value {val!r} for {key} ({typ})") from None
    return val.strip("'\"")


# -- ablations ---------------------------------------------------------------

ALL_PARAMS = frozenset({
    "embedding", "lstm_fwd_W", "lstm_fwd_b", "lstm_bwd_W", "lstm_bwd_b", "tree_W", "tree_b",
    "merge_query", "role_query", "att_single", "att_pair",
    "single_proj", "single_out", "pair_proj", "pair_out",
})
_PAIR = frozenset({"att_pair", "pair_proj", "pair_out"})


@dataclass(frozen=True)
class Wiring:
    variant: str
    tree: str  # "latent", "expert" or "none"
    pretrain: bool
    terms: ScoreTerms
    uses: frozenset  # parameters the forward pass can send gradient to


def configure_ablation(variant: str) -> Wiring:
    if variant in ("Full", "Scratch"):
        return Wiring(variant, "latent", variant == "Full", ScoreTerms(), ALL_PARAMS)
    if variant == "Chain":
        return Wiring(variant, "none", False, ScoreTerms(pair=False, accumulate=False), frozenset({
            "embedding", "lstm_fwd_W", "lstm_fwd_b", "lstm_bwd_W", "lstm_bwd_b",
            "att_single", "single_proj", "single_out"}))
    if variant == "Fix":
        return Wiring(variant, "expert", False, ScoreTerms(), ALL_PARAMS - {"merge_query"})
    if variant == "NoNode":
        return Wiring(variant, "latent", True, ScoreTerms(single=False, pair=False, leaf_scores=True),
                      ALL_PARAMS - _PAIR - {"att_single"})
    if variant == "NoS":
        return Wiring(variant, "latent", True, ScoreTerms(accumulate=False), ALL_PARAMS)
    if variant == "NoF":
        return Wiring(variant, "latent", True, ScoreTerms(pair=False), ALL_PARAMS - _PAIR)
    raise ConfigError(f"unknown ablation variant {variant!r}; expected one of {VARIANTS}")


# -- parameters -------------------------------------------------------------


class ParameterStore:
    """Every trainable tensor, plus Adam moment buffers."""

    def __init__(self, vocab_size: int, emb_dim: int, hidden: int, region_dim: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.dims = {"vocab_size": vocab_size, "emb_dim": emb_dim, "hidden": hidden,
                     "region_dim": region_dim}
        self.embedding = EmbeddingTable.init(rng, vocab_size, emb_dim)
        self.recurrent = RecurrentParams.init(rng, emb_dim, hidden)
        width = self.recurrent.state_width
        self.merge = MergePolicyParams.init(rng, width)
        self.grounding = GroundingParams(
            NodeRoleParams.init(rng, width),
            AttentionParams.init(rng, width),
            ScoreHeadParams.init(rng, region_dim, emb_dim),
        )
        self.step = 0
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        named = self.named()
        if set(named) != ALL_PARAMS or len({id(t) for t in named.values()}) != len(named):
            raise RuntimeError("parameter registry does not match its manifest")

    def named(self) -> dict[str, Tensor]:
        g = self.grounding
        tensors = [self.embedding.rows, *self.recurrent.tensors(), self.merge.query,
                   g.role.query, g.attention.single, g.attention.pair,
                   g.heads.single_proj, g.heads.single_out, g.heads.pair_proj, g.heads.pair_out]
        return {t.name: t for t in tensors}

    def zero_grad(self) -> None:
        for t in self.named().values():
            t.zero_grad()

    def manifest(self) -> list[dict]:
        return [{"name": k, "shape": list(t.shape),
                 "sha256": hashlib.sha256(t.value.tobytes()).hexdigest()}
                for k, t in self.named().items()]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.value.copy() for k, t in self.named().items()}

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        """Write an ``.npz`` checkpoint atomically (tmp file + rename)."""
        path = Path(path)
        meta = {"version": CHECKPOINT_VERSION, "dims": self.dims, "step": self.step,
                "manifest": self.manifest(), "extra": extra or {}}
        arrays = {f"param/{k}": v for k, v in self.snapshot().items()}
        for k, (m, v) in self.moments.items():
            arrays[f"adam_m/{k}"] = m
            arrays[f"adam_v/{k}"] = v
        buf = io.BytesIO()
        np.savez(buf, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(buf.getvalue())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | Path) -> tuple["ParameterStore", dict]:
        with np.load(path) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
            store = cls(**meta["dims"])
            for entry in meta["manifest"]:
                name = entry["name"]
                arr = z[f"param/{name}"]
                if hashlib.sha256(arr.tobytes()).hexdigest() != entry["sha256"]:
                    raise ValueError(f"checksum mismatch for parameter {name}")
                store.named()[name].value[...] = arr
                if f"adam_m/{name}" in z:
                    store.moments[name] = (z[f"adam_m/{name}"].copy(), z[f"adam_v/{name}"].copy())
            store.step = meta["step"]
        return store, meta["extra"]


# -- losses and optimizer -----------------------------------------------------------


def grounding_loss(scores: Tensor, gt: int) -> Tensor:
    """Cross-entropy of the referent under softmax over all region scores."""
    n = scores.shape[0]
    if not 0 <= gt < n:
        raise IndexError(f"ground-truth index {gt} out of range for {n} regions")
    return dc.neg(dc.log_softmax(scores)[gt])


def adam_step(store: ParameterStore, config: TrainConfig) -> None:
    """Bias-corrected Adam update using ``beta1``/``beta2``; zeroes grads after."""
    named = store.named()
    for name, t in named.items():
        if not np.all(np.isfinite(t.grad)):
            raise NumericalError(f"non-finite gradient in {name} at step {store.step + 1}")
    store.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** store.step
    c2 = 1.0 - b2 ** store.step
    for name, t in named.items():
        m, v = store.moments.get(name, (np.zeros_like(t.value), np.zeros_like(t.value)))
        g = t.grad
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        store.moments[name] = (m, v)
        t.value -= config.lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
        t.zero_grad()


# -- forward pass --------------------------------------------------------------

_MODES = {  # phase -> (tree mode, role mode)
    "pretrain": ("expert", "train"),
    "train": ("train", "train"),
    "eval": ("eval", "eval"),
}


@dataclass
class FixedStructure:
    """A frozen tree (merge positions per layer) and frozen node roles."""

    merges: list[int]
    roles: dict[tuple[int, int], int]

    @classmethod
    def from_result(cls, result: "ForwardResult") -> "FixedStructure":
        merges = [rec.position for rec in result.tree.merge_log]
        return cls(merges, result.trace.feature_choices(result.tree))


@dataclass
class ForwardResult:
    scores: Tensor
    tree: RvGTree | None = None
    trace: GroundingTrace | None = None
    tree_nll: Tensor | None = None


def forward(store: ParameterStore, ex: Example, wiring: Wiring, phase: str = "eval",
            sampler: GumbelSampler | None = None, fixed: FixedStructure | None = None) -> ForwardResult:
    """Score every region of ``ex`` under ``wiring``.

    ``phase`` is ``pretrain`` (expert trees, sampled roles), ``train``
    (Gumbel trees and roles) or ``eval`` (argmax everywhere, no noise).
    ``fixed`` replays a frozen structure; all discrete choices become constants.
    """
    tree_mode, role_mode = _MODES[phase]
    emb, _ = embed_tokens(ex.ids, store.embedding)
    states = bilstm_leaf_states(emb, store.recurrent)
    m = ex.m
    if states.shape[0] != m:
        states, emb = states[:m], emb[:m]
    g = store.grounding
    if wiring.tree == "none":
        y = dc.softmax(states @ g.attention.single) @ emb
        return ForwardResult(score_single(ex.regions, y, g.heads))
    if wiring.tree == "expert":
        if ex.expert is None:
            raise ValueError(f"example {ex.id} has no expert tree")
        tree_mode = "expert"
    expert = ex.expert if tree_mode == "expert" else None
    roles = None
    if fixed is not None:
        tree_mode, role_mode, expert, roles = "expert", "eval", fixed.merges, fixed.roles
    tree = build_tree(states, store.recurrent, store.merge, tree_mode, sampler, expert=expert,
                      unk=list(ex.ids[:m] == UNK_ID), tokens=ex.tokens)
    scores, trace = recursive_ground(tree, states, emb, ex.regions, g, role_mode, sampler,
                                     wiring.terms, roles)
    nll = merge_nll(tree) if phase == "pretrain" and wiring.tree == "latent" else None
    return ForwardResult(scores, tree, trace, nll)


def predict(store: ParameterStore, ex: Example, wiring: Wiring) -> int:
    return int(np.argmax(forward(store, ex, wiring, "eval").scores.value))


def is_correct(ex: Example, pred: int) -> bool:
    if ex.boxes is not None:
        return iou(ex.boxes[pred], ex.boxes[ex.gt]) > 0.5
    return pred == ex.gt


def evaluate(store: ParameterStore, examples: Sequence[Example], wiring: Wiring) -> tuple[float, list[int]]:
    """Top-1 accuracy and the predicted region index per example."""
    preds = [predict(store, ex, wiring) for ex in examples]
    if not preds:
        return 0.0, preds
    correct = sum(is_correct(ex, p) for ex, p in zip(examples, preds))
    return correct / len(preds), preds


# -- steps -------------------------------------------------------------------------


@dataclass
class StepResult:
    loss: float
    tree_loss: float = 0.0
    correct: int = 0
    count: int = 0
    skipped: int = 0


def _batch_step(batch: Sequence[Example], store: ParameterStore, wiring: Wiring, phase: str,
                sampler: GumbelSampler, tree_weight: float) -> StepResult:
    usable = [ex for ex in batch if phase != "pretrain" or wiring.tree != "latent" or ex.expert is not None]
    skipped = len(batch) - len(usable)
    if skipped:
        log.warning("skipping %d examples without expert trees", skipped)
    res = StepResult(0.0, skipped=skipped)
    if not usable:
        return res
    w = 1.0 / len(usable)
    for ex in usable:
        with Tape() as tape:
            out = forward(store, ex, wiring, phase, sampler)
            loss = grounding_loss(out.scores, ex.gt)
            total = loss
            if out.tree_nll is not None:
                total = dc.add(loss, dc.scale(out.tree_nll, tree_weight))
                res.tree_loss += w * out.tree_nll.item()
        dc.backward(tape, total, seed=w)
        res.loss += w * loss.item()
        res.correct += int(is_correct(ex, int(np.argmax(out.scores.value))))
        res.count += 1
    return res


def pretrain_step(batch: Sequence[Example], store: ParameterStore, config: TrainConfig,
                  wiring: Wiring | None = None, sampler: GumbelSampler | None = None) -> tuple[float, float]:
    """One supervised step on expert trees; returns (tree loss, grounding loss)."""
    wiring = wiring or configure_ablation(config.variant)
    sampler = sampler or GumbelSampler(config.tau, config.noise, config.seed)
    res = _batch_step(batch, store, wiring, "pretrain", sampler, config.tree_loss_weight)
    adam_step(store, config)
    return res.tree_loss, res.loss


def finetune_step(batch: Sequence[Example], store: ParameterStore, config: TrainConfig,
                  wiring: Wiring | None = None, sampler: GumbelSampler | None = None) -> float:
    """One straight-through Gumbel step on the grounding loss alone."""
    wiring = wiring or configure_ablation(config.variant)
    sampler = sampler or GumbelSampler(config.tau, config.noise, config.seed)
    res = _batch_step(batch, store, wiring, "train", sampler, 0.0)
    adam_step(store, config)
    return res.loss


def batch_loss(batch: Sequence[Example], store: ParameterStore, wiring: Wiring, phase: str = "eval") -> float:
    losses = [grounding_loss(forward(store, ex, wiring, phase).scores, ex.gt).item() for ex in batch]
    return float(np.mean(losses))


# -- loop ------------------------------------------------------------------------


@dataclass
class History:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    skipped: int = 0


def phases_for(config: TrainConfig, wiring: Wiring) -> list[tuple[str, int]]:
    """(phase, epochs) schedule for a variant; every variant trains the same total epochs
    except Scratch, which simply drops pretraining."""
    if wiring.variant == "Scratch":
        return [("train", config.finetune_epochs)]
    if wiring.tree == "latent":
        return [("pretrain", config.pretrain_epochs), ("train", config.finetune_epochs)]
    # Chain and Fix have no merge policy to supervise; their pretrain epochs use expert
    # trees (Fix) or no tree at all (Chain) exactly like fine-tuning
    return [("train", config.pretrain_epochs + config.finetune_epochs)]


def train(store: ParameterStore, examples: Sequence[Example], config: TrainConfig,
          wiring: Wiring | None = None, eval_examples: Sequence[Example] | None = None,
          log_fn: Callable[[str], None] | None = None,
          schedule: list[tuple[str, int]] | None = None) -> History:
    wiring = wiring or configure_ablation(config.variant)
    rng = np.random.default_rng(config.seed)
    sampler = GumbelSampler(config.tau, config.noise, config.seed + 1)
    hist = History()
    seen = correct = 0
    for phase, epochs in schedule or phases_for(config, wiring):
        for epoch in range(epochs):
            order = rng.permutation(len(examples))
            ep_loss = []
            for start in range(0, len(order), config.batch_size):
                batch = [examples[i] for i in order[start:start + config.batch_size]]
                res = _batch_step(batch, store, wiring, phase, sampler, config.tree_loss_weight)
                adam_step(store, config)
                seen += res.count
                correct += res.correct
                hist.skipped += res.skipped
                row = {"step": store.step, "phase": phase, "loss": res.loss,
                       "tree_loss": res.tree_loss, "acc": correct / max(seen, 1)}
                hist.steps.append(row)
                ep_loss.append(res.loss)
                if log_fn:
                    log_fn(f"step={row['step']} phase={phase} loss={res.loss:.6f} "
                           f"tree_loss={res.tree_loss:.6f} acc={row['acc']:.4f}")
            summary = {"phase": phase, "epoch": epoch + 1, "loss": float(np.mean(ep_loss)) if ep_loss else 0.0}
            if eval_examples is not None:
                summary["eval_acc"] = evaluate(store, eval_examples, wiring)[0]
            hist.epochs.append(summary)
            log.info("epoch %s", summary)
    return hist


# -- gradient suite ----------------------------------------------------------------


@dataclass
class GradientCase:
    m: int
    n: int
    max_rel_error: float
    passed: bool


def random_example(rng: np.random.Generator, vocab_size: int, m: int, n: int, d: int,
                   max_len: int | None = None) -> Example:
    """An example with random in-vocabulary tokens and Gaussian region features."""
    ids = rng.integers(2, vocab_size, size=m)
    max_len = max_len or m
    padded = np.zeros(max_len, dtype=np.intp)
    padded[:m] = ids
    return Example(f"rand{m}x{n}", [f"w{i}" for i in ids], padded, rng.normal(size=(n, d)),
                   int(rng.integers(n)))


def gradient_suite(n_configs: int = 20, seed: int = 0, dim: int = 8, max_m: int = 6, max_n: int = 5,
                   tol: float = 1e-3, max_entries: int | None = 24, min_n: int = 2,
                   variant: str = "Full") -> list[GradientCase]:
    """Finite-difference check of the one-example loss with its tree and roles frozen.

    Each configuration draws fresh parameters and a random example; the eval-mode
    structure is recorded once and replayed so the loss is smooth in every parameter.
    With a single region the loss is identically zero, hence ``min_n = 2``.
    """
    rng = np.random.default_rng(seed)
    wiring = configure_ablation(variant)
    cases = []
    for k in range(n_configs):
        m, n = int(rng.integers(1, max_m + 1)), int(rng.integers(min_n, max_n + 1))
        store = ParameterStore(12, dim, dim, dim, seed=seed * 1000 + k)
        ex = random_example(rng, 12, m, n, dim)
        fixed = None
        if wiring.tree != "none":
            fixed = FixedStructure.from_result(forward(store, ex, wiring, "eval"))

        def loss() -> Tensor:
            return grounding_loss(forward(store, ex, wiring, "eval", fixed=fixed).scores, ex.gt)

        report = dc.check_gradients(loss, store.named(), tol=tol, max_entries=max_entries, rng=rng)
        cases.append(GradientCase(m, n, report.worst, report.passed))
    return cases
