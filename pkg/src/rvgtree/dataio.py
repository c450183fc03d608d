"""Vocabulary, synthetic grounding corpus with a brute-force oracle, and file IO.

File formats
------------
scenes.txt        ``scene <id> <n> <d>`` header, then n lines of d reals,
                  optionally followed by 4 box coordinates ``x1 y1 x2 y2``.
expressions.tsv   ``<expr id>\\t<scene id>\\t<gt index>\\t<raw expression>``
experts.tsv       ``<expr id>\\t<bracketed binary tree over pruned tokens>``
symbolic.jsonl    one JSON object per scene with its symbolic objects
manifest.json     counts, region width, vocabulary checksum
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encoders import PAD_ID, UNK_ID
from .treebuilder import (ExpertTree, binarize_constituency, load_expert_trees, prune_sentence,
                          tokenize, write_expert_trees)

log = logging.getLogger(__name__)

PAD = "<pad>"
UNK = "<unk>"

CATEGORIES = ("dog", "cat", "tree", "car", "table", "sofa")
COLORS = ("black", "white", "red", "blue")
SIZES = ("small", "big")
RELATIONS = {"left of": ("left", "of"), "right of": ("right", "of"), "on": ("on",), "below": ("below",)}
GRID = 6
CELL_PX = 100.0


class DataError(ValueError):
    pass


class GrammarError(ValueError):
    pass


# -- vocabulary -------------------------------------------------------------


@dataclass
class Vocabulary:
    itos: list[str]
    freq: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if self.itos[:2] != [PAD, UNK] or len(self.stoi) != len(self.itos):
            raise ValueError("vocabulary must start with pad, unk and hold unique tokens")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, tok: str) -> bool:
        return tok in self.stoi

    def id(self, tok: str) -> int:
        return self.stoi.get(tok, UNK_ID)

    def encode(self, tokens: Sequence[str], max_len: int | None = None) -> np.ndarray:
        """Token ids, padded with ``pad`` up to ``max_len`` when given."""
        ids = [self.id(t) for t in tokens]
        if max_len is not None:
            if len(ids) > max_len:
                raise ValueError(f"{len(ids)} tokens exceed max length {max_len}")
            ids += [PAD_ID] * (max_len - len(ids))
        return np.array(ids, dtype=np.intp)

    def checksum(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode()).hexdigest()[:16]


def build_vocab(corpus: Iterable[Sequence[str]], min_freq: int = 5) -> Vocabulary:
    """Tokens seen fewer than ``min_freq`` times fall back to ``unk``.

    Ids after the reserved pair are assigned by descending frequency, ties
    broken lexicographically.
    """
    counts = Counter(tok for sent in corpus for tok in sent)
    if not counts:
        raise ValueError("empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_freq and t not in (PAD, UNK)),
                  key=lambda t: (-counts[t], t))
    return Vocabulary([PAD, UNK, *kept], dict(counts))


def truncate(tokens: Sequence[str], max_len: int) -> list[str]:
    if max_len < 1:
        raise ValueError("max length must be at least 1")
    return list(tokens[:max_len])


# -- symbolic scenes and oracle ------------------------------------------------


@dataclass(frozen=True)
class SceneObject:
    category: str
    color: str
    size: str
    x: int
    y: int


@dataclass
class NounPhrase:
    noun: str
    color: str | None = None
    size: str | None = None

    def tokens(self) -> list[str]:
        return [t for t in (self.size, self.color, self.noun) if t]

    def matches(self, obj: SceneObject) -> bool:
        return (obj.category == self.noun and (self.color is None or obj.color == self.color)
                and (self.size is None or obj.size == self.size))


@dataclass
class ParsedExpression:
    head: NounPhrase
    relation: str | None = None
    context: NounPhrase | None = None


def holds(relation: str, a: SceneObject, b: SceneObject) -> bool:
    """Spatial relation on grid cells; y grows downward."""
    if relation == "left of":
        return a.x < b.x
    if relation == "right of":
        return a.x > b.x
    if relation == "on":
        return a.y < b.y and abs(a.x - b.x) <= 1
    if relation == "below":
        return a.y > b.y and abs(a.x - b.x) <= 1
    raise GrammarError(f"unknown relation {relation!r}")


def _parse_np(tokens: list[str], i: int) -> tuple[NounPhrase, int]:
    size = color = None
    if i < len(tokens) and tokens[i] in SIZES:
        size, i = tokens[i], i + 1
    if i < len(tokens) and tokens[i] in COLORS:
        color, i = tokens[i], i + 1
    if i >= len(tokens) or tokens[i] not in CATEGORIES:
        raise GrammarError(f"expected a noun at position {i} of {tokens}")
    return NounPhrase(tokens[i], color, size), i + 1


def parse_expression(tokens: Sequence[str]) -> ParsedExpression:
    toks = [t for t in tokens if t not in ("a", "an", "the")]
    head, i = _parse_np(toks, 0)
    if i == len(toks):
        return ParsedExpression(head)
    for name, words in RELATIONS.items():
        if tuple(toks[i:i + len(words)]) == words:
            ctx, j = _parse_np(toks, i + len(words))
            if j != len(toks):
                raise GrammarError(f"trailing tokens {toks[j:]}")
            return ParsedExpression(head, name, ctx)
    raise GrammarError(f"expected a relation at position {i} of {toks}")


def oracle_referent(objects: Sequence[SceneObject], tokens: Sequence[str]) -> int | str:
    """Brute-force denotation: a unique index, ``"ambiguous"`` or ``"none"``."""
    expr = parse_expression(tokens)
    hits = []
    for i, obj in enumerate(objects):
        if not expr.head.matches(obj):
            continue
        if expr.relation is not None and not any(
                j != i and expr.context.matches(o) and holds(expr.relation, obj, o)
                for j, o in enumerate(objects)):
            continue
        hits.append(i)
    if not hits:
        return "none"
    return hits[0] if len(hits) == 1 else "ambiguous"


def expression_tree(expr: ParsedExpression):
    """Multi-branch constituency tree: NP, or [NP, [relation words..., NP]]."""
    def np_node(p: NounPhrase):
        toks = p.tokens()
        return toks[0] if len(toks) == 1 else toks

    if expr.relation is None:
        return np_node(expr.head)
    return [np_node(expr.head), [*RELATIONS[expr.relation], np_node(expr.context)]]


def region_feature(obj: SceneObject, d: int, rng: np.random.Generator, noise: float = 0.05) -> np.ndarray:
    """One-hot category/color/size blocks, normalized (x, y), then Gaussian noise."""
    base = len(CATEGORIES) + len(COLORS) + len(SIZES) + 2
    if d < base:
        raise ValueError(f"region width {d} cannot hold the {base}-dim attribute encoding")
    f = np.zeros(d)
    f[CATEGORIES.index(obj.category)] = 1.0
    o = len(CATEGORIES)
    f[o + COLORS.index(obj.color)] = 1.0
    o += len(COLORS)
    f[o + SIZES.index(obj.size)] = 1.0
    o += len(SIZES)
    f[o] = obj.x / (GRID - 1)
    f[o + 1] = obj.y / (GRID - 1)
    return f + rng.normal(0.0, noise, d)


def object_box(obj: SceneObject) -> tuple[float, float, float, float]:
    pad = 10.0 if obj.size == "big" else 30.0
    x0, y0 = obj.x * CELL_PX, obj.y * CELL_PX
    return (x0 + pad, y0 + pad, x0 + CELL_PX - pad, y0 + CELL_PX - pad)


# -- datasets -----------------------------------------------------------------


@dataclass
class Scene:
    id: str
    features: np.ndarray  # (n, d)
    boxes: list[tuple[float, float, float, float]] | None = None

    @property
    def n(self) -> int:
        return self.features.shape[0]


@dataclass
class ExpressionRecord:
    id: str
    scene_id: str
    gt: int
    text: str


@dataclass
class SyntheticSample:
    scene: Scene
    objects: list[SceneObject]
    expression: ExpressionRecord
    tree: object  # multi-branch constituency tree over pruned tokens


@dataclass
class CorpusConfig:
    n_scenes: int = 1000
    objects_per_scene: int = 5
    d: int = 32
    noise: float = 0.05
    relation_rate: float = 0.5
    determiner_rate: float = 0.3
    split: tuple[float, float, float] = (0.7, 0.15, 0.15)
    max_retries: int = 200


def _candidate_expressions(objects: Sequence[SceneObject], ref: int):
    obj = objects[ref]
    attr_choices = list(itertools.product((None, obj.size), (None, obj.color)))
    plain, relational = [], []
    for size, color in attr_choices:
        head = NounPhrase(obj.category, color, size)
        e = ParsedExpression(head)
        if oracle_referent(objects, head.tokens()) == ref:
            plain.append(e)
        for j, ctx_obj in enumerate(objects):
            if j == ref:
                continue
            for rel in RELATIONS:
                if not holds(rel, obj, ctx_obj):
                    continue
                for csize, ccolor in itertools.product((None, ctx_obj.size), (None, ctx_obj.color)):
                    ctx = NounPhrase(ctx_obj.category, ccolor, csize)
                    if oracle_referent(objects, ctx.tokens()) != j:
                        continue
                    e = ParsedExpression(head, rel, ctx)
                    if oracle_referent(objects, _expr_tokens(e)) == ref:
                        relational.append(e)
    return plain, relational


def _expr_tokens(e: ParsedExpression) -> list[str]:
    toks = e.head.tokens()
    if e.relation is not None:
        toks += [*RELATIONS[e.relation], *e.context.tokens()]
    return toks


def _random_objects(rng: np.random.Generator, k: int) -> list[SceneObject]:
    cells = rng.choice(GRID * GRID, size=k, replace=False)
    return [SceneObject(CATEGORIES[rng.integers(len(CATEGORIES))], COLORS[rng.integers(len(COLORS))],
                        SIZES[rng.integers(len(SIZES))], int(c % GRID), int(c // GRID)) for c in cells]


def generate_corpus(seed: int, config: CorpusConfig = CorpusConfig()) -> dict[str, list[SyntheticSample]]:
    """Rejection-sample scenes with one unambiguous expression each.

    Returns ``{"train": [...], "val": [...], "test": [...]}`` split by scene.
    """
    if config.objects_per_scene < 2:
        raise ValueError("need at least two objects per scene")
    if config.objects_per_scene > GRID * GRID:
        raise ValueError("more objects than grid cells")
    rng = np.random.default_rng(seed)
    samples: list[SyntheticSample] = []
    for s in range(config.n_scenes):
        for _ in range(config.max_retries):
            objects = _random_objects(rng, config.objects_per_scene)
            ref = int(rng.integers(len(objects)))
            plain, relational = _candidate_expressions(objects, ref)
            pool = relational if relational and (not plain or rng.random() < config.relation_rate) else plain
            if pool:
                break
        else:
            raise DataError(f"could not sample an unambiguous expression in {config.max_retries} tries")
        expr = pool[int(rng.integers(len(pool)))]
        toks = _expr_tokens(expr)
        if rng.random() < config.determiner_rate:
            toks = ["a", *toks]
        sid = f"s{s:05d}"
        feats = np.stack([region_feature(o, config.d, rng, config.noise) for o in objects])
        scene = Scene(sid, feats, [object_box(o) for o in objects])
        rec = ExpressionRecord(f"e{s:05d}", sid, ref, " ".join(toks))
        samples.append(SyntheticSample(scene, objects, rec, expression_tree(expr)))
    n_train = int(round(config.split[0] * len(samples)))
    n_val = int(round(config.split[1] * len(samples)))
    order = rng.permutation(len(samples))
    picked = [samples[i] for i in order]
    return {"train": picked[:n_train], "val": picked[n_train:n_train + n_val],
            "test": picked[n_train + n_val:]}


def verify_corpus(samples: Iterable[SyntheticSample]) -> int:
    """Check every record against the oracle; returns the count checked."""
    n = 0
    for s in samples:
        got = oracle_referent(s.objects, prune_sentence(tokenize(s.expression.text)))
        if got != s.expression.gt:
            raise DataError(f"{s.expression.id}: oracle says {got}, record says {s.expression.gt}")
        n += 1
    return n


# -- scene / expression files -----------------------------------------------------


def write_scenes(path: str | Path, scenes: Iterable[Scene]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sc in scenes:
            n, d = sc.features.shape
            fh.write(f"scene {sc.id} {n} {d}\n")
            for i in range(n):
                vals = [repr(float(v)) for v in sc.features[i]]
                if sc.boxes is not None:
                    vals += [repr(float(v)) for v in sc.boxes[i]]
                fh.write(" ".join(vals) + "\n")


def load_scenes(path: str | Path) -> dict[str, Scene]:
    path = Path(path)
    scenes: dict[str, Scene] = {}
    with open(path, encoding="utf-8") as fh:
        lines = [(i, ln.strip()) for i, ln in enumerate(fh, 1)]
    lines = [(i, ln) for i, ln in lines if ln and not ln.startswith("#")]
    k = 0
    while k < len(lines):
        lineno, header = lines[k]
        parts = header.split()
        if len(parts) != 4 or parts[0] != "scene":
            raise DataError(f"{path}:{lineno}: expected 'scene <id> <n> <d>'")
        sid = parts[1]
        try:
            n, d = int(parts[2]), int(parts[3])
        except ValueError:
            raise DataError(f"{path}:{lineno}: region count and width must be integers") from None
        if n < 1 or d < 1:
            raise DataError(f"{path}:{lineno}: scene needs n >= 1 and d >= 1")
        if sid in scenes:
            raise DataError(f"{path}:{lineno}: duplicate scene id {sid!r}")
        rows = lines[k + 1:k + 1 + n]
        if len(rows) != n:
            raise DataError(f"{path}:{lineno}: scene {sid} declares {n} regions, found {len(rows)}")
        feats, boxes = [], []
        for rl, row in rows:
            try:
                vals = [float(v) for v in row.split()]
            except ValueError:
                raise DataError(f"{path}:{rl}: non-numeric region value") from None
            if len(vals) == d:
                boxes.append(None)
            elif len(vals) == d + 4:
                box = tuple(vals[d:])
                if not (box[2] > box[0] and box[3] > box[1]):
                    raise DataError(f"{path}:{rl}: degenerate box {box}")
                boxes.append(box)
            else:
                raise DataError(f"{path}:{rl}: expected {d} (or {d + 4}) values, got {len(vals)}")
            if not np.all(np.isfinite(vals)):
                raise DataError(f"{path}:{rl}: non-finite region value")
            feats.append(vals[:d])
        if any(b is None for b in boxes) and not all(b is None for b in boxes):
            raise DataError(f"{path}:{lineno}: scene {sid} mixes boxed and unboxed regions")
        scenes[sid] = Scene(sid, np.array(feats), None if boxes[0] is None else boxes)
        k += 1 + n
    return scenes


def write_expressions(path: str | Path, records: Iterable[ExpressionRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(f"{r.id}\t{r.scene_id}\t{r.gt}\t{r.text}\n")


def load_expressions(path: str | Path, scenes: dict[str, Scene] | None = None) -> list[ExpressionRecord]:
    path = Path(path)
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields")
            eid, sid, gt, text = parts
            try:
                gt = int(gt)
            except ValueError:
                raise DataError(f"{path}:{lineno}: gt index must be an integer") from None
            if scenes is not None:
                if sid not in scenes:
                    raise DataError(f"{path}:{lineno}: unknown scene {sid!r}")
                if not 0 <= gt < scenes[sid].n:
                    raise DataError(f"{path}:{lineno}: gt index {gt} out of range for {scenes[sid].n} regions")
            out.append(ExpressionRecord(eid, sid, gt, text))
    return out


def write_split(out_dir: str | Path, samples: Sequence[SyntheticSample]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_scenes(out / "scenes.txt", (s.scene for s in samples))
    write_expressions(out / "expressions.tsv", (s.expression for s in samples))
    write_expert_trees(out / "experts.tsv",
                       {s.expression.id: binarize_constituency(s.tree) for s in samples})
    with open(out / "symbolic.jsonl", "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps({"scene": s.scene.id, "objects": [asdict(o) for o in s.objects]}) + "\n")


def load_symbolic(path: str | Path) -> dict[str, list[SceneObject]]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out[rec["scene"]] = [SceneObject(**o) for o in rec["objects"]]
    return out


def file_digest(paths: Iterable[str | Path]) -> str:
    h = hashlib.sha256()
    for p in sorted(str(p) for p in paths):
        with open(p, "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()


# -- model-ready examples ---------------------------------------------------------


@dataclass
class Example:
    id: str
    tokens: list[str]  # pruned, truncated
    ids: np.ndarray  # padded to max_len
    regions: np.ndarray  # (n, d)
    gt: int
    boxes: list | None = None
    expert: ExpertTree | None = None

    @property
    def m(self) -> int:
        return len(self.tokens)


@dataclass
class Split:
    scenes: dict[str, Scene]
    records: list[ExpressionRecord]
    experts: dict[str, ExpertTree] | None = None

    def token_lists(self) -> list[list[str]]:
        return [prune_sentence(tokenize(r.text)) for r in self.records]


def load_split(split_dir: str | Path, require_experts: bool = False) -> Split:
    d = Path(split_dir)
    scenes = load_scenes(d / "scenes.txt")
    records = load_expressions(d / "expressions.tsv", scenes)
    experts = None
    exp_path = d / "experts.tsv"
    if exp_path.exists():
        pruned = {r.id: prune_sentence(tokenize(r.text)) for r in records}
        experts = load_expert_trees(exp_path, pruned)
    elif require_experts:
        raise FileNotFoundError(f"expert tree file not found: {exp_path}")
    return Split(scenes, records, experts)


def make_examples(split: Split, vocab: Vocabulary, max_len: int) -> list[Example]:
    out = []
    dropped = 0
    for r in split.records:
        full = prune_sentence(tokenize(r.text))
        toks = truncate(full, max_len)
        expert = split.experts.get(r.id) if split.experts else None
        if expert is not None and len(toks) != len(full):
            expert, dropped = None, dropped + 1
        sc = split.scenes[r.scene_id]
        out.append(Example(r.id, toks, vocab.encode(toks, max_len), sc.features, r.gt,
                           sc.boxes, expert))
    if dropped:
        log.warning("dropped %d expert trees whose expressions were truncated", dropped)
    return out


def manifest(splits: dict[str, Split], vocab: Vocabulary | None = None) -> dict:
    info = {name: {"scenes": len(s.scenes), "expressions": len(s.records)} for name, s in splits.items()}
    widths = {sc.features.shape[1] for s in splits.values() for sc in s.scenes.values()}
    if len(widths) > 1:
        raise DataError(f"inconsistent region widths across splits: {sorted(widths)}")
    out = {"splits": info, "d": widths.pop() if widths else None}
    if vocab is not None:
        out["vocab_size"] = len(vocab)
        out["vocab_checksum"] = vocab.checksum()
    return out

