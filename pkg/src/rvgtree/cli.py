"""Command-line entry points: ``rvgtree <command> [options]``.

Exit codes: 0 ok, 1 usage or config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import re
import sys
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dataio
from .dataio import DataError, Example, Vocabulary
from .training import (VARIANTS, ConfigError, NumericalError, ParameterStore, TrainConfig,
                       configure_ablation, evaluate, forward, gradient_suite, is_correct, train)
from .treebuilder import TreeError, UnparseableExpression, prune_sentence, tokenize

log = logging.getLogger("rvgtree")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


# -- manifests and atomic output ----------------------------------------------------


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    input_hash: str
    outputs: list[str] = field(default_factory=list)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        atomic_write(path, json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def hash_inputs(paths: Sequence[Path], config: dict) -> str:
    h = hashlib.sha256(json.dumps(config, sort_keys=True).encode())
    files = sorted(p for p in paths if p.is_file())
    if files:
        h.update(dataio.file_digest(files).encode())
    return h.hexdigest()


def split_files(data: Path, split: str) -> list[Path]:
    return [data / split / name for name in ("scenes.txt", "expressions.tsv", "experts.tsv")]


# -- config ---------------------------------------------------------------------------


def resolve_config(args: argparse.Namespace) -> TrainConfig:
    """Built-in defaults, overlaid by ``--config``, overlaid by command-line flags."""
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    overrides: dict = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides.update(TrainConfig.parse_assignments(item, "--set"))
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "variant", None):
        overrides["variant"] = args.variant
    if args.tau is not None:
        overrides["tau"] = args.tau
    if args.no_noise:
        overrides["noise"] = False
    return cfg.updated(**overrides)


def worker_count() -> int:
    raw = os.environ.get("RVG_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"RVG_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"RVG_THREADS must be a positive integer, got {raw!r}")
    return n


# -- data helpers ------------------------------------------------------------------


def load_examples(data: Path, split: str, vocab: Vocabulary, max_len: int,
                  require_experts: bool = False) -> list[Example]:
    split_dir = data / split
    if not split_dir.is_dir():
        raise DataError(f"split directory not found: {split_dir}")
    return dataio.make_examples(dataio.load_split(split_dir, require_experts), vocab, max_len)


def vocab_from_train(data: Path, min_freq: int) -> Vocabulary:
    train_dir = data / "train"
    if not train_dir.is_dir():
        raise DataError(f"split directory not found: {train_dir}")
    return dataio.build_vocab(dataio.load_split(train_dir).token_lists(), min_freq)


def region_width(examples: Sequence[Example]) -> int:
    if not examples:
        raise DataError("no examples to train on")
    return int(examples[0].regions.shape[1])


def load_checkpoint(path: Path) -> tuple[ParameterStore, Vocabulary, TrainConfig]:
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    store, extra = ParameterStore.load(path)
    vocab = Vocabulary(extra["vocab"])
    cfg = TrainConfig().updated(**extra["config"])
    if len(vocab) != store.dims["vocab_size"]:
        raise DataError(f"{path}: vocabulary size {len(vocab)} does not match embedding rows "
                        f"{store.dims['vocab_size']}")
    return store, vocab, cfg


def check_dims(store: ParameterStore, examples: Sequence[Example], where: str) -> None:
    for ex in examples:
        if ex.regions.shape[1] != store.dims["region_dim"]:
            raise DataError(f"{where}: region features have width {ex.regions.shape[1]}, "
                            f"checkpoint expects {store.dims['region_dim']}")


def parallel_evaluate(store: ParameterStore, examples: Sequence[Example], variant: str,
                      workers: int) -> tuple[float, list[int]]:
    wiring = configure_ablation(variant)
    if workers <= 1 or len(examples) < 2:
        return evaluate(store, examples, wiring)
    from concurrent.futures import ThreadPoolExecutor

    from .training import predict
    with ThreadPoolExecutor(max_workers=workers) as pool:
        preds = list(pool.map(lambda ex: predict(store, ex, wiring), examples))
    acc = sum(is_correct(ex, p) for ex, p in zip(examples, preds)) / len(preds)
    return acc, preds


# -- commands ---------------------------------------------------------------------


def cmd_gen(args: argparse.Namespace) -> int:
    out = Path(args.out)
    cfg = dataio.CorpusConfig(n_scenes=args.scenes, objects_per_scene=args.objects, d=args.dim,
                              split=tuple(args.split))
    seed = args.seed if args.seed is not None else 0
    data = dataio.generate_corpus(seed, cfg)
    for samples in data.values():
        dataio.verify_corpus(samples)
    for name, samples in data.items():
        dataio.write_split(out / name, samples)
    splits = {name: dataio.load_split(out / name) for name in data}
    vocab = dataio.build_vocab(splits["train"].token_lists(), args.min_freq)
    info = dataio.manifest(splits, vocab)
    atomic_write(out / "dataset.json", json.dumps(info, indent=2, sort_keys=True) + "\n")
    outputs = [str(out / "dataset.json")] + [str(out / n) for n in data]
    RunManifest("gen", asdict(cfg), seed, hash_inputs([], asdict(cfg)), outputs).write(out)
    print(json.dumps(info["splits"], sort_keys=True))
    return EXIT_OK


def _train_command(args: argparse.Namespace, phase: str) -> int:
    cfg = resolve_config(args).updated(phase=phase)
    data, out = Path(args.data), Path(args.out)
    wiring = configure_ablation(cfg.variant)
    if args.init:
        store, vocab, _ = load_checkpoint(Path(args.init))
    else:
        vocab = vocab_from_train(data, cfg.min_freq)
        store = None
    need_experts = phase == "pretrain" or wiring.tree == "expert"
    examples = load_examples(data, "train", vocab, cfg.max_len, require_experts=need_experts)
    if store is None:
        store = ParameterStore(len(vocab), cfg.emb_dim, cfg.hidden, region_width(examples), cfg.seed)
    check_dims(store, examples, str(data / "train"))
    if phase == "pretrain":
        schedule = [("pretrain" if wiring.tree == "latent" else "train", cfg.pretrain_epochs)]
    else:
        schedule = [("train", cfg.finetune_epochs)]
    val = load_examples(data, "val", vocab, cfg.max_len) if (data / "val").is_dir() else None
    lines: list[str] = []
    hist = train(store, examples, cfg, wiring, eval_examples=val, log_fn=lines.append,
                 schedule=schedule)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.npz"
    store.save(ckpt, {"vocab": vocab.itos, "config": asdict(cfg)})
    atomic_write(out / "train.log", "".join(line + "\n" for line in lines))
    metrics = {"epochs": hist.epochs, "skipped": hist.skipped, "steps": store.step}
    atomic_write(out / "metrics.json", json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    inputs = split_files(data, "train") + ([Path(args.init)] if args.init else [])
    RunManifest(phase, asdict(cfg), cfg.seed, hash_inputs(inputs, asdict(cfg)),
                [str(ckpt), str(out / "train.log"), str(out / "metrics.json")]).write(out)
    if hist.epochs:
        print(json.dumps(hist.epochs[-1], sort_keys=True))
    return EXIT_OK


def cmd_pretrain(args: argparse.Namespace) -> int:
    return _train_command(args, "pretrain")


def cmd_finetune(args: argparse.Namespace) -> int:
    return _train_command(args, "finetune")


def cmd_eval(args: argparse.Namespace) -> int:
    ckpt, data = Path(args.checkpoint), Path(args.data)
    store, vocab, cfg = load_checkpoint(ckpt)
    examples = load_examples(data, args.split, vocab, cfg.max_len)
    check_dims(store, examples, str(data / args.split))
    acc, preds = parallel_evaluate(store, examples, cfg.variant, worker_count())
    report = {"split": args.split, "total": len(examples),
              "correct": int(sum(is_correct(ex, p) for ex, p in zip(examples, preds))),
              "accuracy": acc, "variant": cfg.variant}
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        out = Path(args.out)
        outputs = [out / "eval.json"]
        atomic_write(out / "eval.json", text)
        if args.dump:
            rows = "".join(f"{ex.id}\t{p}\t{ex.gt}\t{int(is_correct(ex, p))}\n"
                           for ex, p in zip(examples, preds))
            atomic_write(out / "predictions.tsv", "id\tpred\tgt\tcorrect\n" + rows)
            outputs.append(out / "predictions.tsv")
        RunManifest("eval", asdict(cfg), cfg.seed,
                    hash_inputs([ckpt, *split_files(data, args.split)], asdict(cfg)),
                    [str(p) for p in outputs]).write(out)
    print(text, end="")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    base = resolve_config(args)
    data, out = Path(args.data), Path(args.out)
    vocab = vocab_from_train(data, base.min_freq)
    train_ex = load_examples(data, "train", vocab, base.max_len, require_experts=True)
    test_ex = load_examples(data, args.split, vocab, base.max_len)
    rows = []
    for variant in args.variants:
        cfg = base.updated(variant=variant)
        store = ParameterStore(len(vocab), cfg.emb_dim, cfg.hidden, region_width(train_ex), cfg.seed)
        train(store, train_ex, cfg)
        acc, _ = evaluate(store, test_ex, configure_ablation(variant))
        rows.append((variant, acc))
        log.info("%s accuracy %.4f", variant, acc)
    table = "variant\taccuracy\n" + "".join(f"{v}\t{a:.6f}\n" for v, a in rows)
    atomic_write(out / "ablation.tsv", table)
    cfg_dict = {**asdict(base), "variants": list(args.variants), "split": args.split}
    RunManifest("ablate", cfg_dict, base.seed,
                hash_inputs(split_files(data, "train") + split_files(data, args.split), cfg_dict),
                [str(out / "ablation.tsv")]).write(out)
    print(table, end="")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    resolve_config(args)
    seed = args.seed if args.seed is not None else 0
    cases = gradient_suite(args.configs, seed=seed, tol=args.tol,
                           variant=args.variant or "Full")
    for i, c in enumerate(cases):
        print(f"config {i:3d} m={c.m} n={c.n} max_rel_error={c.max_rel_error:.3e} "
              f"{'ok' if c.passed else 'FAIL'}")
    worst = max(c.max_rel_error for c in cases)
    ok = all(c.passed for c in cases)
    print(f"gradcheck {'passed' if ok else 'failed'}: worst relative error {worst:.3e} (tol {args.tol:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


# -- visualization ----------------------------------------------------------------


def _dot_quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n") + '"'


def tree_to_dot(result, tokens: Sequence[str], name: str = "rvgtree") -> str:
    """DOT text with one node per tree node, children visited left to right."""
    tree, trace = result.tree, result.trace
    lines = [f"digraph {_dot_quote(name)} {{", "  node [shape=circle];"]
    edges = []
    for node in tree.postorder():
        nt = trace.nodes.get(node.id)
        role = nt.role if nt is not None else "root"
        scores = nt.total if nt is not None and nt.total is not None else np.zeros(result.scores.shape[0])
        top = np.argsort(-scores, kind="stable")[:3]
        words = " ".join(tokens[node.span[0]:node.span[1]])
        label = (f"[{node.span[0]},{node.span[1]}) {words}\n{role}\n"
                 + " ".join(f"r{i}:{scores[i]:.3f}" for i in top))
        color = "red" if role == "score" else "black"
        lines.append(f"  n{node.id} [label={_dot_quote(label)}, color={color}];")
        if not node.is_leaf:
            edges += [(node.id, node.left), (node.id, node.right)]
    lines += [f"  n{a} -> n{b};" for a, b in edges]
    lines.append("}")
    return "\n".join(lines) + "\n"


_DOT_TOKEN = re.compile(r'\s*(?:(->|--)|([{}\[\];,=])|"((?:[^"\\]|\\.)*)"|([A-Za-z0-9_.]+))')


def parse_dot(text: str) -> tuple[str, dict[str, dict[str, str]], list[tuple[str, str]]]:
    """Parse the DOT subset this module emits: returns (graph name, nodes, edges)."""
    toks: list[tuple[str, str]] = []
    pos = 0
    text = text.rstrip()
    while pos < len(text):
        m = _DOT_TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            raise ValueError(f"unexpected character at offset {pos}: {text[pos:pos + 10]!r}")
        pos = m.end()
        arrow, punct, quoted, ident = m.groups()
        if arrow:
            toks.append(("edge", arrow))
        elif punct:
            toks.append(("punct", punct))
        elif quoted is not None:
            toks.append(("id", re.sub(r"\\(.)", lambda e: "\n" if e.group(1) == "n" else e.group(1),
                                      quoted)))
        elif ident:
            toks.append(("id", ident))
    i = 0

    def expect(kind: str, value: str | None = None) -> str:
        nonlocal i
        if i >= len(toks) or toks[i][0] != kind or (value is not None and toks[i][1] != value):
            got = toks[i] if i < len(toks) else "end of input"
            raise ValueError(f"expected {value or kind}, got {got}")
        i += 1
        return toks[i - 1][1]

    def attrs() -> dict[str, str]:
        nonlocal i
        out = {}
        expect("punct", "[")
        while toks[i] != ("punct", "]"):
            key = expect("id")
            expect("punct", "=")
            out[key] = expect("id")
            if toks[i] == ("punct", ","):
                i += 1
        expect("punct", "]")
        return out

    if expect("id") not in ("digraph", "graph"):
        raise ValueError("graph must start with 'digraph' or 'graph'")
    name = expect("id") if toks[i][0] == "id" else ""
    expect("punct", "{")
    nodes: dict[str, dict[str, str]] = {}
    edges: list[tuple[str, str]] = []
    while toks[i] != ("punct", "}"):
        head = expect("id")
        if i < len(toks) and toks[i][0] == "edge":
            i += 1
            tail = expect("id")
            edges.append((head, tail))
            if toks[i] == ("punct", "["):
                attrs()
        elif head in ("node", "edge", "graph"):
            attrs()
        else:
            nodes[head] = attrs() if toks[i] == ("punct", "[") else {}
        expect("punct", ";")
    expect("punct", "}")
    if i != len(toks):
        raise ValueError("trailing tokens after graph body")
    for a, b in edges:
        if a not in nodes or b not in nodes:
            raise ValueError(f"edge {a} -> {b} references an undeclared node")
    return name, nodes, edges


def role_frequencies(results: Sequence[tuple[Sequence[str], object]]) -> dict[str, Counter]:
    """Per-word counts of the role its leaf played (score, feature or root)."""
    table: dict[str, Counter] = {}
    for tokens, result in results:
        for leaf in result.tree.leaves():
            nt = result.trace.nodes.get(leaf.id)
            role = nt.role if nt is not None else "root"
            table.setdefault(tokens[leaf.span[0]], Counter())[role] += 1
    return table


def format_role_report(table: dict[str, Counter]) -> str:
    """Rows of raw counts plus an add-one smoothed score-role rate."""
    lines = ["word\tscore\tfeature\troot\ttotal\tp_score_smoothed"]
    for word in sorted(table, key=lambda w: (-sum(table[w].values()), w)):
        c = table[word]
        total = sum(c.values())
        p = (c["score"] + 1) / (c["score"] + c["feature"] + 2)
        lines.append(f"{word}\t{c['score']}\t{c['feature']}\t{c['root']}\t{total}\t{p:.4f}")
    return "\n".join(lines) + "\n"


def cmd_viz(args: argparse.Namespace) -> int:
    ckpt, data = Path(args.checkpoint), Path(args.data)
    store, vocab, cfg = load_checkpoint(ckpt)
    wiring = configure_ablation(cfg.variant)
    if wiring.tree == "none":
        raise UsageError(f"variant {cfg.variant} builds no tree to visualize")
    split = dataio.load_split(data / args.split)
    examples = dataio.make_examples(split, vocab, cfg.max_len)
    check_dims(store, examples, str(data / args.split))
    if wiring.tree == "expert":
        examples = [ex for ex in examples if ex.expert is not None]
    if args.text is not None:
        if args.scene not in split.scenes:
            raise DataError(f"unknown scene {args.scene!r}")
        toks = dataio.truncate(prune_sentence(tokenize(args.text)), cfg.max_len)
        if not toks:
            raise DataError("expression is empty after pruning")
        sc = split.scenes[args.scene]
        target = Example("cli", toks, vocab.encode(toks, cfg.max_len), sc.features, 0, sc.boxes)
        if wiring.tree == "expert":
            raise UsageError("free-text visualization needs a latent-tree variant")
    else:
        by_id = {ex.id: ex for ex in examples}
        key = args.expression or (examples[0].id if examples else None)
        if key not in by_id:
            raise DataError(f"unknown expression id {key!r}")
        target = by_id[key]
    result = forward(store, target, wiring, "eval")
    dot = tree_to_dot(result, target.tokens, target.id)
    _, nodes, edges = parse_dot(dot)
    if len(nodes) != 2 * target.m - 1 or len(edges) != 2 * target.m - 2:
        raise RuntimeError("DOT round-trip lost nodes or edges")
    limit = args.limit if args.limit is not None else len(examples)
    table = role_frequencies([(ex.tokens, forward(store, ex, wiring, "eval")) for ex in examples[:limit]])
    report = format_role_report(table)
    if args.out:
        out = Path(args.out)
        atomic_write(out / "tree.dot", dot)
        atomic_write(out / "roles.tsv", report)
        cfg_dict = {**asdict(cfg), "split": args.split, "expression": target.id, "limit": limit}
        RunManifest("viz", cfg_dict, cfg.seed,
                    hash_inputs([ckpt, *split_files(data, args.split)], cfg_dict),
                    [str(out / "tree.dot"), str(out / "roles.tsv")]).write(out)
    else:
        print(dot, end="")
        print(report, end="")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--variant", choices=VARIANTS)
    common.add_argument("--out", help="output directory")
    common.add_argument("--tau", type=float, help="Gumbel-Softmax temperature")
    common.add_argument("--no-noise", action="store_true", help="disable Gumbel noise")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="rvgtree", description="Recursive grounding tree toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic corpus")
    g.add_argument("--scenes", type=int, default=1000)
    g.add_argument("--objects", type=int, default=5)
    g.add_argument("--dim", type=int, default=32)
    g.add_argument("--split", type=float, nargs=3, default=(0.7, 0.15, 0.15))
    g.add_argument("--min-freq", type=int, default=5)
    g.set_defaults(func=cmd_gen, need_out=True)

    for name, fn in (("pretrain", cmd_pretrain), ("finetune", cmd_finetune)):
        t = sub.add_parser(name, parents=[common], help=f"{name} on a generated corpus")
        t.add_argument("--data", required=True, help="corpus directory (train/val/test)")
        t.add_argument("--init", help="checkpoint to start from")
        t.set_defaults(func=fn, need_out=True)

    e = sub.add_parser("eval", parents=[common], help="top-1 accuracy of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--dump", action="store_true", help="also write per-example predictions")
    e.set_defaults(func=cmd_eval, need_out=False)

    a = sub.add_parser("ablate", parents=[common], help="train and evaluate several variants")
    a.add_argument("--data", required=True)
    a.add_argument("--split", default="test")
    a.add_argument("--variants", nargs="+", choices=VARIANTS,
                   default=["Full", "NoS", "NoF", "NoNode", "Chain"])
    a.set_defaults(func=cmd_ablate, need_out=True)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    c.add_argument("--configs", type=int, default=20)
    c.add_argument("--tol", type=float, default=1e-3)
    c.set_defaults(func=cmd_gradcheck, need_out=False)

    v = sub.add_parser("viz", parents=[common], help="DOT tree and role-frequency report")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--split", default="test")
    v.add_argument("--expression", help="expression id to draw (default: first in split)")
    v.add_argument("--text", help="free-text expression (needs --scene)")
    v.add_argument("--scene", help="scene id for --text")
    v.add_argument("--limit", type=int, help="expressions counted in the role report")
    v.set_defaults(func=cmd_viz, need_out=False)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.need_out and not args.out:
            raise UsageError(f"{args.command} needs --out DIR")
        if args.command == "viz" and args.text is not None and args.scene is None:
            raise UsageError("--text needs --scene")
        worker_count()
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"rvgtree: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError) as exc:
        print(f"rvgtree: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, TreeError, UnparseableExpression, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"rvgtree: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
