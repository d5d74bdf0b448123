"""``mccrs`` command-line entry point.

Exit codes: 0 ok, 1 validation, 2 IO, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from sklearn.exceptions import NotFittedError

from . import evaluation, pipeline
from .checkpoint import Checkpoint, file_sha256, load_checked
from .config import RunConfig
from .corpus import Corpus, SyntheticSpec, generate_synthetic, load_corpus, serialize_corpus
from .diagnostics import gradient_suite
from .generator import detokenize
from .nn_core import NumericError

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
TARGETS = ("conv", "graph", "review", "chair", "generator")
SECTIONS = {
    "conv": ("conv",),
    "graph": ("graph",),
    "review": ("review",),
    "chair": ("conv", "graph", "review", "gate"),
    "generator": ("conv", "graph", "review", "decoder"),
}
GRAD_TOLERANCE = 1e-4


class RunLog:
    """Append-only JSON-lines log; every run gets a fresh file."""

    def __init__(self, log_dir: Path, stem: str):
        log_dir.mkdir(parents=True, exist_ok=True)
        k = 1
        while (log_dir / f"{stem}-{k:03d}.jsonl").exists():
            k += 1
        self.path = log_dir / f"{stem}-{k:03d}.jsonl"
        self._fh = self.path.open("a")

    def write(self, event: str, **fields) -> None:
        self._fh.write(json.dumps({"event": event, **fields}, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


# ------------------------------------------------------------- helpers


def _config(args) -> RunConfig:
    config = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config = config.with_overrides(seed=args.seed)
    return config


def _corpus(args, config) -> Corpus:
    return load_corpus(args.corpus or config.paths.corpus)


def _ckpt_dir(args, config) -> Path:
    return Path(getattr(args, "checkpoints", None) or config.paths.checkpoints)


def _fingerprint(config, corpus, target) -> str:
    return config.fingerprint(corpus.content_hash(), SECTIONS[target])


def _write_new(path: Path, data: bytes, force: bool) -> None:
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def load_expert(name, config, corpus, ckpt_dir: Path):
    path = ckpt_dir / f"{name}.ckpt"
    if not path.exists():
        raise FileNotFoundError(f"missing prerequisite checkpoint {path} (run `mccrs train {name}` first)")
    ck = load_checked(path, name, _fingerprint(config, corpus, name))
    return pipeline.MAKERS[name](config).load_state_arrays(corpus, ck.arrays)


def load_experts(config, corpus, ckpt_dir: Path) -> dict:
    return {name: load_expert(name, config, corpus, ckpt_dir) for name in pipeline.EXPERT_NAMES}


def load_chairbot(config, corpus, ckpt_dir: Path, experts: dict):
    path = ckpt_dir / "chair.ckpt"
    if not path.exists():
        raise FileNotFoundError(f"missing prerequisite checkpoint {path} (run `mccrs train chair` first)")
    ck = load_checked(path, "chair", _fingerprint(config, corpus, "chair"))
    for name, sha in ck.meta.get("experts", {}).items():
        if file_sha256(ckpt_dir / f"{name}.ckpt") != sha:
            raise ValueError(f"{path} was trained against a different {name} checkpoint; retrain the chair")
    return pipeline.make_chairbot(config, experts).load_state_arrays(ck.arrays)


def load_generator(config, corpus, ckpt_dir: Path, experts: dict, chair=None):
    path = ckpt_dir / "generator.ckpt"
    ck = load_checked(path, "generator", _fingerprint(config, corpus, "generator"))
    return pipeline.make_generator(config, experts, chair).load_state_arrays(corpus, ck.arrays)


# ------------------------------------------------------------ commands


def cmd_gen_corpus(args) -> int:
    spec = SyntheticSpec()
    if args.spec:
        spec = SyntheticSpec.from_dict(json.loads(Path(args.spec).read_text()))
    seed = 0 if args.seed is None else args.seed
    corpus = generate_synthetic(spec, seed=seed)
    out = Path(args.out or "corpus")
    files = serialize_corpus(corpus)
    if not args.force:
        for name in files:
            if (out / name).exists():
                raise FileExistsError(f"{out / name} exists; pass --force to overwrite")
    for name, data in files.items():
        _write_new(out / name, data, force=True)
    summary = {
        "conversations": len(corpus.conversations),
        "entities": corpus.n_entities,
        "items": len(corpus.item_ids),
        "relations": corpus.n_relations,
        "triples": len(corpus.triples),
        "reviews": len(corpus.reviews),
        "words": corpus.n_words,
        "examples": len(corpus.examples()),
    }
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    config = _config(args)
    corpus = _corpus(args, config)
    ckpt_dir = Path(args.out or config.paths.checkpoints)
    target = args.target
    path = ckpt_dir / f"{target}.ckpt"
    if path.exists() and not args.force:
        raise FileExistsError(f"{path} exists; pass --force to overwrite")
    splits = pipeline.make_splits(corpus, config)
    fp = _fingerprint(config, corpus, target)
    resolved = {k: v for k, v in config.to_dict().items() if k != "paths"}
    meta = {"corpus_hash": corpus.content_hash(), "config": resolved, "n_train": len(splits.train)}

    if target in pipeline.EXPERT_NAMES:
        make = lambda: pipeline.train_expert(target, corpus, splits.train, config)  # noqa: E731
    elif target == "chair":
        experts = load_experts(config, corpus, ckpt_dir)
        meta["experts"] = {n: file_sha256(ckpt_dir / f"{n}.ckpt") for n in pipeline.EXPERT_NAMES}
        make = lambda: pipeline.train_chairbot(experts, splits.train, config)  # noqa: E731
    else:
        experts = load_experts(config, corpus, ckpt_dir)
        chair = load_chairbot(config, corpus, ckpt_dir, experts) if (ckpt_dir / "chair.ckpt").exists() else None
        meta["experts"] = {n: file_sha256(ckpt_dir / f"{n}.ckpt") for n in pipeline.EXPERT_NAMES}
        make = lambda: pipeline.make_generator(config, experts, chair).fit(splits.train, corpus=corpus)  # noqa: E731

    run_log = RunLog(Path(config.paths.output) / "logs", f"train-{target}")
    run_log.write("start", target=target, fingerprint=fp, n_train=len(splits.train))
    t0 = time.perf_counter()
    model = make()
    for epoch, loss in enumerate(model.loss_history_, 1):
        run_log.write("epoch", epoch=epoch, loss=loss)
    meta["loss_history"] = list(model.loss_history_)
    sha = Checkpoint(target, model.state_arrays(), fp, meta).save(path, force=args.force)
    run_log.write("done", checkpoint=str(path), sha256=sha, seconds=round(time.perf_counter() - t0, 3))
    run_log.close()
    print(json.dumps({"checkpoint": str(path), "fingerprint": fp, "sha256": sha}))
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _config(args)
    corpus = _corpus(args, config)
    ckpt_dir = _ckpt_dir(args, config)
    out = Path(args.out or config.paths.output)
    splits = pipeline.make_splits(corpus, config)
    examples = splits.get(args.split)
    present = [t for t in TARGETS if (ckpt_dir / f"{t}.ckpt").exists()]
    if not present:
        raise FileNotFoundError(f"no checkpoints found in {ckpt_dir}")

    fp = config.fingerprint(corpus.content_hash())
    experts = {n: load_expert(n, config, corpus, ckpt_dir) for n in pipeline.EXPERT_NAMES if n in present}
    models = dict(experts)
    popularity = evaluation.PopularityRecommender().fit(splits.train, corpus=corpus)
    chair = None
    if "chair" in present:
        chair = models["full"] = load_chairbot(config, corpus, ckpt_dir, experts)
    report = {
        "fingerprint": fp,
        "split": args.split,
        "evaluated_on_train": args.split == "train",
        "n_examples": len(examples),
        "popularity": evaluation.evaluate_recommender(popularity, examples, fp).to_dict(),
        "models": {name: evaluation.evaluate_recommender(m, examples, fp).to_dict() for name, m in models.items()},
    }
    if "generator" in present:
        gen = load_generator(config, corpus, ckpt_dir, experts, chair)
        responses = gen.generate(examples)
        report["generation"] = {f"distinct_{n}": evaluation.distinct_n(responses, n) for n in evaluation.DISTINCT_NS}
        lines = [
            json.dumps(
                {"conversation": x.conversation_id, "turn": x.turn, "tokens": r, "text": detokenize(r, corpus.words)},
                sort_keys=True,
            )
            for x, r in zip(examples, responses)
        ]
        _write_new(out / f"generations-{args.split}.jsonl", ("\n".join(lines) + "\n").encode(), args.force)
    path = out / f"report-{args.split}.json"
    _write_new(path, _json_bytes(report), args.force)
    run_log = RunLog(out / "logs", f"eval-{args.split}")
    run_log.write("report", path=str(path), fingerprint=fp)
    run_log.close()
    rows = [{"model": n, **m} for n, m in [("popularity", report["popularity"]), *report["models"].items()]]
    print(evaluation.format_table(rows, ["model", "recall_1", "recall_10", "recall_50"]), end="")
    return EXIT_OK


def _available_experts(config, corpus, ckpt_dir: Path) -> dict:
    experts = {}
    for name in pipeline.EXPERT_NAMES:
        if (ckpt_dir / f"{name}.ckpt").exists():
            experts[name] = load_expert(name, config, corpus, ckpt_dir)
    return experts


def cmd_ablate(args) -> int:
    config = _config(args)
    corpus = _corpus(args, config)
    out = Path(args.out or config.paths.output)
    experts = _available_experts(config, corpus, _ckpt_dir(args, config))
    rows = evaluation.run_ablation(corpus, config, experts=experts, split=args.split)
    table = evaluation.ablation_table(rows)
    _write_new(out / "ablation.json", _json_bytes([r.to_dict() for r in rows]), args.force)
    _write_new(out / "ablation.txt", table.encode(), args.force)
    print(table, end="")
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = _config(args)
    corpus = _corpus(args, config)
    out = Path(args.out or config.paths.output)
    values = args.values
    if values is not None and args.param == "hidden_dim":
        values = [int(v) for v in values]
    rows = evaluation.run_sweep(corpus, config, args.param, values, split=args.split)
    table = evaluation.format_table(rows)
    _write_new(out / f"sweep-{args.param}.json", _json_bytes(rows), args.force)
    _write_new(out / f"sweep-{args.param}.txt", table.encode(), args.force)
    print(table, end="")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    seed = 0 if args.seed is None else args.seed
    errors = gradient_suite(seed)
    for name, err in errors.items():
        print(f"{name:14s} {err:.3e}")
    worst = max(errors.values())
    print(f"worst relative error: {worst:.3e}")
    return EXIT_OK if worst <= args.tolerance else EXIT_NUMERIC


# --------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mccrs", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, corpus=True):
        p.add_argument("--config", help="run config JSON (defaults when omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output location")
        p.add_argument("--force", action="store_true", help="allow overwriting existing outputs")
        if corpus:
            p.add_argument("--corpus", help="corpus directory (default: config paths.corpus)")
        return p

    p = sub.add_parser("gen-corpus", help="write a synthetic corpus")
    p.add_argument("--spec", help="synthetic spec JSON (defaults when omitted)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="corpus directory (default: corpus)")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_corpus)

    p = common(sub.add_parser("train", help="train one component and write its checkpoint"))
    p.add_argument("target", choices=TARGETS)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in [
        ("eval", cmd_eval, "evaluate every checkpoint present"),
        ("ablate", cmd_ablate, "expert ablation table"),
        ("sweep", cmd_sweep, "hyperparameter sweep"),
    ]:
        p = common(sub.add_parser(name, help=helptext))
        p.add_argument("--checkpoints", help="checkpoint directory (default: config paths.checkpoints)")
        p.add_argument("--split", default="test", choices=("train", "valid", "test"))
        if name == "sweep":
            p.add_argument("--param", required=True, choices=sorted(evaluation.DEFAULT_GRIDS))
            p.add_argument("--values", nargs="+", type=float)
        p.set_defaults(func=func)

    p = sub.add_parser("grad-check", help="finite-difference check of every component")
    p.add_argument("--seed", type=int)
    p.add_argument("--tolerance", type=float, default=GRAD_TOLERANCE)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, FileExistsError, PermissionError, IsADirectoryError, OSError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, TypeError, NotFittedError) as e:
        print(f"validation error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
