"""Command-line entry point: ``python -m hqclip <subcommand> ...``.

Values resolve in three layers: built-in defaults, then the matching section
of ``--config`` (a JSON file with one object per subcommand plus an optional
top-level ``seed``), then explicit flags. The resolved values are echoed to
stderr and written next to the outputs.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("hqclip")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


@dataclass(frozen=True)
class Opt:
    flag: str
    key: str
    type: Callable = str
    default: Any = None
    help: str = ""
    required: bool = False
    choices: Optional[Sequence] = None


def _train_defaults() -> dict:
    from .trainer import TrainConfig

    c = TrainConfig()
    return {
        "steps": c.steps, "batch_size": c.batch_size, "learning_rate": c.learning_rate,
        "weight_decay": c.weight_decay, "mix_ratio": c.sampling.mix_ratio,
        "strategy": c.sampling.strategy.value, "n_neg": c.sampling.n_neg, "alpha": c.weights.alpha,
        "beta": c.weights.beta, "K": c.K, "d": c.d, "d_tok": c.d_tok, "hidden": c.hidden,
        "eval_every": c.eval_every, "log_every": c.log_every,
    }


def _train_opts() -> list[Opt]:
    d = _train_defaults()
    strategies = ["random_segment", "full_long", "short_tags", "raw_only"]
    return [
        Opt("--steps", "steps", int, d["steps"], "optimizer steps"),
        Opt("--batch-size", "batch_size", int, d["batch_size"], "batch size N"),
        Opt("--lr", "learning_rate", float, d["learning_rate"], "peak learning rate"),
        Opt("--weight-decay", "weight_decay", float, d["weight_decay"], "decoupled weight decay"),
        Opt("--mix-ratio", "mix_ratio", float, d["mix_ratio"], "probability r of an enriched text"),
        Opt("--strategy", "strategy", str, d["strategy"], "enriched text sampling", choices=strategies),
        Opt("--n-neg", "n_neg", int, d["n_neg"], "hard negatives per sample"),
        Opt("--alpha", "alpha", float, d["alpha"], "hard-negative loss weight"),
        Opt("--beta", "beta", float, d["beta"], "tag classification loss weight"),
        Opt("--K", "K", int, d["K"], "tag vocabulary size (clamped to the corpus)"),
        Opt("--d", "d", int, d["d"], "joint embedding width"),
        Opt("--d-tok", "d_tok", int, d["d_tok"], "token embedding width"),
        Opt("--hidden", "hidden", int, d["hidden"], "classifier hidden width"),
        Opt("--eval-every", "eval_every", int, d["eval_every"], "evaluate every n steps (0 = end only)"),
        Opt("--log-every", "log_every", int, d["log_every"], "metrics log interval"),
    ]


COMMANDS: dict[str, tuple[str, list[Opt]]] = {
    "synth": ("generate a synthetic world, training shards and an eval suite", [
        Opt("--out", "out", str, None, "output directory", required=True),
        Opt("--n", "n", int, 2000, "training samples"),
        Opt("--refined-fraction", "refined_fraction", float, 1.0, "share of samples with description sets"),
        Opt("--n-concepts", "n_concepts", int, 8, "concepts"),
        Opt("--n-attrs", "n_attrs", int, 5, "values per attribute slot"),
        Opt("--n-slots", "n_slots", int, 4, "attribute slots"),
        Opt("--d-in", "D_in", int, 64, "image feature dimension"),
        Opt("--noise-sigma", "noise_sigma", float, 0.05, "feature noise"),
        Opt("--eval-sizes", "eval_sizes", str, "200,200,200", "classification,retrieval,discrimination sizes"),
        Opt("--records-per-shard", "records_per_shard", int, 1000, "records per shard file"),
    ]),
    "refine": ("attach description sets with the mock or a remote captioner", [
        Opt("--input", "input", str, None, "input manifest, directory or .jsonl shard", required=True),
        Opt("--out", "out", str, None, "output directory", required=True),
        Opt("--workers", "concurrency", int, 1, "concurrent requests"),
        Opt("--endpoint-url", "endpoint_url", str, None, "chat-completions URL (unset = mock captioner)"),
        Opt("--model-name", "model_name", str, "mock", "model name sent to the endpoint"),
        Opt("--max-retries", "max_retries", int, 3, "retries per sample"),
        Opt("--timeout", "timeout", float, 60.0, "request timeout in seconds"),
        Opt("--temperature", "temperature", float, 0.0, "sampling temperature"),
        Opt("--n-exemplars", "n_exemplars", int, 1, "in-context exemplars per request"),
        Opt("--max-failure-fraction", "max_failure_fraction", float, 0.05, "abort above this failed share"),
        Opt("--records-per-shard", "records_per_shard", int, 1000, "records per shard file"),
        Opt("--sft-out", "sft_out", str, None, "also export an SFT conversation corpus here"),
    ]),
    "stats": ("length histograms, tag frequencies and refined share", [
        Opt("--input", "input", str, None, "manifest, directory or .jsonl shard", required=True),
        Opt("--tokenizer", "tokenizer", str, None, "tokenizer file (default: word split)"),
        Opt("--top-n", "top_n", int, 20, "most frequent tags to report"),
        Opt("--out", "out", str, None, "write the report as JSON here"),
    ]),
    "inspect": ("print and validate records", [
        Opt("--input", "input", str, None, "manifest, directory or .jsonl shard", required=True),
        Opt("--limit", "limit", int, 5, "records to print"),
        Opt("--id", "id", str, None, "print only this sample id"),
        Opt("--d-in", "d_in", int, 64, "expected feature dimension"),
    ]),
    "build-vocab": ("top-K tag vocabulary from a corpus", [
        Opt("--input", "input", str, None, "manifest, directory or .jsonl shard", required=True),
        Opt("--K", "K", int, 90000, "vocabulary size (clamped to the distinct tag count)"),
        Opt("--out", "out", str, None, "vocabulary JSON path", required=True),
    ]),
    "train": ("train a model and write checkpoint, metrics log and eval report", [
        Opt("--data", "data", str, None, "training manifest or directory", required=True),
        Opt("--tokenizer", "tokenizer", str, None, "tokenizer file", required=True),
        Opt("--out", "out", str, None, "output directory", required=True),
        Opt("--vocab", "vocab", str, None, "tag vocabulary JSON (default: build from data)"),
        Opt("--eval-suite", "eval_suite", str, None, "eval tasks.json or its directory"),
        Opt("--resume", "resume", str, None, "resume from this training checkpoint"),
        *_train_opts(),
    ]),
    "eval": ("evaluate a checkpoint on an eval suite", [
        Opt("--checkpoint", "checkpoint", str, None, "model checkpoint", required=True),
        Opt("--suite", "suite", str, None, "eval tasks.json or its directory", required=True),
        Opt("--tokenizer", "tokenizer", str, None, "tokenizer file", required=True),
        Opt("--out", "out", str, None, "report JSON path"),
    ]),
    "score": ("image-text similarity of raw captions and detailed descriptions", [
        Opt("--checkpoint", "checkpoint", str, None, "model checkpoint", required=True),
        Opt("--input", "input", str, None, "manifest, directory or .jsonl shard", required=True),
        Opt("--tokenizer", "tokenizer", str, None, "tokenizer file", required=True),
        Opt("--out", "out", str, None, "write scores as JSON here"),
    ]),
    "ablate": ("sweep one parameter over seeded synthetic runs and print a table", [
        Opt("--param", "param", str, None, "parameter to sweep", required=True,
            choices=["mix_ratio", "alpha", "beta", "K", "n_neg", "strategy"]),
        Opt("--values", "values", str, None, "comma-separated values", required=True),
        Opt("--seeds", "seeds", str, "0,1,2", "comma-separated seeds"),
        Opt("--n-train", "n_train", int, 2000, "training samples per synthetic world"),
        Opt("--out", "out", str, None, "directory for table.md and table.json"),
        *_train_opts(),
    ]),
}


def build_parser() -> _Parser:
    parser = _Parser(prog="hqclip", description="Caption refinement and contrastive training toolkit.",
                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name, (desc, opts) in COMMANDS.items():
        p = sub.add_parser(name, help=desc, description=desc)
        p.add_argument("--config", default=None, help="JSON config file with per-command sections")
        p.add_argument("--seed", type=int, default=None, help="run seed (default: 0)")
        for o in opts:
            note = " (required)" if o.required else f" (default: {o.default})"
            p.add_argument(o.flag, dest=o.key, type=o.type, default=None, choices=o.choices,
                           help=o.help + note)
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config section, then flags."""
    opts = COMMANDS[command][1]
    out = {"seed": 0, **{o.key: o.default for o in opts}}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(doc, dict):
            raise UsageError(f"config {args.config} must hold a JSON object")
        if "seed" in doc:
            out["seed"] = doc["seed"]
        section = doc.get(command, {})
        unknown = set(section) - set(out)
        if unknown:
            raise UsageError(f"unknown keys in config section {command!r}: {sorted(unknown)}")
        out.update(section)
    for key in out:
        v = getattr(args, key, None)
        if v is not None:
            out[key] = v
    missing = [o.flag for o in opts if o.required and out.get(o.key) is None]
    if missing:
        raise UsageError(f"hqclip {command}: missing required option(s): {', '.join(missing)}")
    return out


def _write_resolved(path: Path, resolved: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _resolved_next_to(out: str, resolved: dict, is_dir: bool) -> None:
    p = Path(out)
    _write_resolved(p / "resolved_config.json" if is_dir else p.with_name(p.name + ".resolved.json"), resolved)


def _int_list(text: str, what: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"{what} must be comma-separated integers, got {text!r}") from exc


def _train_config(r: dict):
    from .trainer import TrainConfig, with_overrides

    keys = _train_defaults().keys()
    return with_overrides(TrainConfig(), seed=r["seed"], **{k: r[k] for k in keys})


def _load_vocab(path: str):
    from .types import TagVocabulary

    return TagVocabulary.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _load_suite(path: str):
    from .synth import load_eval_suite

    p = Path(path)
    return load_eval_suite(p / "tasks.json" if p.is_dir() else p)


# -- commands ------------------------------------------------------------------

def cmd_synth(r: dict) -> int:
    from .dataset_io import write_shards
    from .synth import generate_dataset, generate_eval_suite, generate_world, save_eval_suite, save_world
    from .textkit import TokenizerSpec, save_tokenizer

    sizes = _int_list(r["eval_sizes"], "--eval-sizes")
    if len(sizes) != 3:
        raise UsageError("--eval-sizes needs three integers")
    out = Path(r["out"])
    world = generate_world(r["seed"], r["n_concepts"], r["n_attrs"], r["D_in"], r["noise_sigma"],
                           n_slots=r["n_slots"])
    out.mkdir(parents=True, exist_ok=True)
    save_world(world, out / "world.json")
    samples = generate_dataset(world, r["n"], r["refined_fraction"], seed=r["seed"])
    m = write_shards(samples, out / "train", r["records_per_shard"])
    save_eval_suite(generate_eval_suite(world, tuple(sizes), seed=r["seed"]), out / "eval")
    save_tokenizer(TokenizerSpec.from_words(world.vocab), out / "tokenizer.txt")
    _resolved_next_to(r["out"], r, True)
    print(f"wrote {m.total_records} training records in {len(m.shard_paths)} shard(s), eval suite and "
          f"tokenizer to {out}")
    return EXIT_OK


def cmd_refine(r: dict) -> int:
    from .captioner import CaptionerConfig, export_sft_corpus, refine_dataset
    from .dataset_io import open_manifest, read_shards

    names = {f.name for f in fields(CaptionerConfig)}
    cfg = CaptionerConfig(**{k: v for k, v in r.items() if k in names})
    manifest, summary = refine_dataset(cfg, open_manifest(r["input"]), r["out"],
                                       records_per_shard=r["records_per_shard"])
    if r["sft_out"]:
        pairs = ((s, s.description_set) for s in read_shards(manifest) if s.refined)
        n = export_sft_corpus(pairs, r["sft_out"], seed=r["seed"])
        print(f"exported {n} SFT records to {r['sft_out']}")
    _resolved_next_to(r["out"], r, True)
    print(json.dumps(summary.to_dict(), sort_keys=True))
    return EXIT_OK


def _length_fn(tokenizer_path: Optional[str]):
    from .textkit import load_tokenizer, tokenize, words

    if tokenizer_path is None:
        return words
    spec = load_tokenizer(tokenizer_path)
    return lambda text: tokenize(spec, text)


def cmd_stats(r: dict) -> int:
    from .dataset_io import compute_stats, open_manifest

    rep = compute_stats(open_manifest(r["input"]), _length_fn(r["tokenizer"]), r["top_n"])
    print(f"samples {rep.n_samples}  refined {rep.refined_fraction:.3f}  "
          f"mean caption {rep.mean_caption_len:.2f}  mean detailed {rep.mean_detailed_len:.2f}  "
          f"ratio {rep.length_ratio:.2f}")
    for tag, count in rep.tag_frequency_topN:
        print(f"  {count:8d}  {tag}")
    if r["out"]:
        Path(r["out"]).write_text(json.dumps(rep.to_dict(), indent=2) + "\n", encoding="utf-8")
        _resolved_next_to(r["out"], r, False)
    return EXIT_OK


def cmd_inspect(r: dict) -> int:
    from .dataset_io import open_manifest, read_shards
    from .types import validate_sample

    shown = 0
    for s in read_shards(open_manifest(r["input"])):
        if r["id"] is not None and s.id != r["id"]:
            continue
        v = validate_sample(s, r["d_in"])
        print(f"{s.id}  valid={v.ok}  caption={s.raw_caption!r}")
        for msg in v.violations:
            print(f"    ! {msg}")
        if s.refined:
            ds = s.description_set
            print(f"    detailed: {ds.detailed}")
            print(f"    negative: {ds.negative}")
            print(f"    pos_tags: {list(ds.pos_tags)}  neg_tags: {list(ds.neg_tags)}")
        shown += 1
        if r["id"] is None and shown >= r["limit"]:
            break
    if r["id"] is not None and shown == 0:
        raise LookupError(f"no record with id {r['id']!r}")
    return EXIT_OK


def cmd_build_vocab(r: dict) -> int:
    from .dataset_io import open_manifest
    from .textkit import build_vocab

    vocab = build_vocab(open_manifest(r["input"]), r["K"])
    Path(r["out"]).write_text(json.dumps(vocab.to_dict(), indent=1) + "\n", encoding="utf-8")
    _resolved_next_to(r["out"], r, False)
    print(f"wrote {vocab.K} tags to {r['out']}")
    return EXIT_OK


def cmd_train(r: dict) -> int:
    from .dataset_io import open_manifest, read_shards
    from .textkit import build_vocab, load_tokenizer
    from .trainer import load_checkpoint, train

    cfg = _train_config(r)
    samples = list(read_shards(open_manifest(r["data"])))
    tok = load_tokenizer(r["tokenizer"])
    vocab = _load_vocab(r["vocab"]) if r["vocab"] else build_vocab(samples, cfg.K)
    suite = _load_suite(r["eval_suite"]) if r["eval_suite"] else None
    state = load_checkpoint(r["resume"])[0] if r["resume"] else None
    out = Path(r["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved(out / "resolved_config.json", {**r, "train_config": cfg.to_dict()})
    res = train(cfg, samples, vocab, tok, suite=suite, metrics_path=out / "metrics.jsonl",
                checkpoint_path=out / "checkpoint.npz", state=state)
    (out / "vocab.json").write_text(json.dumps(vocab.to_dict(), indent=1) + "\n", encoding="utf-8")
    if res.final_eval is not None:
        (out / "eval_report.json").write_text(json.dumps(res.final_eval, indent=2, sort_keys=True) + "\n",
                                              encoding="utf-8")
        print(json.dumps(res.final_eval["task_scores"], sort_keys=True))
    print(f"trained {res.state.step} steps; checkpoint at {out / 'checkpoint.npz'}")
    return EXIT_OK


def cmd_eval(r: dict) -> int:
    from .evaluator import emit_report, evaluate
    from .model import load_params
    from .textkit import load_tokenizer

    params, _ = load_params(r["checkpoint"])
    rep = evaluate(params, _load_suite(r["suite"]), load_tokenizer(r["tokenizer"]))
    if r["out"]:
        emit_report(rep, r["out"])
        _resolved_next_to(r["out"], r, False)
    print(json.dumps({**rep.task_scores(), "aggregate": rep.aggregate}, sort_keys=True))
    return EXIT_OK


def cmd_score(r: dict) -> int:
    import numpy as np

    from .dataset_io import open_manifest, read_shards
    from .evaluator import similarity_score
    from .model import load_params
    from .textkit import load_tokenizer

    params, _ = load_params(r["checkpoint"])
    tok = load_tokenizer(r["tokenizer"])
    samples = list(read_shards(open_manifest(r["input"])))
    if not samples:
        raise ValueError("no samples to score")
    feats = np.stack([s.image_features for s in samples])
    scores = {"raw": dict(zip(("mean", "std"), similarity_score(params, feats, [s.raw_caption for s in samples], tok)))}
    refined = [s for s in samples if s.refined]
    if refined:
        rf = np.stack([s.image_features for s in refined])
        scores["detailed"] = dict(zip(("mean", "std"), similarity_score(
            params, rf, [s.description_set.detailed for s in refined], tok)))
    if r["out"]:
        Path(r["out"]).write_text(json.dumps(scores, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        _resolved_next_to(r["out"], r, False)
    print(json.dumps(scores, sort_keys=True))
    return EXIT_OK


def cmd_ablate(r: dict) -> int:
    from functools import partial

    from .experiments import ablate, make_setup, parse_value

    try:
        values = [parse_value(r["param"], v) for v in r["values"].split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --values for {r['param']}: {exc}") from exc
    seeds = _int_list(r["seeds"], "--seeds")
    if not values or not seeds:
        raise UsageError("--values and --seeds must be non-empty")
    table = ablate(r["param"], values, seeds, _train_config(r), partial(make_setup, n_train=r["n_train"]))
    text = table.format()
    print(text)
    if r["out"]:
        out = Path(r["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "table.md").write_text(text + "\n", encoding="utf-8")
        (out / "table.json").write_text(json.dumps(table.to_dict(), indent=2) + "\n", encoding="utf-8")
        _resolved_next_to(r["out"], r, True)
    return EXIT_OK


HANDLERS = {
    "synth": cmd_synth, "refine": cmd_refine, "stats": cmd_stats, "inspect": cmd_inspect,
    "build-vocab": cmd_build_vocab, "train": cmd_train, "eval": cmd_eval, "score": cmd_score,
    "ablate": cmd_ablate,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help
            return int(exc.code or 0)
        if args.command is None:
            raise UsageError(parser.format_usage() + "hqclip: error: a command is required")
        resolved = resolve(args.command, args)
        print(f"[hqclip {args.command}] seed={resolved['seed']} config={json.dumps(resolved, sort_keys=True)}",
              file=sys.stderr)
        return HANDLERS[args.command](resolved)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # every other failure is a runtime failure
        log.debug("command failed", exc_info=True)
        print(f"hqclip: error: {exc.__class__.__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run())
