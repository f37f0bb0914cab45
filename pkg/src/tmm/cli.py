"""Command-line entry point: ``tmm <subcommand> [flags]``.

Configuration precedence (lowest to highest): built-in defaults, then the
JSON file given by ``--config``, then explicit flags.  The JSON file may hold
model and run fields at top level or under ``"model"`` / ``"run"`` keys, using
the field names of :class:`tmm.model.ModelConfig` and
:class:`tmm.training.RunConfig`.

Metrics are written as one JSON object per line to stdout, or to ``--log``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from tmm import analysis, bench, data, formats, inference, training
from tmm.model import DTYPES, MODES, ModelConfig, build
from tmm.toeplitz import PATHS

log = logging.getLogger("tmm")

PRECEDENCE = "precedence: defaults < --config JSON < explicit flags"

# flag dest -> (section, field)
_FLAG_FIELDS = {
    "dm": ("model", "d_model"),
    "layers": ("model", "n_layers"),
    "heads": ("model", "heads"),
    "kernel": ("model", "kernel"),
    "ctx": ("model", "n_ctx"),
    "vocab": ("model", "vocab_size"),
    "mode": ("model", "mode"),
    "freeze_toeplitz": ("model", "freeze_toeplitz"),
    "mix_path": ("model", "mix_path"),
    "precision": ("model", "dtype"),
    "steps": ("run", "steps"),
    "peak_lr": ("run", "peak_lr"),
    "warmup": ("run", "warmup_steps"),
    "batch": ("run", "batch_size"),
    "eval_every": ("run", "eval_every"),
}


class MetricSink:
    """Line-delimited JSON to stdout or a file."""

    def __init__(self, path: str | None = None):
        self._own = path is not None
        self._f = open(path, "w") if path else sys.stdout

    def write(self, record: dict) -> None:
        self._f.write(json.dumps(record, default=_jsonable) + "\n")
        self._f.flush()

    def close(self) -> None:
        if self._own:
            self._f.close()


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


# ---------------------------------------------------------------- configuration


def _shared_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("shared", PRECEDENCE)
    g.add_argument("--config", help="JSON file with model/run fields")
    g.add_argument("--seed", type=int, help="seed for init, data order and sampling (default 0)")
    g.add_argument("--dm", type=int, help="model width d_m")
    g.add_argument("--layers", type=int, help="number of blocks n_l")
    g.add_argument("--mode", choices=MODES, help="token mixing mode")
    g.add_argument("--heads", type=int, help="head count (implies --mode heads)")
    g.add_argument("--kernel", type=int, help="kernel size k (implies --mode kernel)")
    g.add_argument("--ctx", type=int, help="context length N_ctx")
    g.add_argument("--vocab", type=int, help="vocabulary size")
    g.add_argument("--steps", type=int, help="optimizer steps")
    g.add_argument("--peak-lr", type=float, help="peak learning rate")
    g.add_argument("--warmup", type=int, help="warmup length in optimizer steps")
    g.add_argument("--batch", type=int, help="batch size")
    g.add_argument("--freeze-toeplitz", action="store_const", const=True,
                   help="keep Toeplitz coefficients and biases at their init")
    g.add_argument("--mix-path", choices=PATHS, help="token mixing implementation")
    g.add_argument("--precision", choices=sorted(DTYPES), help="parameter dtype")
    g.add_argument("--log", help="write metrics JSONL here instead of stdout")
    g.add_argument("--checkpoint", help="checkpoint path (written by training, read otherwise)")
    g.add_argument("--eval-every", type=int, help="evaluation interval in steps")
    return p


def _load_json_config(path: str | None) -> tuple[dict, dict]:
    if not path:
        return {}, {}
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, dict):
        raise SystemExit(f"--config {path}: expected a JSON object")
    model = dict(raw.get("model", {}))
    run = dict(raw.get("run", {}))
    model_fields = {f.name for f in dataclasses.fields(ModelConfig)}
    run_fields = {f.name for f in dataclasses.fields(training.RunConfig)}
    for k, v in raw.items():
        if k in ("model", "run"):
            continue
        if k in model_fields:
            model[k] = v
        if k in run_fields:
            run[k] = v
        if k not in model_fields and k not in run_fields:
            raise SystemExit(f"--config {path}: unknown field {k!r}")
    return model, run


def resolve_configs(args, **model_defaults) -> tuple[ModelConfig, training.RunConfig]:
    """Merge defaults, ``--config`` and flags into model and run configs."""
    model, run = dict(model_defaults), {}
    jm, jr = _load_json_config(getattr(args, "config", None))
    model.update(jm)
    run.update(jr)
    for dest, (section, name) in _FLAG_FIELDS.items():
        val = getattr(args, dest, None)
        if val is not None:
            (model if section == "model" else run)[name] = val
    if getattr(args, "mode", None) is None:
        if getattr(args, "kernel", None) is not None:
            model["mode"] = "kernel"
        elif getattr(args, "heads", None) is not None:
            model["mode"] = "heads"
    if getattr(args, "seed", None) is not None:
        model["seed"] = run["seed"] = args.seed
    elif "seed" in model and "seed" not in run:
        run["seed"] = model["seed"]
    if getattr(args, "checkpoint", None):
        run["checkpoint"] = args.checkpoint
    try:
        return ModelConfig(**model), training.RunConfig(**run)
    except (TypeError, ValueError) as e:
        raise SystemExit(f"invalid configuration: {e}") from None


def _model_from_args(args, **model_defaults):
    """Checkpointed model when --checkpoint exists, else a fresh seeded build."""
    if args.checkpoint and Path(args.checkpoint).exists():
        return formats.load_checkpoint(args.checkpoint).model
    config, _ = resolve_configs(args, **model_defaults)
    return build(config)


def _load_tokens(path: str | None) -> formats.TokenFile:
    if path:
        return formats.read_tokenfile(path)
    return formats.TokenFile(256, data.tokenize_bytes(data.builtin_corpus()), 2)


# ---------------------------------------------------------------- subcommands


def cmd_tokenize(args, sink: MetricSink) -> int:
    tf, vocab = data.tokenize(args.inputs, args.scheme)
    Path(args.out).write_bytes(tf.to_bytes())
    if vocab is not None:
        data.save_vocab(args.vocab_out or args.out + ".vocab.json", vocab)
    sink.write({"event": "tokenize", "count": tf.count, "vocab_size": tf.vocab_size,
                "width": tf.width, "scheme": args.scheme})
    return 0


def cmd_train(args, sink: MetricSink) -> int:
    tf = _load_tokens(args.data)
    config, run = resolve_configs(args, vocab_size=tf.vocab_size)
    if config.vocab_size < tf.vocab_size:
        raise SystemExit(f"--vocab {config.vocab_size} smaller than token file vocab {tf.vocab_size}")
    if run.checkpoint and not run.checkpoint_every:
        run = dataclasses.replace(run, checkpoint_every=run.steps)
    ds = data.window_dataset(tf.tokens, config.n_ctx + 1, eval_fraction=args.eval_fraction,
                             seed=run.seed)
    model = build(config)
    last = {}
    for rec in training.train_clm(model, ds.train, ds.eval if len(ds.eval) else None, run):
        sink.write(rec)
        if "eval_loss" in rec:
            last = rec
    sink.write({"event": "done", "steps": run.steps, "eval_loss": last.get("eval_loss"),
                "unigram_entropy": training.unigram_entropy(tf.tokens, tf.vocab_size)})
    return 0


def cmd_copy(args, sink: MetricSink) -> int:
    tf = _load_tokens(args.data)
    config, run = resolve_configs(args, vocab_size=tf.vocab_size, n_ctx=64)
    L = args.segment or config.n_ctx // 2
    cut = int(len(tf.tokens) * (1.0 - args.eval_fraction))
    model = build(config)
    for rec in training.train_copy(model, tf.tokens[:cut], tf.tokens[cut:], L, run,
                                   unmasked=args.unmasked, target_acc=args.target_acc,
                                   eval_final_batches=args.final_batches):
        sink.write(rec)
    if run.checkpoint:
        formats.save_checkpoint(run.checkpoint, model)
    return 0


def cmd_retention(args, sink: MetricSink) -> int:
    config, run = resolve_configs(args, vocab_size=args.symbols, n_ctx=16, d_model=64,
                                  n_layers=2)
    pretrain = dataclasses.replace(run, steps=args.pretrain_steps)
    out = training.retention_suite(config, run, pretrain, target_acc=args.target_acc,
                                   full_copy=not args.half_copy)
    for key in ("capacity", "retention", "baseline"):
        res = dict(out[key])
        res.pop("history")
        sink.write(res)
    sink.write({"label": out["label"], "mode": "copy-pretrain", **out["copy_pretrain"]})
    return 0


def cmd_generate(args, sink: MetricSink) -> int:
    model = _model_from_args(args)
    vocab = data.load_vocab(args.vocab_file) if args.vocab_file else None
    if args.prompt_ids is not None:
        prompt = [int(t) for t in args.prompt_ids.split(",") if t.strip()]
    elif vocab is not None:
        prompt = data.tokenize_words(args.prompt, vocab)[0].tolist()
    else:
        prompt = data.tokenize_bytes(args.prompt.encode("utf-8")).tolist()
    spec = inference.SamplerSpec(mode=args.sampler, temperature=args.temperature, k=args.top_k,
                                 seed=args.seed or 0)
    out = sys.stdout.buffer
    for tok in inference.iter_generate(model, prompt, args.max_new, spec):
        out.write(data.detokenize_words([tok], vocab).encode("utf-8") if vocab
                  else data.detokenize_bytes([tok]))
        out.flush()
    out.write(b"\n")
    out.flush()
    return 0


def cmd_analyze(args, sink: MetricSink) -> int:
    model = _model_from_args(args)
    name = args.name or (Path(args.checkpoint).stem if args.checkpoint else "model")
    report = analysis.model_index_report(model, name, samples=args.samples,
                                         with_rank=not args.no_rank)
    tsv = report.to_tsv()
    if args.tsv:
        Path(args.tsv).write_text(tsv)
    else:
        sys.stdout.write(tsv)
    for e in report.entries:
        sink.write({"event": "index", **dataclasses.asdict(e)})
    if args.export:
        written = analysis.export_weights(model, args.export, layers=args.export_layers,
                                          samples=args.samples)
        sink.write({"event": "export", "files": [str(p) for p in written]})
    return 0


def cmd_bench(args, sink: MetricSink) -> int:
    rows = bench.bench_mix(args.d, args.n, repeats=args.repeats, seed=args.seed or 0)
    csv_text = bench.rows_to_csv(rows)
    if args.csv:
        Path(args.csv).write_text(csv_text)
    else:
        sys.stdout.write(csv_text)
    for (path, d), slope in bench.fit_exponents(rows).items():
        sink.write({"event": "exponent", "path": path, "d": d, "exponent": slope})
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    shared = _shared_parser()
    p = argparse.ArgumentParser(prog="tmm", description=__doc__.splitlines()[0], epilog=PRECEDENCE)
    p.add_argument("-v", "--verbose", action="store_true", help="progress logging to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("tokenize", parents=[shared], help="tokenize text files into a token file",
                       epilog=PRECEDENCE)
    s.add_argument("inputs", nargs="+")
    s.add_argument("-o", "--out", required=True)
    s.add_argument("--scheme", choices=("byte", "word"), default="byte")
    s.add_argument("--vocab-out", help="vocab JSON path for the word scheme")
    s.set_defaults(func=cmd_tokenize)

    s = sub.add_parser("train", parents=[shared], help="causal LM training", epilog=PRECEDENCE)
    s.add_argument("--data", help="token file (default: built-in byte corpus)")
    s.add_argument("--eval-fraction", type=float, default=0.1)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("copy", parents=[shared], help="copy-task training", epilog=PRECEDENCE)
    s.add_argument("--data", help="token file (default: built-in byte corpus)")
    s.add_argument("--segment", type=int, help="copy segment length L (default n_ctx // 2)")
    s.add_argument("--unmasked", action="store_true", help="also train on first-copy targets")
    s.add_argument("--target-acc", type=float, help="stop once full eval reaches this exact acc")
    s.add_argument("--final-batches", type=int, default=256, help="batches in the final eval")
    s.add_argument("--eval-fraction", type=float, default=0.1)
    s.set_defaults(func=cmd_copy)

    s = sub.add_parser("retention", parents=[shared], help="simplified retention probe",
                       epilog=PRECEDENCE)
    s.add_argument("--symbols", type=int, default=2, help="synthetic alphabet size")
    s.add_argument("--pretrain-steps", type=int, default=1000, help="copy pretraining steps")
    s.add_argument("--target-acc", type=float, help="early stop for the capacity probe")
    s.add_argument("--half-copy", action="store_true",
                   help="copy-pretrain on n_ctx/2 segments instead of whole sequences")
    s.set_defaults(func=cmd_retention)

    s = sub.add_parser("generate", parents=[shared], help="sample from a model", epilog=PRECEDENCE)
    s.add_argument("--prompt", default="")
    s.add_argument("--prompt-ids", help="comma-separated token ids instead of --prompt")
    s.add_argument("--max-new", type=int, default=64)
    s.add_argument("--sampler", choices=("greedy", "temperature", "top_k"), default="greedy")
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--top-k", type=int, default=1)
    s.add_argument("--vocab-file", help="word-scheme vocab JSON")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("analyze", parents=[shared], help="index report and weight export",
                       epilog=PRECEDENCE)
    s.add_argument("--name", help="row label in the TSV report")
    s.add_argument("--tsv", help="write the TSV report here instead of stdout")
    s.add_argument("--samples", type=int, help="symbol samples M (default max(4096, 8N))")
    s.add_argument("--no-rank", action="store_true", help="skip the SVD rank column")
    s.add_argument("--export", help="directory for matrix and symbol CSV files")
    s.add_argument("--export-layers", type=int, nargs="*", help="restrict export to these layers")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("bench", parents=[shared], help="FFT vs materialized mixing timings",
                       epilog=PRECEDENCE)
    s.add_argument("--d", type=int, nargs="+", default=[64])
    s.add_argument("--n", type=int, nargs="+", default=[256, 512, 1024, 2048, 4096, 8192])
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--csv", help="write timings CSV here instead of stdout")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(name)s: %(message)s")
    sink = MetricSink(args.log)
    try:
        return args.func(args, sink)
    finally:
        sink.close()


if __name__ == "__main__":
    raise SystemExit(main())
