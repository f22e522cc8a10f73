"""Unified command line: corpus building, training, generation, evaluation.

Subcommands: build-corpus, pretrain, finetune, generate, evaluate, grad-check,
count-params.  Exit codes: 0 success, 1 usage or configuration error, 2 data
error (unreadable or malformed inputs), 3 numeric failure (non-finite loss or
a failed gradient check).

Configuration is a flat JSON object with dotted keys ("model.d_hidden",
"train.peak_lr", ...).  Resolution order is defaults <- config file <- flags,
and every key's provenance lands in the run manifest.  A manifest is written
atomically before and after each file-producing run; commands that only print
to stdout write one when --manifest is given.  All randomness flows from the
single train.seed, fanned out into named substreams.
"""

import argparse
import glob
import hashlib
import json
import os
import sys
import tempfile
from dataclasses import replace
from datetime import datetime, timezone
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import __version__
from .autodiff import NumericsError, grad_check
from .checkpoint import CheckpointError, load_checkpoint
from .conversation import ConversationTree, TreeError, Utterance, relation_index
from .corpus import (
    CorpusError,
    build_corpus,
    instance_from_record,
    read_instances,
    read_post_dump,
    write_instances,
)
from .decoding import generate_summary
from .model import (
    Model,
    ModelConfig,
    ModelInput,
    count_parameters,
    encode_instance,
    paper_config,
)
from .objectives import instance_loss, sample_thread_pairs
from .rouge import evaluate_pairs, write_report
from .tokenizer import Tokenizer
from .training import (
    OptimizerState,
    TrainRunConfig,
    derive_rng,
    run_training,
    truncate_instance,
)


class ConfigError(ValueError):
    pass


def _defaults() -> Dict[str, object]:
    cfg = {"model." + k: v for k, v in paper_config().to_dict().items()}
    cfg.update({
        "train.total_steps": 500000,
        "train.accumulation": 256,
        "train.peak_lr": 5e-5,
        "train.seed": 0,
        "train.weight_decay": 0.01,
        "train.clip_norm": 1.0,
        "train.checkpoint_every": 0,
        "train.log_every": 1,
        "decode.beam_size": 4,
        "decode.length_penalty": 1.0,
        "decode.min_len": 1,
        "decode.max_len": None,
        "decode.block_trigrams": True,
        "corpus.min_comments": 10,
        "corpus.shard_size": 100000,
        "gradcheck.eps": 1e-3,
        "gradcheck.tol": 1e-3,
    })
    return cfg


CONFIG_DEFAULTS = _defaults()


def load_config(path=None, flag_values: Optional[Dict[str, object]] = None):
    """defaults <- file <- flags; returns (config, provenance per key)."""
    config = dict(CONFIG_DEFAULTS)
    provenance = {k: "default" for k in config}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except OSError as exc:
            raise CorpusError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise CorpusError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        for key, value in file_cfg.items():
            if key not in config:
                raise ConfigError(f"unknown config key {key!r}")
            config[key] = value
            provenance[key] = "file"
    for key, value in (flag_values or {}).items():
        if key not in config:
            raise ConfigError(f"unknown config key {key!r}")
        config[key] = value
        provenance[key] = "flag"
    return config, provenance


def model_config_from(config: Dict[str, object]) -> ModelConfig:
    fields = {k.split(".", 1)[1]: v for k, v in config.items() if k.startswith("model.")}
    try:
        return ModelConfig.from_dict(fields)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def train_config_from(config: Dict[str, object]) -> TrainRunConfig:
    try:
        return TrainRunConfig(
            total_steps=config["train.total_steps"],
            accumulation=config["train.accumulation"],
            peak_lr=config["train.peak_lr"],
            seed=config["train.seed"],
            weight_decay=config["train.weight_decay"],
            clip_norm=config["train.clip_norm"],
            checkpoint_every=config["train.checkpoint_every"],
            log_every=config["train.log_every"],
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def named_seed(seed: int, name: str) -> int:
    """Fan the run seed into an independent named sub-seed."""
    return int(derive_rng(seed, name).integers(0, 2 ** 31))


def code_version() -> str:
    root = os.path.dirname(os.path.abspath(__file__))
    digest = hashlib.sha256()
    for path in sorted(glob.glob(os.path.join(root, "*.py"))):
        digest.update(os.path.basename(path).encode())
        with open(path, "rb") as fh:
            digest.update(fh.read())
    return digest.hexdigest()[:12]


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat()


def _atomic_json(path, payload: dict) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class RunManifest:
    """Reproducibility record, written atomically before and after a run."""

    def __init__(self, path, command: str, config: dict, provenance: dict,
                 seed: int, inputs: List[str], outputs: List[str],
                 deterministic: bool = False):
        self.path = path
        self.payload = {
            "command": command,
            "config": config,
            "config_provenance": provenance,
            "seed": seed,
            "inputs": list(inputs),
            "outputs": list(outputs),
            "code_version": code_version(),
            "package_version": __version__,
            "deterministic": deterministic,
            "started_at": _utcnow(),
            "finished_at": None,
            "status": "running",
        }

    def write(self) -> None:
        if self.path is not None:
            _atomic_json(self.path, self.payload)

    def finish(self, status: str, error: Optional[str] = None) -> None:
        self.payload["status"] = status
        self.payload["finished_at"] = _utcnow()
        if error is not None:
            self.payload["error"] = error
        self.write()


class _ManifestRun:
    def __init__(self, manifest: RunManifest):
        self.manifest = manifest

    def __enter__(self):
        self.manifest.write()
        return self.manifest

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.manifest.finish("ok")
        else:
            self.manifest.finish("failed", error=f"{exc_type.__name__}: {exc}")
        return False


def _apply_deterministic(flag: bool) -> None:
    if not flag:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = "1"


def _flag_overrides(args, mapping: Dict[str, str]) -> Dict[str, object]:
    values = {}
    for attr, key in mapping.items():
        v = getattr(args, attr, None)
        if v is not None:
            values[key] = v
    for pair in getattr(args, "set", None) or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, _, raw = pair.partition("=")
        try:
            values[key] = json.loads(raw)
        except json.JSONDecodeError:
            values[key] = raw
    return values


def _load_instances(paths: List[str]):
    expanded = []
    for p in paths:
        hits = sorted(glob.glob(p))
        expanded.extend(hits if hits else [p])
    instances = []
    for p in expanded:
        instances.extend(read_instances(p))
    if not instances:
        raise CorpusError(f"no instances found in {', '.join(expanded)}")
    return instances, expanded


def _encode_all(mconfig: ModelConfig, tokenizer, instances):
    return [encode_instance(mconfig, tokenizer, truncate_instance(inst, mconfig, tokenizer))
            for inst in instances]


# ---------------------------------------------------------------------------
# commands


def cmd_build_corpus(args) -> int:
    flags = _flag_overrides(args, {
        "min_comments": "corpus.min_comments",
        "shard_size": "corpus.shard_size",
        "max_utt": "model.max_utterances",
        "max_utt_tokens": "model.max_utterance_tokens",
        "max_summary_tokens": "model.max_summary_tokens",
    })
    config, provenance = load_config(args.config, flags)
    tokenizer = Tokenizer.load(args.vocab) if args.vocab else None
    manifest_path = args.manifest or args.output + "-manifest.json"
    seed = config["train.seed"]
    manifest = RunManifest(manifest_path, "build-corpus", config, provenance, seed,
                           inputs=[args.input], outputs=[args.output],
                           deterministic=args.deterministic)
    _apply_deterministic(args.deterministic)
    with _ManifestRun(manifest):
        posts = list(read_post_dump(args.input))
        shards, stats = build_corpus(posts, args.output,
                                     min_comments=config["corpus.min_comments"],
                                     shard_size=config["corpus.shard_size"])
        if tokenizer is not None:
            mconfig = model_config_from(config)
            for shard in shards:
                trimmed = [truncate_instance(inst, mconfig, tokenizer)
                           for inst in read_instances(shard)]
                write_instances(shard, trimmed)
        if args.stats:
            _atomic_json(args.stats, json.loads(stats.to_json()))
        manifest.payload["outputs"] = list(shards) + ([args.stats] if args.stats else [])
        print(f"kept {stats.kept} instances in {len(shards)} shard(s); "
              f"rejected {sum(stats.rejected.values())} posts")
    return 0


def _train_common(args, base_model: Optional[ModelConfig] = None,
                  init_params=None, force_lambda: Optional[float] = None):
    flags = _flag_overrides(args, {
        "steps": "train.total_steps",
        "accumulation": "train.accumulation",
        "peak_lr": "train.peak_lr",
        "seed": "train.seed",
        "checkpoint_every": "train.checkpoint_every",
        "log_every": "train.log_every",
    })
    config, provenance = load_config(args.config, flags)
    if base_model is not None:
        # architecture defaults come from the checkpoint; file/flag values
        # still win for keys the user set explicitly
        for key, value in base_model.to_dict().items():
            full = "model." + key
            if provenance[full] == "default":
                config[full] = value
                provenance[full] = "checkpoint"
    if force_lambda is not None and provenance["model.lambda_thread_pred"] in (
            "default", "checkpoint"):
        config["model.lambda_thread_pred"] = force_lambda
        provenance["model.lambda_thread_pred"] = "command-default"
    mconfig = model_config_from(config)
    if init_params is not None:
        if mconfig != replace(base_model,
                              lambda_thread_pred=mconfig.lambda_thread_pred,
                              thread_pred_source=mconfig.thread_pred_source,
                              thread_pred_reduction=mconfig.thread_pred_reduction):
            raise ConfigError("cannot change the architecture of a checkpointed model")
        model = Model(mconfig, init_params)
    else:
        model = Model.init(mconfig, seed=named_seed(config["train.seed"], "init"))
    run = train_config_from(config)
    state = OptimizerState.init(model.params, peak_lr=run.peak_lr,
                                total_steps=run.total_steps,
                                weight_decay=run.weight_decay)

    tokenizer = Tokenizer.load(args.vocab)
    instances, data_paths = _load_instances(args.data)
    inputs = _encode_all(mconfig, tokenizer, instances)

    os.makedirs(args.out, exist_ok=True)
    manifest = RunManifest(args.manifest or os.path.join(args.out, "manifest.json"),
                           args.command, config, provenance, run.seed,
                           inputs=data_paths, outputs=[args.out],
                           deterministic=args.deterministic)
    _apply_deterministic(args.deterministic)
    with _ManifestRun(manifest):
        records = run_training(model, inputs, state, run,
                               metrics_path=os.path.join(args.out, "metrics.jsonl"),
                               checkpoint_dir=args.out)
        last = records[-1] if records else {"loss_clm": float("nan")}
        print(f"finished at step {state.step}: loss_clm={last['loss_clm']:.4f} "
              f"loss_tp={last['loss_tp']:.4f}" if records else "nothing to do")
    return 0


def cmd_pretrain(args) -> int:
    return _train_common(args)


def cmd_finetune(args) -> int:
    # fine-tuning drops the thread objective unless lambda is set explicitly
    ck = load_checkpoint(args.init, with_optimizer=False)
    return _train_common(args, base_model=ck.config, init_params=ck.params,
                         force_lambda=0.0)


def cmd_generate(args) -> int:
    flags = _flag_overrides(args, {
        "beam": "decode.beam_size",
        "length_penalty": "decode.length_penalty",
        "min_len": "decode.min_len",
        "max_len": "decode.max_len",
        "seed": "train.seed",
    })
    config, provenance = load_config(args.config, flags)
    if args.no_trigram_blocking:
        config["decode.block_trigrams"] = False
        provenance["decode.block_trigrams"] = "flag"
    ck = load_checkpoint(args.ckpt)
    model = Model(ck.config, ck.params)
    tokenizer = Tokenizer.load(args.vocab)
    manifest = RunManifest(args.manifest or args.out + ".manifest.json",
                           "generate", config, provenance, config["train.seed"],
                           inputs=[args.ckpt, args.input], outputs=[args.out],
                           deterministic=args.deterministic)
    _apply_deterministic(args.deterministic)
    with _ManifestRun(manifest):
        records = []
        for i, inst in enumerate(read_instances(args.input)):
            trimmed = truncate_instance(inst, ck.config, tokenizer)
            text = generate_summary(
                model, tokenizer, trimmed.tree,
                beam_size=config["decode.beam_size"],
                length_penalty=config["decode.length_penalty"],
                max_len=config["decode.max_len"],
                min_len=config["decode.min_len"],
                block_trigrams=config["decode.block_trigrams"])
            records.append({"id": i, "summary": text})
        with open(args.out, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
        print(f"wrote {len(records)} summaries to {args.out}")
    return 0


def _read_summary_lines(path: str) -> List[str]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: not valid JSON: {exc}") from exc
            if "summary" not in obj:
                raise CorpusError(f"{path}:{lineno}: record has no 'summary' field")
            out.append(obj["summary"])
    return out


def cmd_evaluate(args) -> int:
    config, provenance = load_config(args.config, _flag_overrides(args, {}))
    manifest = RunManifest(args.manifest or args.out + ".manifest.json",
                           "evaluate", config, provenance, config["train.seed"],
                           inputs=[args.pred, args.ref], outputs=[args.out],
                           deterministic=args.deterministic)
    _apply_deterministic(args.deterministic)
    with _ManifestRun(manifest):
        preds = _read_summary_lines(args.pred)
        refs = _read_summary_lines(args.ref)
        if len(preds) != len(refs):
            raise CorpusError(
                f"prediction/reference counts differ: {len(preds)} vs {len(refs)}")
        if not preds:
            raise CorpusError("nothing to evaluate")
        report = evaluate_pairs(list(zip(preds, refs)))
        write_report(args.out, report)
        mean = report["mean"]
        print("  ".join(f"{name} F1 {mean[name]['f1']:.4f}"
                        for name in ("rouge_1", "rouge_2", "rouge_l", "rouge_su4")))
    return 0


def _gradcheck_instance(mconfig: ModelConfig, seed: int):
    """Fixed 5-utterance tree with seeded synthetic token ids."""
    tree = ConversationTree([
        Utterance(0, "a", "root", 0, None),
        Utterance(1, "b", "u1", 1, 0),
        Utterance(2, "c", "u2", 2, 0),
        Utterance(3, "d", "u3", 3, 1),
        Utterance(4, "e", "u4", 4, 3),
    ])
    rng = derive_rng(seed, "gradcheck")
    token_ids = [[0] + rng.integers(2, mconfig.vocab_size, size=4).tolist()
                 for _ in range(len(tree))]
    full = [0] + rng.integers(2, mconfig.vocab_size, size=5).tolist() + [1]
    mi = ModelInput(token_ids=token_ids,
                    relation_buckets=relation_index(tree, mconfig.clip_k),
                    ancestors=tree.ancestor_matrix(),
                    summary_input=np.asarray(full[:-1], dtype=np.int64),
                    summary_target=np.asarray(full[1:], dtype=np.int64))
    return mi, tree


def cmd_grad_check(args) -> int:
    flags = _flag_overrides(args, {"seed": "train.seed", "eps": "gradcheck.eps",
                                   "tol": "gradcheck.tol"})
    config, provenance = load_config(args.config, flags)
    mconfig = model_config_from(config)
    if mconfig.dropout != 0.0:
        raise ConfigError("grad-check needs model.dropout = 0")
    seed = config["train.seed"]
    _apply_deterministic(args.deterministic)
    model = Model.init(mconfig, seed=named_seed(seed, "init"))
    mi, tree = _gradcheck_instance(mconfig, seed)
    batch = sample_thread_pairs(tree, derive_rng(seed, "pairs"))

    def f():
        loss, _ = instance_loss(model, mi, pair_batch=batch)
        return loss

    report = grad_check(f, list(model.params.values()),
                        eps=config["gradcheck.eps"], tol=config["gradcheck.tol"])
    print(report.format())
    if args.manifest:
        manifest = RunManifest(args.manifest, "grad-check", config, provenance,
                               seed, inputs=[], outputs=[],
                               deterministic=args.deterministic)
        manifest.write()
        manifest.finish("ok" if report.passed else "failed")
    if not report.passed:
        raise NumericsError("gradient check failed")
    return 0


def cmd_count_params(args) -> int:
    config, provenance = load_config(args.config, _flag_overrides(args, {}))
    mconfig = model_config_from(config)
    print(count_parameters(mconfig))
    if args.manifest:
        manifest = RunManifest(args.manifest, "count-params", config, provenance,
                               config["train.seed"], inputs=[], outputs=[],
                               deterministic=args.deterministic)
        manifest.write()
        manifest.finish("ok")
    return 0


# ---------------------------------------------------------------------------
# parser and dispatch


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config with flat dotted keys")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--manifest", help="manifest path override")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded 64-bit mode for reproducibility")
    p.add_argument("--seed", type=int, help="run seed (train.seed)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="threadsum",
        description="Thread-aware conversation summarization toolkit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("build-corpus", help="turn a post dump into instance shards")
    p.add_argument("--input", required=True, help="posts JSONL dump")
    p.add_argument("--output", required=True, help="shard path prefix")
    p.add_argument("--vocab", help="tokenizer dir; enables token-level truncation")
    p.add_argument("--stats", help="write rejection statistics JSON here")
    p.add_argument("--min-comments", type=int, dest="min_comments")
    p.add_argument("--shard-size", type=int, dest="shard_size")
    p.add_argument("--max-utt", type=int, dest="max_utt")
    p.add_argument("--max-utt-tokens", type=int, dest="max_utt_tokens")
    p.add_argument("--max-summary-tokens", type=int, dest="max_summary_tokens")
    _add_common(p)
    p.set_defaults(func=cmd_build_corpus)

    for name, fn in (("pretrain", cmd_pretrain), ("finetune", cmd_finetune)):
        p = sub.add_parser(name, help=f"{name} a model on instance shards")
        if name == "finetune":
            p.add_argument("--init", required=True, help="checkpoint prefix to start from")
        p.add_argument("--data", required=True, nargs="+",
                       help="instance shard paths or globs")
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--vocab", required=True, help="tokenizer directory")
        p.add_argument("--steps", type=int)
        p.add_argument("--accumulation", type=int)
        p.add_argument("--peak-lr", type=float, dest="peak_lr")
        p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
        p.add_argument("--log-every", type=int, dest="log_every")
        _add_common(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("generate", help="beam-decode summaries for conversations")
    p.add_argument("--ckpt", required=True, help="checkpoint prefix")
    p.add_argument("--input", required=True, help="conversations JSONL")
    p.add_argument("--out", required=True, help="predictions JSONL")
    p.add_argument("--vocab", required=True, help="tokenizer directory")
    p.add_argument("--beam", type=int)
    p.add_argument("--length-penalty", type=float, dest="length_penalty")
    p.add_argument("--min-len", type=int, dest="min_len")
    p.add_argument("--max-len", type=int, dest="max_len")
    p.add_argument("--no-trigram-blocking", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score predictions against references")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True, help="scores JSON")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("grad-check", help="finite-difference check on a toy config")
    p.add_argument("--eps", type=float)
    p.add_argument("--tol", type=float)
    _add_common(p)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("count-params", help="print the model parameter count")
    _add_common(p)
    p.set_defaults(func=cmd_count_params)

    return parser


def dispatch(argv: List[str]) -> int:
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericsError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (CorpusError, TreeError, CheckpointError, OSError,
            json.JSONDecodeError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
