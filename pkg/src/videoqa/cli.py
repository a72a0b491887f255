"""Command-line entry point: generate, pretrain, finetune, probe, eval, synth.

Configuration is layered: dataclass defaults, then a flat key=value config
file, then repeated --set key=value flags (flags win). Unknown keys are
rejected, and the effective configuration is echoed into every output
directory as run_config.txt in the same flat format.
"""

from __future__ import annotations

import argparse
import json
import os
import shlex
import sys
from collections import Counter
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from . import corpus, evaluate as evaluate_mod, qagen, synth, train as train_mod
from .corpus import AnswerVocabulary, CorpusError, FeatureStore
from .model import ModelConfig, TokenVocab, VideoQAModel, load_checkpoint, save_checkpoint
from .qagen import ExternalCommandPlugins, GenConfig, GeneratorPlugins
from .train import TrainConfig

OUTPUT_ROOT_ENV = "VIDEOQA_OUT"

_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
_GEN_KEYS = {f.name for f in fields(GenConfig)}


class CliError(Exception):
    """Validation or runtime failure; reported and mapped to exit code 1."""


@dataclass
class RunConfig:
    subcommand: str
    model: ModelConfig
    train: TrainConfig
    gen: GenConfig
    paths: dict[str, str]

    @property
    def seed(self) -> int:
        return self.train.seed


# ---------------------------------------------------------------------------
# flat key=value config files


def parse_config_file(path: str | Path) -> dict[str, object]:
    out: dict[str, object] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = _parse_value(value.strip())
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _coerce(name: str, current, value):
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise CliError(f"config key '{name}' expects true/false, got {value!r}")
    if isinstance(current, tuple):
        if isinstance(value, (list, tuple)):
            return tuple(value)
        raise CliError(f"config key '{name}' expects a list, got {value!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        try:
            return int(value)
        except (TypeError, ValueError):
            raise CliError(f"config key '{name}' expects an integer, got {value!r}")
    if isinstance(current, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise CliError(f"config key '{name}' expects a number, got {value!r}")
    return str(value)


def apply_overrides(rc: RunConfig, overrides: dict[str, object]) -> None:
    for key, value in overrides.items():
        if key.startswith("path."):
            rc.paths[key[len("path.") :]] = str(value)
        elif key == "subcommand":
            continue  # informational in echoes
        elif key in _MODEL_KEYS:
            setattr(rc.model, key, _coerce(key, getattr(rc.model, key), value))
        elif key in _TRAIN_KEYS:
            setattr(rc.train, key, _coerce(key, getattr(rc.train, key), value))
        elif key in _GEN_KEYS:
            setattr(rc.gen, key, _coerce(key, getattr(rc.gen, key), value))
        else:
            raise CliError(f"unknown config key '{key}'")


def echo_config(rc: RunConfig, out_dir: Path) -> None:
    lines = [f"subcommand = {json.dumps(rc.subcommand)}"]
    for section in (rc.model, rc.train, rc.gen):
        for key, value in sorted(asdict(section).items()):
            if isinstance(value, tuple):
                value = list(value)
            lines.append(f"{key} = {json.dumps(value)}")
    for key in sorted(rc.paths):
        lines.append(f"path.{key} = {json.dumps(rc.paths[key])}")
    (out_dir / "run_config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# helpers


def _require(args, name: str) -> str:
    value = getattr(args, name.replace("-", "_"), None)
    if not value:
        raise CliError(f"missing required path '{name}'")
    return value


def _out_dir(args, subcommand: str) -> Path:
    out = getattr(args, "out", None)
    if not out:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if not root:
            raise CliError(f"missing required path 'out' (or set ${OUTPUT_ROOT_ENV})")
        out = Path(root) / subcommand
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _assemble(args, subcommand: str, default_mode: str | None = None) -> RunConfig:
    rc = RunConfig(subcommand=subcommand, model=ModelConfig(), train=TrainConfig(), gen=GenConfig(), paths={})
    if default_mode:
        rc.train.mode = default_mode
    if getattr(args, "config", None):
        apply_overrides(rc, parse_config_file(args.config))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        apply_overrides(rc, {key.strip(): _parse_value(value.strip())})
    if getattr(args, "seed", None) is not None:
        rc.train.seed = args.seed
    return rc


def _build_plugins(args, gen_cfg: GenConfig):
    kind = getattr(args, "plugins", "fallback")
    if kind == "fallback":
        return GeneratorPlugins(), None
    if kind == "external-command":
        cmd = getattr(args, "plugin_cmd", None)
        if not cmd:
            raise CliError("missing required path 'plugin-cmd' for external-command plugins")
        external = ExternalCommandPlugins(shlex.split(cmd), beam_width=gen_cfg.beam_width_hint)
        return external.as_plugins(), external
    raise CliError(f"unknown plugin selection {kind!r}")


def _split_by_video(samples, val_fraction: float, seed: int):
    videos = sorted({s.video_id for s in samples})
    n_val = int(len(videos) * val_fraction)
    if n_val < 1 or n_val == len(videos):
        return samples, None
    rng = np.random.default_rng(seed)
    val_videos = {videos[i] for i in rng.permutation(len(videos))[:n_val]}
    train_part = [s for s in samples if s.video_id not in val_videos]
    val_part = [s for s in samples if s.video_id in val_videos]
    return train_part, val_part or None


def _read_train_freqs(path: str) -> Counter:
    with open(path, encoding="utf-8") as fh:
        first = ""
        for line in fh:
            if line.strip():
                first = line
                break
    if not first:
        return Counter()
    keys = json.loads(first).keys()
    if "answer" in keys:
        return Counter(corpus.normalize_answer(t.answer) for t in corpus.read_triplets(path))
    if "answers" in keys:
        return Counter(train_mod.consensus_answer(ex.answers) for ex in corpus.read_annotations(path))
    raise CliError(f"{path}: expected a triplets or annotations JSONL file")


# ---------------------------------------------------------------------------
# subcommand handlers


def _cmd_synth(args) -> int:
    rc = _assemble(args, "synth")
    out = _out_dir(args, "synth")
    if args.videos < 1:
        raise CliError("'videos' must be >= 1")
    rc.paths["out"] = str(out)
    paths = synth.build_synth_corpus(out, args.videos, seed=rc.seed, d_v=rc.model.d_v)
    echo_config(rc, out)
    print(f"synth corpus with {args.videos} training videos written to {out}")
    for name, p in paths.items():
        print(f"  {name}: {p}")
    return 0


def _cmd_generate(args) -> int:
    rc = _assemble(args, "generate")
    out = _out_dir(args, "generate")
    if args.transcripts and args.captions:
        raise CliError("give either 'transcripts' or 'captions', not both")
    mode = args.mode
    if mode is None:
        mode = "caption" if args.captions else "transcript"
    plugins, external = _build_plugins(args, rc.gen)
    triplets: list[corpus.QATriplet] = []
    report = qagen.GenReport()
    try:
        if mode == "transcript":
            path = _require(args, "transcripts")
            rc.paths["transcripts"] = path
            for video_id, segments in corpus.read_transcripts(path).items():
                got, rep = qagen.generate_from_transcript(segments, rc.gen, plugins)
                triplets.extend(got)
                report.merge(rep)
        elif mode == "caption":
            path = _require(args, "captions")
            rc.paths["captions"] = path
            for record in corpus.read_captions(path):
                got, rep = qagen.generate_from_caption(record, rc.gen, plugins)
                triplets.extend(got)
                report.merge(rep)
        else:
            raise CliError(f"unknown generation mode {mode!r}")
    finally:
        if external is not None:
            external.close()
    rc.paths["out"] = str(out)
    corpus.write_triplets(triplets, out / "triplets.jsonl")
    (out / "gen_report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    echo_config(rc, out)
    print(f"{report.triplets} triplets from {report.videos} videos -> {out / 'triplets.jsonl'}")
    print(json.dumps(report.to_dict()))
    return 0


def _finish_training(rc: RunConfig, out: Path, model, token_vocab, result) -> int:
    save_checkpoint(
        out / "checkpoint.vqc",
        model,
        token_vocab,
        extra={
            "mode": rc.train.mode,
            "input_mode": rc.train.input_mode,
            "best_val_top1": result.best_val_top1,
            "aborted": result.aborted,
        },
    )
    echo_config(rc, out)
    last_loss = next((m["loss"] for m in reversed(result.metrics) if "loss" in m), None)
    print(f"checkpoint: {out / 'checkpoint.vqc'}")
    print(f"steps: {sum(1 for m in result.metrics if 'loss' in m)}  last loss: {last_loss}")
    if result.best_val_top1 is not None:
        print(f"best val top-1: {result.best_val_top1:.4f}")
    if result.aborted:
        print("warning: training aborted on non-finite loss; checkpoint is the last good state")
    return 0


def _cmd_pretrain(args) -> int:
    rc = _assemble(args, "pretrain", default_mode="pretrain")
    if rc.train.mode not in ("pretrain", "matching_baseline"):
        raise CliError(f"pretrain supports modes pretrain/matching_baseline, got {rc.train.mode!r}")
    out = _out_dir(args, "pretrain")
    triplets_path = _require(args, "triplets")
    store = FeatureStore(_require(args, "features"))
    rc.paths.update(out=str(out), triplets=triplets_path, features=str(store.manifest_path))
    triplets = corpus.read_triplets(triplets_path)
    if not triplets:
        raise CliError("the triplets file is empty")

    if args.init:
        ckpt = load_checkpoint(args.init)
        model, token_vocab = ckpt.model, ckpt.token_vocab
        rc.model = ckpt.config
        rc.paths["init"] = args.init
    else:
        texts = [t.question for t in triplets] + [t.answer for t in triplets]
        token_vocab = TokenVocab.build(texts, max_size=rc.model.token_vocab_size)
        rc.model.token_vocab_size = len(token_vocab)
        torch.manual_seed(rc.seed)
        model = VideoQAModel(rc.model)

    if rc.train.mode == "matching_baseline":
        prepared = train_mod.prepare_matching_examples(triplets, store, token_vocab, rc.model)
    else:
        prepared = train_mod.prepare_pretrain_examples(triplets, store, token_vocab, rc.model)
    train_part, val_part = _split_by_video(prepared, rc.train.val_fraction, rc.seed)
    result = train_mod.train(
        model, token_vocab, rc.train, train_part, val_data=val_part,
        metrics_path=out / "metrics.jsonl",
    )
    return _finish_training(rc, out, model, token_vocab, result)


def _cmd_finetune(args, forced_mode: str | None = None) -> int:
    subcommand = forced_mode or "finetune"
    rc = _assemble(args, subcommand, default_mode=subcommand)
    if forced_mode == "probe":
        rc.train.mode = "probe"
    if rc.train.mode not in ("finetune", "probe", "multiple_choice"):
        raise CliError(f"{subcommand} supports modes finetune/probe/multiple_choice, got {rc.train.mode!r}")
    out = _out_dir(args, subcommand)
    examples_path = _require(args, "examples")
    store = FeatureStore(_require(args, "features"))
    examples = corpus.read_annotations(examples_path)
    rc.paths.update(out=str(out), examples=examples_path, features=str(store.manifest_path))

    vocab = None
    if rc.train.mode in ("finetune", "probe"):
        vocab_path = _require(args, "vocab")
        vocab = AnswerVocabulary.load(vocab_path)
        rc.paths["vocab"] = vocab_path

    if args.init:
        ckpt = load_checkpoint(args.init)
        model, token_vocab = ckpt.model, ckpt.token_vocab
        rc.model = ckpt.config
        rc.paths["init"] = args.init
    else:
        texts = [ex.question for ex in examples] + [a for ex in examples for a in ex.answers]
        if vocab is not None:
            texts += vocab.entries
        token_vocab = TokenVocab.build(texts, max_size=rc.model.token_vocab_size)
        rc.model.token_vocab_size = len(token_vocab)
        torch.manual_seed(rc.seed)
        model = VideoQAModel(rc.model)

    if rc.train.mode == "multiple_choice":
        prepared, skipped = train_mod.prepare_multiple_choice_examples(examples, store, token_vocab, rc.model)
    else:
        prepared, skipped = train_mod.prepare_finetune_examples(examples, vocab, store, token_vocab, rc.model)
    if not prepared:
        raise CliError("no usable training samples after filtering")
    train_part, val_part = _split_by_video(prepared, rc.train.val_fraction, rc.seed)
    result = train_mod.train(
        model, token_vocab, rc.train, train_part, vocab=vocab, val_data=val_part,
        metrics_path=out / "metrics.jsonl",
    )
    if skipped:
        print(f"skipped {skipped} samples without usable targets")
    return _finish_training(rc, out, model, token_vocab, result)


def _cmd_eval(args) -> int:
    rc = _assemble(args, "eval")
    out = _out_dir(args, "eval")
    ckpt_path = _require(args, "checkpoint")
    ckpt = load_checkpoint(ckpt_path)
    examples = corpus.read_annotations(_require(args, "examples"))
    vocab = AnswerVocabulary.load(_require(args, "vocab"))
    store = FeatureStore(_require(args, "features"))
    rc.model = ckpt.config
    rc.paths.update(
        out=str(out), checkpoint=ckpt_path, examples=args.examples,
        vocab=args.vocab, features=str(store.manifest_path),
    )

    metric_names = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
    for m in metric_names:
        if m not in ("top1", "top10", "ivqa"):
            raise CliError(f"unknown metric {m!r}")
    input_mode = args.input_mode
    if input_mode == "auto":
        input_mode = ckpt.extra.get("input_mode", "vqa")
    if input_mode not in ("vqa", "qa_only"):
        raise CliError(f"unknown input mode {input_mode!r}")

    train_freqs = None
    if args.train_freqs:
        train_freqs = _read_train_freqs(args.train_freqs)
        rc.paths["train_freqs"] = args.train_freqs

    dump_path = out / "predictions.jsonl" if args.dump_predictions else None
    report = evaluate_mod.evaluate(
        ckpt.model, ckpt.token_vocab, examples, vocab, store,
        protocol=args.protocol, metrics=metric_names,
        qa_only=input_mode == "qa_only", train_freqs=train_freqs, dump_path=dump_path,
    )
    report.save(out / "report.json")
    echo_config(rc, out)
    print(report.format_text())
    print(f"report: {out / 'report.json'}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="videoqa", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (wins over file)")
        p.add_argument("--seed", type=int, help="random seed (wins over config)")
        p.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/<subcommand>)")

    p = sub.add_parser("synth", help="write a deterministic toy corpus")
    common(p)
    p.add_argument("--videos", type=int, default=50, help="number of training videos")
    p.set_defaults(handler=_cmd_synth)

    p = sub.add_parser("generate", help="generate question-answer triplets")
    common(p)
    p.add_argument("--transcripts", help="transcripts JSONL (transcript mode)")
    p.add_argument("--captions", help="captions JSONL (caption mode)")
    p.add_argument("--mode", choices=["transcript", "caption"], help="inferred from the input flag by default")
    p.add_argument("--plugins", choices=["fallback", "external-command"], default="fallback")
    p.add_argument("--plugin-cmd", help="command line for external-command plugins")
    p.set_defaults(handler=_cmd_generate)

    p = sub.add_parser("pretrain", help="contrastive pretraining on generated triplets")
    common(p)
    p.add_argument("--triplets", help="triplets JSONL")
    p.add_argument("--features", help="feature manifest JSONL")
    p.add_argument("--init", help="checkpoint to continue from")
    p.set_defaults(handler=_cmd_pretrain)

    for name, helptext in (
        ("finetune", "finetune on an annotated dataset"),
        ("probe", "finetune only the final projection heads"),
    ):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--examples", help="annotated examples JSONL")
        p.add_argument("--vocab", help="answer vocabulary file")
        p.add_argument("--features", help="feature manifest JSONL")
        p.add_argument("--init", help="checkpoint to start from")
        p.set_defaults(handler=_cmd_finetune, forced=name if name == "probe" else None)

    p = sub.add_parser("eval", help="evaluate a checkpoint on an annotated set")
    common(p)
    p.add_argument("--checkpoint", help="model checkpoint")
    p.add_argument("--examples", help="annotated examples JSONL")
    p.add_argument("--vocab", help="answer vocabulary file")
    p.add_argument("--features", help="feature manifest JSONL")
    p.add_argument("--protocol", choices=["zero_shot", "standard"], default="zero_shot")
    p.add_argument("--metrics", default="top1,top10", help="comma list of top1,top10,ivqa")
    p.add_argument("--input-mode", choices=["auto", "vqa", "qa_only"], default="auto")
    p.add_argument("--train-freqs", help="triplets or annotations JSONL for quartile frequencies")
    p.add_argument("--dump-predictions", action="store_true", help="write per-sample predictions")
    p.set_defaults(handler=_cmd_eval)

    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        if getattr(args, "forced", None):
            return args.handler(args, forced_mode=args.forced)
        return args.handler(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CorpusError, ValueError, OSError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
