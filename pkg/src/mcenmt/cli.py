"""Command-line entry point: train, translate, evaluate, ablate, grad-check."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from . import gradcheck
from .corpus import build_vocab, filter_pairs, read_parallel, tokenize, write_lines
from .encoder import SYSTEMS, ChannelConfig
from .evaluation import Budget, ablation_suite, bleu, bucket_bleu, format_buckets, token_accuracy, translate_all
from .inference import beam_search, greedy_decode
from .model import ModelConfig
from .tasks import TASKS, task_splits
from .training import FingerprintMismatch, TrainConfig, fit, load_checkpoint, save_checkpoint, write_trace

log = logging.getLogger("mcenmt")

OUTPUT_ENV = "MCENMT_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Every knob of a run. Defaults follow the full-scale model settings."""

    # channels
    system: str = ""               # shortcut for the three use_* flags, e.g. NTM-RNN-EMB
    use_emb: bool = True
    use_rnn: bool = True
    use_ntm: bool = True
    emb_dim: int = 512
    hidden_dim: int = 512
    mem_dim: int = 512
    read_weighting: str = "literal"
    stacked_bidir: bool = False
    emb_bias: bool = True
    zero_init_state: bool = False
    init_scale: float = 0.04
    precision: int = 64
    # data
    task: str = ""                 # copy | reverse: built-in synthetic corpus
    task_train: int = 1000
    task_dev: int = 100
    task_test: int = 100
    task_vocab: int = 20
    task_min_len: int = 3
    task_max_len: int = 10
    train_src: str = ""
    train_tgt: str = ""
    dev_src: str = ""
    dev_tgt: str = ""
    test_src: str = ""
    test_tgt: str = ""
    src_vocab_size: int = 30000
    tgt_vocab_size: int = 30000
    max_len: int = 50
    # training
    batch_size: int = 16
    epochs: int = 10
    seed: int = 1
    dropout: float = 0.5
    warmup: int = 6000
    num_gpus: int = 1
    clip_norm: float = 1.0
    checkpoint_every: int = 500
    stop_at: float = 0.0           # end training once dev token accuracy reaches this; 0 disables
    # decoding
    beam: int = 10
    output_dir: str = ""           # empty: $MCENMT_OUTPUT_DIR, else ./runs

    def __post_init__(self):
        self.validate()

    # -- parsing ------------------------------------------------------------------------------------

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for key, raw in kv.items():
            if key not in types:
                raise ConfigError(f"unknown configuration key {key!r}")
            values[key] = _convert(key, raw, types[key])
        return cls(**values)

    @classmethod
    def from_text(cls, text: str, overrides: dict[str, str] | None = None) -> "RunConfig":
        kv = parse_config_text(text)
        kv.update(overrides or {})
        return cls.from_mapping(kv)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    # -- derived ---------------------------------------------------------------------------------

    def validate(self) -> None:
        if self.system and self.system not in SYSTEMS:
            raise ConfigError(f"unknown system {self.system!r}; choose from {', '.join(SYSTEMS)}")
        if self.system:
            self.use_emb, self.use_rnn, self.use_ntm = SYSTEMS[self.system]
        if self.task and self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; choose from {', '.join(TASKS)}")
        if self.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")
        for name in ("max_len", "batch_size", "beam", "num_gpus"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        try:
            self.channels()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def channels(self) -> ChannelConfig:
        return ChannelConfig(use_emb=self.use_emb, use_rnn=self.use_rnn, use_ntm=self.use_ntm,
                             emb_dim=self.emb_dim, hidden_dim=self.hidden_dim, mem_dim=self.mem_dim,
                             read_weighting=self.read_weighting, stacked_bidir=self.stacked_bidir,
                             emb_bias=self.emb_bias)

    def model_config(self, src_vocab_size: int, tgt_vocab_size: int) -> ModelConfig:
        return ModelConfig(self.channels(), src_vocab_size, tgt_vocab_size, dropout=self.dropout,
                           zero_init_state=self.zero_init_state, init_scale=self.init_scale,
                           dtype="float64" if self.precision == 64 else "float32")

    def out_dir(self) -> Path:
        return Path(self.output_dir or os.environ.get(OUTPUT_ENV) or "runs")


def parse_config_text(text: str) -> dict[str, str]:
    """Line-oriented ``key = value``; blank lines and ``#`` comments are skipped."""
    kv = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in kv:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        kv[key] = value
    return kv


def _convert(key: str, raw, typ: str):
    if not isinstance(raw, str):
        return raw
    try:
        if typ == "bool":
            if raw.lower() not in ("true", "false"):
                raise ValueError
            return raw.lower() == "true"
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {typ}, got {raw!r}") from None
    return raw


def parse_config(path: str | None, overrides: dict[str, str]) -> RunConfig:
    text = Path(path).read_text() if path else ""
    return RunConfig.from_text(text, overrides)


# -- data ----------------------------------------------------------------------------------------


def load_splits(cfg: RunConfig):
    """(train, dev, test) pairs from the built-in task or the corpus paths."""
    if cfg.task:
        return task_splits(cfg.task, cfg.seed, cfg.task_train, cfg.task_dev, cfg.task_test,
                           vocab=cfg.task_vocab, min_len=cfg.task_min_len, max_len=cfg.task_max_len)

    def pair(src, tgt, required):
        if not src and not tgt:
            if required:
                raise ConfigError("no training corpus: set train_src/train_tgt or --task")
            return []
        for p in (src, tgt):
            if not p or not Path(p).is_file():
                raise FileNotFoundError(f"corpus file not found: {p!r}")
        return read_parallel(src, tgt)

    return (pair(cfg.train_src, cfg.train_tgt, True), pair(cfg.dev_src, cfg.dev_tgt, False),
            pair(cfg.test_src, cfg.test_tgt, False))


def _write_split(out: Path, name: str, pairs) -> None:
    if pairs:
        write_lines(out / f"{name}.src", [s for s, _ in pairs])
        write_lines(out / f"{name}.tgt", [t for _, t in pairs])


# -- commands --------------------------------------------------------------------------------------


def cmd_train(cfg: RunConfig, args) -> int:
    out = cfg.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(cfg.to_text())
    train, dev, test = load_splits(cfg)
    train = filter_pairs(train, cfg.max_len)
    if cfg.task:
        for name, pairs in (("train", train), ("dev", dev), ("test", test)):
            _write_split(out, name, pairs)
    sv = build_vocab([s for s, _ in train], cfg.src_vocab_size)
    tv = build_vocab([t for _, t in train], cfg.tgt_vocab_size)
    sv.save(out / "vocab.src")
    tv.save(out / "vocab.tgt")
    model_cfg = cfg.model_config(len(sv), len(tv))
    tc = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, seed=cfg.seed, warmup=cfg.warmup,
                     num_gpus=cfg.num_gpus, clip_norm=cfg.clip_norm, checkpoint_every=cfg.checkpoint_every,
                     out_dir=str(out))
    resume = load_checkpoint(args.resume) if args.resume else None
    best_dev = [-1.0]

    def on_epoch(epoch, loss, ckpt):
        if not dev:
            log.info("epoch %d: loss %.4f", epoch, loss)
            return False
        hyps = translate_all(ckpt.model, sv, tv, [s for s, _ in dev], beam=0)
        acc = token_accuracy(hyps, [t for _, t in dev])
        log.info("epoch %d: loss %.4f dev accuracy %.4f", epoch, loss, acc)
        if acc >= best_dev[0]:
            best_dev[0] = acc
            save_checkpoint(out / "checkpoint_dev.bin", ckpt)
        return cfg.stop_at > 0 and acc >= cfg.stop_at

    _, trace = fit(train, sv, tv, model_cfg, tc, resume=resume, on_epoch=on_epoch)
    write_trace(out / "trace.csv", trace)
    print(f"trained {len(trace)} steps; checkpoints in {out}")
    return 0


def _read_sources(path: str | None):
    if path:
        if not Path(path).is_file():
            raise FileNotFoundError(f"input file not found: {path}")
        text = Path(path).read_text(encoding="utf-8")
    else:
        text = sys.stdin.read()
    return [tokenize(line) for line in text.splitlines()]


def cmd_translate(cfg: RunConfig, args) -> int:
    if not args.checkpoint:
        raise ConfigError("translate needs --checkpoint PATH")
    if not Path(args.checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    ckpt = load_checkpoint(args.checkpoint)
    if args.config and ckpt.model.config.channels != cfg.channels():
        raise FingerprintMismatch("checkpoint architecture does not match the configuration")
    model, sv, tv = ckpt.model, ckpt.src_vocab, ckpt.tgt_vocab
    lines = []
    for src in _read_sources(args.input):
        ids = sv.encode(src)
        if not ids:
            lines.append("")
            continue
        if cfg.beam == 1:
            hyp, score = greedy_decode(ids, model), None
        else:
            hyp, score = beam_search(ids, model, cfg.beam)
        text = " ".join(tv.decode(hyp))
        if args.scores:
            text = f"{text}\t{score if score is not None else ''}"
        lines.append(text)
    body = "\n".join(lines) + ("\n" if lines else "")
    if args.output:
        Path(args.output).write_text(body, encoding="utf-8")
    else:
        sys.stdout.write(body)
    return 0


def _read_lines(path: str) -> list[str]:
    if not Path(path).is_file():
        raise FileNotFoundError(f"file not found: {path}")
    return Path(path).read_text(encoding="utf-8").splitlines()


def cmd_evaluate(cfg: RunConfig, args) -> int:
    hyps = [h.split("\t")[0] for h in _read_lines(args.hyp)]
    refs = _read_lines(args.ref)
    report = bleu(hyps, refs, lowercase=args.lowercase)
    result = {"bleu": report.bleu, "precisions": report.precisions, "brevity_penalty": report.brevity_penalty,
              "hyp_len": report.hyp_len, "ref_len": report.ref_len,
              "token_accuracy": token_accuracy(hyps, refs)}
    buckets = None
    if args.buckets:
        if not args.src:
            raise ConfigError("--buckets needs --src with the source sentences")
        buckets = bucket_bleu(_read_lines(args.src), hyps, refs, lowercase=args.lowercase)
        result["buckets"] = {str(L): (None if r is None else r.bleu) for L, r in buckets.items()}
    if args.json:
        print(json.dumps(result, indent=2, sort_keys=True))
    else:
        print(report)
        print(f"token accuracy = {100 * result['token_accuracy']:.2f}")
        if buckets is not None:
            print(format_buckets(buckets))
    return 0


def cmd_ablate(cfg: RunConfig, args) -> int:
    if not (cfg.emb_dim == cfg.hidden_dim == cfg.mem_dim):
        raise ConfigError("ablation compares systems at one width: set emb_dim = hidden_dim = mem_dim")
    splits = load_splits(cfg)
    seeds = [int(s) for s in args.seeds.split(",")]
    budget = Budget(epochs=cfg.epochs, batch_size=cfg.batch_size, dim=cfg.emb_dim, warmup=cfg.warmup,
                    dropout=cfg.dropout, beam=cfg.beam, read_weighting=cfg.read_weighting,
                    stop_at=cfg.stop_at or None)
    out = cfg.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(cfg.to_text())
    report = ablation_suite(splits, seeds=seeds, budget=budget, task=cfg.task or "corpus")
    (out / "ablation.csv").write_text(report.to_csv())
    (out / "ablation.json").write_text(report.to_json())
    print(report.to_json() if args.json else report.to_table())
    return 0 if all(r.error is None for r in report.rows) else 1


def cmd_grad_check(cfg: RunConfig, args) -> int:
    worst = 0.0
    for r in gradcheck.run_all(cfg.seed):
        print(f"{r.name:<36} {r.max_error:.3e}  {'ok' if r.ok else 'FAIL'}")
        worst = max(worst, r.max_error)
    print(f"max relative error {worst:.3e} (tolerance {gradcheck.TOLERANCE:g})")
    return 0 if worst < gradcheck.TOLERANCE else 1


COMMANDS = {"train": cmd_train, "translate": cmd_translate, "evaluate": cmd_evaluate,
            "ablate": cmd_ablate, "grad-check": cmd_grad_check}

# flag -> config key; flags left unset do not override the file
FLAG_KEYS = {"system": "system", "task": "task", "epochs": "epochs", "batch_size": "batch_size",
             "seed": "seed", "beam": "beam", "dropout": "dropout", "warmup": "warmup",
             "read_weighting": "read_weighting", "output_dir": "output_dir"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcenmt", description="Multi-channel encoder NMT toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    subs = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = subs.add_parser(name)
        p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any configuration key")
        p.add_argument("--system", choices=list(SYSTEMS))
        p.add_argument("--task", choices=list(TASKS))
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--beam", type=int)
        p.add_argument("--dropout", type=float)
        p.add_argument("--warmup", type=int)
        p.add_argument("--read-weighting", dest="read_weighting", choices=["literal", "single"])
        p.add_argument("--output-dir", dest="output_dir")
        if name == "train":
            p.add_argument("--resume", help="checkpoint to continue from")
        if name == "translate":
            p.add_argument("--checkpoint")
            p.add_argument("--input", help="source file, one sentence per line (default: stdin)")
            p.add_argument("--output", help="hypothesis file (default: stdout)")
            p.add_argument("--scores", action="store_true", help="append a tab and the normalized score")
        if name == "evaluate":
            p.add_argument("--hyp", required=True)
            p.add_argument("--ref", required=True)
            p.add_argument("--src", help="source file, needed for --buckets")
            p.add_argument("--buckets", action="store_true")
            p.add_argument("--lowercase", action="store_true")
            p.add_argument("--json", action="store_true")
        if name == "ablate":
            p.add_argument("--seeds", default="1,2,3")
            p.add_argument("--json", action="store_true")
    return parser


def overrides_from_args(args) -> dict[str, str]:
    kv = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        kv[k] = v
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            kv[key] = str(value)
    return kv


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = parse_config(args.config, overrides_from_args(args))
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, FileNotFoundError, FingerprintMismatch, ValueError) as exc:
        print(f"mcenmt {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
