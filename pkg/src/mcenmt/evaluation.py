"""Corpus BLEU, length-bucket reports and the channel ablation harness."""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

from .corpus import build_vocab
from .encoder import SYSTEMS, ChannelConfig
from .inference import beam_search, greedy_decode_batch
from .model import ModelConfig
from .training import TrainConfig, fit

DEFAULT_THRESHOLDS = (10, 20, 30, 40, 50, 60)


@dataclass
class BleuReport:
    bleu: float
    precisions: list[float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    def __str__(self) -> str:
        ps = "/".join(f"{100 * p:.1f}" for p in self.precisions)
        return (f"BLEU = {self.bleu:.2f}, {ps} (BP={self.brevity_penalty:.3f}, "
                f"ratio={self.hyp_len / max(self.ref_len, 1):.3f}, hyp_len={self.hyp_len}, ref_len={self.ref_len})")


def _tokens(line, lowercase: bool) -> list[str]:
    toks = line.split() if isinstance(line, str) else list(line)
    return [t.lower() for t in toks] if lowercase else toks


def _ngrams(toks: Sequence[str], n: int) -> Counter:
    return Counter(tuple(toks[i : i + n]) for i in range(len(toks) - n + 1))


def bleu(hypotheses, references, max_n: int = 4, lowercase: bool = False) -> BleuReport:
    """Corpus-level BLEU with clipped n-gram precision and no smoothing.

    Lines may be whitespace-tokenized strings or token lists; one reference
    per hypothesis.
    """
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    if not hypotheses:
        raise ValueError("BLEU of an empty corpus")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h, r = _tokens(hyp, lowercase), _tokens(ref, lowercase)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    precisions = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    if hyp_len == 0:
        bp = 0.0
    else:
        bp = min(1.0, math.exp(1.0 - ref_len / hyp_len))
    if min(precisions) == 0.0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / max_n)
    return BleuReport(score, precisions, bp, hyp_len, ref_len)


def token_accuracy(hypotheses, references) -> float:
    """Position-wise token matches over the longer of each hypothesis/reference pair."""
    hits = total = 0
    for hyp, ref in zip(hypotheses, references):
        h, r = _tokens(hyp, False), _tokens(ref, False)
        hits += sum(a == b for a, b in zip(h, r))
        total += max(len(h), len(r))
    return hits / total if total else 1.0


# -- length buckets ---------------------------------------------------------------------------


def bucket_bleu(sources, hypotheses, references, thresholds=DEFAULT_THRESHOLDS, lowercase: bool = False):
    """BLEU over the sentences whose source is longer than each threshold.

    Returns ``{threshold: BleuReport or None}``; None marks an empty bucket.
    """
    if list(thresholds) != sorted(thresholds):
        raise ValueError("thresholds must be ascending")
    out = {}
    for L in thresholds:
        idx = [i for i, s in enumerate(sources) if len(_tokens(s, False)) > L]
        out[L] = bleu([hypotheses[i] for i in idx], [references[i] for i in idx],
                      lowercase=lowercase) if idx else None
    return out


def length_bucket_report(pairs, translate: Callable, thresholds=DEFAULT_THRESHOLDS, lowercase: bool = False):
    """Translate every source of ``pairs`` once, then score per length bucket.

    ``translate`` maps a list of source token lists to hypothesis token lists.
    """
    sources = [s for s, _ in pairs]
    return bucket_bleu(sources, translate(sources), [t for _, t in pairs], thresholds, lowercase)


def format_buckets(report: dict) -> str:
    lines = ["threshold  ref_tokens    bleu"]
    for L, r in report.items():
        if r is None:
            lines.append(f"> {L:<7d}          0   empty")
        else:
            lines.append(f"> {L:<7d} {r.ref_len:>10d}  {r.bleu:6.2f}")
    return "\n".join(lines)


# -- ablation --------------------------------------------------------------------------------------


@dataclass
class AblationRow:
    system: str
    parameters: int | None
    accuracy: list[float] = field(default_factory=list)   # per seed
    bleu: list[float] = field(default_factory=list)       # per seed
    error: str | None = None

    @property
    def median_accuracy(self) -> float | None:
        return statistics.median(self.accuracy) if self.accuracy else None

    @property
    def median_bleu(self) -> float | None:
        return statistics.median(self.bleu) if self.bleu else None


@dataclass
class AblationReport:
    task: str
    seeds: list[int]
    baseline: str
    rows: list[AblationRow]

    def row(self, system: str) -> AblationRow:
        return next(r for r in self.rows if r.system == system)

    def delta(self, system: str) -> float | None:
        base, row = self.row(self.baseline).median_accuracy, self.row(system).median_accuracy
        if base is None or row is None:
            return None
        return row - base

    def to_dict(self) -> dict:
        return {"task": self.task, "seeds": self.seeds, "baseline": self.baseline,
                "rows": [dict(asdict(r), median_accuracy=r.median_accuracy, median_bleu=r.median_bleu,
                              delta_accuracy=self.delta(r.system)) for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["system", "parameters", "median_accuracy", "median_bleu", "delta_accuracy",
                    "accuracy_per_seed", "bleu_per_seed", "error"])
        for r in self.rows:
            w.writerow([r.system, r.parameters, r.median_accuracy, r.median_bleu, self.delta(r.system),
                        " ".join(f"{a:.4f}" for a in r.accuracy), " ".join(f"{b:.2f}" for b in r.bleu),
                        r.error or ""])
        return buf.getvalue()

    def to_table(self) -> str:
        head = f"{'SYSTEM':<12} {'PARAMETERS':>11} {'ACC':>7} {'BLEU':>7} {'DELTA':>8}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            if r.error:
                lines.append(f"{r.system:<12} {'-':>11} failed: {r.error}")
                continue
            d = self.delta(r.system)
            lines.append(f"{r.system:<12} {r.parameters:>11,d} {100 * r.median_accuracy:7.2f} "
                         f"{r.median_bleu:7.2f} {'' if d is None else f'{100 * d:+8.2f}'}")
        return "\n".join(lines)


@dataclass(frozen=True)
class Budget:
    """Training and decoding budget shared by every system of a comparison."""

    epochs: int = 30
    batch_size: int = 16
    dim: int = 64            # e = d = m
    warmup: int = 400
    dropout: float = 0.0
    beam: int = 10           # 0 decodes greedily
    select_on_dev: bool = True
    stop_at: float | None = 1.0  # end training once dev accuracy reaches this
    read_weighting: str = "literal"


@dataclass
class SystemRun:
    checkpoint: object
    parameters: int
    hypotheses: list       # test hypotheses as token lists
    selected_epoch: int
    dev_history: list[float]


def translate_all(model, src_vocab, tgt_vocab, sources, beam: int = 10) -> list[list[str]]:
    ids = [src_vocab.encode(s) for s in sources]
    if beam <= 0:
        return [tgt_vocab.decode(h) for h in greedy_decode_batch(ids, model)]
    return [tgt_vocab.decode(beam_search(x, model, beam)[0]) for x in ids]


def train_system(system: str, seed: int, splits, budget: Budget = Budget(), out_dir=None) -> SystemRun:
    """Train one channel configuration on ``splits`` (train, dev, test) and decode the test set.

    With ``select_on_dev`` the parameters of the epoch with the best greedy
    dev token accuracy are kept (the later epoch wins a tie), and training
    ends early once that accuracy reaches ``stop_at``.
    """
    train, dev, test = splits
    sv = build_vocab([s for s, _ in train])
    tv = build_vocab([t for _, t in train])
    channels = ChannelConfig.for_system(system, emb_dim=budget.dim, hidden_dim=budget.dim, mem_dim=budget.dim,
                                          read_weighting=budget.read_weighting)
    cfg = ModelConfig(channels, len(sv), len(tv), dropout=budget.dropout)
    tc = TrainConfig(epochs=budget.epochs, batch_size=budget.batch_size, seed=seed, warmup=budget.warmup,
                     out_dir=out_dir)
    best = {"acc": -1.0, "params": None, "epoch": budget.epochs}
    history: list[float] = []

    def on_epoch(epoch, _loss, ckpt):
        hyps = translate_all(ckpt.model, sv, tv, [s for s, _ in dev], beam=0)
        acc = token_accuracy(hyps, [t for _, t in dev])
        history.append(acc)
        if acc >= best["acc"]:
            best.update(acc=acc, params={k: v.copy() for k, v in ckpt.model.params.items()}, epoch=epoch)
        return budget.stop_at is not None and acc >= budget.stop_at

    ckpt, _ = fit(train, sv, tv, cfg, tc, on_epoch=on_epoch if budget.select_on_dev and dev else None)
    if best["params"] is not None:
        ckpt.model.params.update(best["params"])
    hyps = translate_all(ckpt.model, sv, tv, [s for s, _ in test], budget.beam)
    return SystemRun(ckpt, ckpt.model.num_parameters(), hyps, best["epoch"], history)


def ablation_suite(splits, systems=tuple(SYSTEMS), seeds=(1, 2, 3), budget: Budget = Budget(),
                   task: str = "custom", baseline: str = "RNN", run: Callable | None = None) -> AblationReport:
    """Train and score every system under the same data, seeds and budget.

    ``run(system, seed, splits, budget)`` returns ``(parameter_count,
    hypotheses)`` for the test sources; the default trains with
    :func:`train_system`. A failing system is recorded in its row and the
    suite moves on.
    """
    if run is None:
        def run(system, seed, splits, budget):
            r = train_system(system, seed, splits, budget)
            return r.parameters, r.hypotheses
    refs = [t for _, t in splits[2]]
    rows = []
    for system in systems:
        row = AblationRow(system, None)
        try:
            for seed in seeds:
                n_params, hyps = run(system, seed, splits, budget)
                row.parameters = n_params
                row.accuracy.append(token_accuracy(hyps, refs))
                row.bleu.append(bleu(hyps, refs).bleu)
        except Exception as exc:  # recorded per row; the suite continues
            row.error = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return AblationReport(task, list(seeds), baseline, rows)
