"""BLEU at sentence and document granularity, repetition ratio, ambiguous-token
accuracy, context ablation, and the wall-clock speed benchmark."""
from __future__ import annotations

import csv
import logging
import math
import statistics
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import data as D
from . import model as M
from . import numcore as nc
from .decode import _MARKERS, ctc_collapse, dag_lookahead, nat_argmax, split_frame, translate_batch

log = logging.getLogger(__name__)


class ContractError(ValueError):
    pass


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


@dataclass
class BleuReport:
    score: float
    precisions: list  # raw clipped precision for n = 1..max_n
    bp: float
    hyp_len: int
    ref_len: int
    matches: list = field(default_factory=list)
    totals: list = field(default_factory=list)

    def as_dict(self) -> dict:
        d = {"bleu": self.score, "bp": self.bp, "hyp_len": self.hyp_len, "ref_len": self.ref_len}
        for n, p in enumerate(self.precisions, 1):
            d[f"p{n}"] = p
        return d


def _ngrams(toks: Sequence, n: int) -> Counter:
    return Counter(tuple(toks[i:i + n]) for i in range(len(toks) - n + 1))


def bleu(hyps: Sequence[Sequence], refs: Sequence[Sequence], max_n: int = 4) -> BleuReport:
    """Corpus BLEU with clipped n-gram counts and the exponential brevity penalty.

    A zero precision for n >= 2 is replaced by (m + 1) / (d + 1); a zero unigram
    precision gives a score of 0."""
    if len(refs) == 0:
        raise ContractError("empty reference set")
    if len(hyps) != len(refs):
        raise ContractError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    match = [0] * max_n
    total = [0] * max_n
    hl = rl = 0
    for h, r in zip(hyps, refs):
        h, r = list(h), list(r)
        hl += len(h)
        rl += len(r)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            match[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            total[n - 1] += max(len(h) - n + 1, 0)
    prec = [m / t if t else 0.0 for m, t in zip(match, total)]
    if hl == 0 or match[0] == 0:
        score = 0.0
    else:
        logs = []
        for n in range(max_n):
            if match[n] > 0:
                logs.append(math.log(match[n] / total[n]))
            else:
                logs.append(math.log((match[n] + 1) / (total[n] + 1)))
        score = 100.0 * math.exp(sum(logs) / max_n)
    bp = 1.0 if hl > rl else (math.exp(1 - rl / hl) if hl else 0.0)
    return BleuReport(score * bp, prec, bp, hl, rl, match, total)


def d_bleu(hyp_docs: Sequence[Sequence[Sequence]], ref_docs: Sequence[Sequence[Sequence]], max_n: int = 4) -> BleuReport:
    """Each document (or segment) is one translation unit."""
    flat = lambda docs: [[t for s in d for t in s] for d in docs]  # noqa: E731
    return bleu(flat(hyp_docs), flat(ref_docs), max_n)


def s_bleu(hyp_docs: Sequence[Sequence[Sequence]], ref_docs: Sequence[Sequence[Sequence]], max_n: int = 4) -> BleuReport:
    """Sentence k of each output document against sentence k of its reference."""
    if len(hyp_docs) != len(ref_docs):
        raise MetricError(f"{len(hyp_docs)} hypothesis documents vs {len(ref_docs)} references")
    bad = [i for i, (h, r) in enumerate(zip(hyp_docs, ref_docs)) if len(h) != len(r)]
    if bad:
        raise MetricError(f"sentence-count mismatch in documents {bad[:20]}" + (" ..." if len(bad) > 20 else ""))
    hyps = [s for d in hyp_docs for s in d]
    refs = [s for d in ref_docs for s in d]
    return bleu(hyps, refs, max_n)


def repetition_ratio(hyps: Sequence[Sequence], n: int = 1) -> float:
    """Per-segment share of n-gram occurrences that repeat an earlier one, averaged
    over segments that contain at least one n-gram."""
    if n < 1:
        raise ContractError("n must be >= 1")
    ratios = []
    for h in hyps:
        grams = [tuple(h[i:i + n]) for i in range(len(h) - n + 1)]
        if grams:
            ratios.append((len(grams) - len(set(grams))) / len(grams))
    return float(np.mean(ratios)) if ratios else 0.0


# ---------------------------------------------------------------------------
# ambiguous-token accuracy on synthetic corpora
# ---------------------------------------------------------------------------


def ambiguous_accuracy(synth: D.SynthConfig, docs: Sequence[D.DocumentPair], hyp_docs, skip_first: bool = False) -> float:
    """Share of ambiguous source tokens whose selector-correct translation appears
    in the aligned output sentence (bag counts, clipped by the reference count)."""
    amb = D.ambiguous_types(synth)
    hit = tot = 0
    for d, hyp in zip(docs, hyp_docs):
        sel = D.selector_of(d.src_sentences)
        for j, s in enumerate(d.src_sentences):
            if skip_first and j == 0:
                continue
            want = Counter(D.translate_word(t, sel, amb) for t in s.split()
                           if D.alternative_word(t, sel, amb) is not None)
            if not want:
                continue
            got = Counter(hyp[j]) if j < len(hyp) else Counter()
            hit += sum(min(c, got[w]) for w, c in want.items())
            tot += sum(want.values())
    return hit / tot if tot else float("nan")


# ---------------------------------------------------------------------------
# whole-corpus translation helpers
# ---------------------------------------------------------------------------


def translate_docs(cfg, params, vocab, docs: Sequence[D.DocumentPair], max_len: int = 512, batch_size: int = 32):
    """Translate documents segment by segment; returns per-document sentence lists
    (gtrans/teacher) or a single flat sentence per segment (flat variants)."""
    segs = D.segment_documents(docs, max_len)
    outs = []
    for i in range(0, len(segs), batch_size):
        outs.extend(translate_batch(cfg, params, vocab, segs[i:i + batch_size]))
    by_doc: dict[str, list] = {}
    for seg, tr in zip(segs, outs):
        by_doc.setdefault(seg.doc_id, []).extend(tr.sentences)
    return [by_doc.get(d.id, []) for d in docs]


def score_docs(cfg, hyp_docs, docs: Sequence[D.DocumentPair]) -> dict:
    refs = [[s.split() for s in d.tgt_sentences] for d in docs]
    out = {"d_bleu": d_bleu(hyp_docs, refs).score}
    if cfg.grouped:
        out["s_bleu"] = s_bleu(hyp_docs, refs).score
    return out


# ---------------------------------------------------------------------------
# context ablation
# ---------------------------------------------------------------------------


def context_ablation(cfg, params, vocab, docs: Sequence[D.DocumentPair], synth: D.SynthConfig | None = None,
                     batch_size: int = 32) -> dict:
    """Score a gtrans model with full context, without target-side context (each
    sentence decoded in its own frame, full source segment kept), and without
    source-side context (each sentence paired only with its own source).

    Deltas are condition minus full, so a drop is <= 0."""
    if not cfg.grouped or cfg.variant == "at_teacher":
        raise M.ConfigurationError("context ablation needs a gtrans variant")
    refs = [[s.split() for s in d.tgt_sentences] for d in docs]
    full = translate_docs(cfg, params, vocab, docs, batch_size=batch_size)
    no_tgt = [_decode_no_target_context(cfg, params, vocab, d) for d in docs]
    single = [D.Segment(d.id, (j, j + 1), [s.split()], [t.split()])
              for d in docs for j, (s, t) in enumerate(zip(d.src_sentences, d.tgt_sentences))]
    outs = []
    for i in range(0, len(single), batch_size):
        outs.extend(translate_batch(cfg, params, vocab, single[i:i + batch_size]))
    no_src, k = [], 0
    for d in docs:
        no_src.append([outs[k + j].sentences[0] for j in range(len(d.src_sentences))])
        k += len(d.src_sentences)
    res = {}
    for name, hyp in (("full", full), ("no_target_context", no_tgt), ("no_source_context", no_src)):
        res[name] = {"s_bleu": s_bleu(hyp, refs).score}
        if synth is not None:
            res[name]["ambiguous_acc"] = ambiguous_accuracy(synth, docs, hyp)
    for name in ("no_target_context", "no_source_context"):
        for key, val in list(res[name].items()):
            res[name][f"delta_{key}"] = val - res["full"][key]
    return res


def _decode_no_target_context(cfg, params, vocab, doc: D.DocumentPair):
    """Keep the whole source segment, but give the decoder one sentence frame at a
    time (other sentences get zero-length frames that are dropped)."""
    seg = D.segment_documents([doc])[0]
    K = seg.n_sentences
    out = []
    P = params if isinstance(next(iter(params.values())), nc.Tensor) else M.as_tensors(params)

    with nc.no_grad():
        src = M.source_batch(cfg, [[vocab.encode(s) for s in seg.src]])
        enc = M.encode(cfg, P, src)
        if cfg.variant == "gtrans_glat":
            base = M.predict_lengths(cfg, P, enc)[0].chosen.tolist()
        elif cfg.variant == "gtrans_glat_ctc":
            base = [int(math.ceil(cfg.ctc_upsample * len(s))) for s in seg.src]
        else:
            base = M.dag_vertex_counts(cfg, src)[0]
        for j in range(K):
            if cfg.variant == "gtrans_dag":
                # block j alone: drop the other sentences' vertices entirely
                frame = _single_block_frame(cfg, src, base, j)
                tok, trans = M.dag_heads(cfg, P, enc, frame)
                n = int(frame.lengths[0])
                try:
                    ids = split_frame(dag_lookahead((tok.data[0, :n], trans.data[0, :n, :n])), 1)[0]
                except Exception as e:  # dead end: empty sentence
                    log.warning("%s sentence %d: %s", doc.id, j, e)
                    ids = []
            else:
                frame = _single_block_frame(cfg, src, base, j)
                pred = nat_argmax(M.decode_nat(cfg, P, enc, frame).data)[0]
                s, e = frame.spans[0][0]
                ids = pred[s:e].tolist()
                if cfg.variant == "gtrans_glat_ctc":
                    ids = ctc_collapse(ids)
            out.append(vocab.decode([t for t in ids if t not in _MARKERS]))
    return out


def _single_block_frame(cfg, src, counts, j):
    """Frame holding only sentence j's block, tagged j and copying from source
    sentence j, so the decoder sees no other target sentence."""
    fr = M.target_frame(cfg, src, [[counts[j]]])
    # re-tag and re-point copies at sentence j of the full source
    fr.tags[fr.tags >= 0] = j
    ct = src.content[0][j]
    n = int(counts[j])
    idx = ct[M.uniform_copy_index(len(ct), n)] if n else np.zeros(0, dtype=np.int64)
    fr.copy[0, 1:1 + n] = idx
    fr.spans = [[fr.spans[0][0]]]
    fr.blocks = [[fr.blocks[0][0]]]
    return fr


# ---------------------------------------------------------------------------
# speed benchmark
# ---------------------------------------------------------------------------

SPEED_COLUMNS = ["model", "bucket", "batch_size", "sec_per_segment", "init_sec", "speedup", "speedup_ex", "reps"]


@dataclass
class SpeedReport:
    rows: list  # dicts keyed by SPEED_COLUMNS

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=SPEED_COLUMNS, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r[k] for k in SPEED_COLUMNS})

    def get(self, model, bucket, batch) -> dict:
        for r in self.rows:
            if r["model"] == model and str(r["bucket"]) == str(bucket) and r["batch_size"] == batch:
                return r
        raise KeyError((model, bucket, batch))


def bucket_segments(docs: Sequence[D.DocumentPair], buckets: Sequence) -> dict:
    """Segments per length bucket.  ``"sent"`` holds single sentences; a numeric
    bound b holds segments packed to <= b source tokens and longer than half of b."""
    out = {}
    for b in buckets:
        if str(b) == "sent":
            out["sent"] = [D.Segment(d.id, (j, j + 1), [s.split()], [t.split()])
                           for d in docs for j, (s, t) in enumerate(zip(d.src_sentences, d.tgt_sentences))]
        else:
            b = int(b)
            out[b] = [s for s in D.segment_documents(docs, b) if s.src_len > b // 2]
    return out


def _time_call(cfg, params, vocab, segs, dag_mode="lookahead"):
    t0 = time.perf_counter()
    P = M.as_tensors(params)  # one-time setup, timed separately
    t1 = time.perf_counter()
    translate_batch(cfg, P, vocab, segs, dag_mode=dag_mode)
    t2 = time.perf_counter()
    return t2 - t0, t1 - t0


def bench_speed(models: dict, teacher: str, segments: dict, batch_sizes: Sequence[int] = (1, 2, 4, 8),
                reps: int = 5, warmup: int = 1, n_batches: int = 1) -> SpeedReport:
    """Median wall-clock seconds per segment for each model, bucket and batch size.

    ``models`` maps a name to ``(cfg, params, vocab)``; ``teacher`` names the
    reference row.  Each timed call includes building the parameter tensors; that
    setup is also timed alone and subtracted for the init-excluded speedup."""
    sizes = {n: m[0].size_signature() for n, m in models.items()}
    if len(set(sizes.values())) > 1:
        raise M.ConfigurationError(f"model sizes differ, comparison would be unfair: {sizes}")
    if reps < 5:
        log.warning("fewer than 5 timed repetitions (%d)", reps)
    rows = []
    for bucket, segs in segments.items():
        for bs in batch_sizes:
            need = bs * n_batches
            if len(segs) < need:
                log.warning("bucket %s has %d segments < %d needed; skipped", bucket, len(segs), need)
                continue
            batches = [segs[i * bs:(i + 1) * bs] for i in range(n_batches)]
            res = {}
            for name, (cfg, params, vocab) in models.items():
                for _ in range(warmup):
                    _time_call(cfg, params, vocab, batches[0])
                tot, init = [], []
                for _ in range(reps):
                    a = b = 0.0
                    for bt in batches:
                        x, y = _time_call(cfg, params, vocab, bt)
                        a, b = a + x, b + y
                    tot.append(a / need)
                    init.append(b / need)
                res[name] = (statistics.median(tot), statistics.median(init))
            t_sec, t_init = res[teacher]
            for name, (sec, init) in res.items():
                rows.append({
                    "model": name, "bucket": bucket, "batch_size": bs, "sec_per_segment": sec, "init_sec": init,
                    "speedup": t_sec / sec, "speedup_ex": (t_sec - t_init) / (sec - init), "reps": reps,
                })
    return SpeedReport(rows)


def speed_svg(report: SpeedReport, path, teacher: str | None = None) -> None:
    """Two panels: speedup vs. bucket (batch 1) and speedup vs. batch size at the
    longest bucket, solid with init time and dashed without.  One polyline per
    model and curve."""
    rows = report.rows
    models = [m for m in dict.fromkeys(r["model"] for r in rows) if m != teacher]
    buckets = list(dict.fromkeys(str(r["bucket"]) for r in rows))
    batches = sorted({r["batch_size"] for r in rows})
    W, H, pad = 360, 240, 40
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{2 * W}" height="{H}" font-family="sans-serif" font-size="10">']

    def panel(x0, title, xs, series):
        ys = [v for _, pts, _ in series for v in pts if v is not None] or [1.0]
        ymax = max(ys) * 1.1
        parts.append(f'<text x="{x0 + W / 2}" y="14" text-anchor="middle">{title}</text>')
        parts.append(f'<line x1="{x0 + pad}" y1="{H - pad}" x2="{x0 + W - 10}" y2="{H - pad}" stroke="black"/>')
        parts.append(f'<line x1="{x0 + pad}" y1="{H - pad}" x2="{x0 + pad}" y2="20" stroke="black"/>')
        parts.append(f'<text x="{x0 + 4}" y="24">{ymax:.1f}x</text>')
        step = (W - pad - 20) / max(len(xs) - 1, 1)
        for i, x in enumerate(xs):
            parts.append(f'<text x="{x0 + pad + i * step}" y="{H - pad + 14}" text-anchor="middle">{x}</text>')
        for k, (name, pts, dash) in enumerate(series):
            coords = [f"{x0 + pad + i * step:.1f},{H - pad - (v / ymax) * (H - pad - 20):.1f}"
                      for i, v in enumerate(pts) if v is not None]
            c = colors[(k // 2 if dash is not None else k) % len(colors)]
            extra = ' stroke-dasharray="4,3"' if dash else ""
            parts.append(f'<polyline fill="none" stroke="{c}"{extra} points="{" ".join(coords)}"><title>{name}</title></polyline>')

    def val(m, b, bs, key):
        for r in rows:
            if r["model"] == m and str(r["bucket"]) == b and r["batch_size"] == bs:
                return r[key]
        return None

    panel(0, "speedup vs. length (batch 1)", buckets,
          [(m, [val(m, b, batches[0], "speedup") for b in buckets], None) for m in models])
    last = buckets[-1]
    series = []
    for m in models:
        series.append((m, [val(m, last, bs, "speedup") for bs in batches], False))
        series.append((m + " /ex", [val(m, last, bs, "speedup_ex") for bs in batches], True))
    panel(W, f"speedup vs. batch size (bucket {last})", [str(b) for b in batches], series)
    for k, m in enumerate(models):
        parts.append(f'<text x="{W - 80}" y="{30 + 12 * k}" fill="{colors[k % len(colors)]}">{m}</text>')
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts) + "\n")
