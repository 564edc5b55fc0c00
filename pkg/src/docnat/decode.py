"""Inference for the teacher and every NAT variant."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import model as M
from . import numcore as nc
from .data import BLANK, BOS, EOS, PAD, Segment, Vocab
from .loss import DagGraph

log = logging.getLogger(__name__)


class DecodeError(RuntimeError):
    pass


# decoder forward passes since import (batched passes count once)
COUNTER = {"decoder": 0}


@dataclass
class Translation:
    sentences: list  # list of token-string lists
    tokens: list  # flat token strings, frame markers removed
    wall_time: float = 0.0
    mode: str = ""
    truncated: bool = False
    passes: int = 0
    diagnostics: list = field(default_factory=list)


def nat_argmax(logits) -> np.ndarray:
    """Position-wise argmax; ties go to the lowest id."""
    return np.argmax(np.asarray(logits), axis=-1)


def ctc_collapse(tokens: Sequence[int], blank: int = BLANK) -> list[int]:
    """Merge adjacent duplicates, then drop blanks."""
    out, prev = [], None
    for t in tokens:
        t = int(t)
        if t != prev and t != blank:
            out.append(t)
        prev = t
    return out


def _graph_arrays(g) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(g, DagGraph):
        return g.token_logp.data, g.trans_logp.data
    return np.asarray(g[0]), np.asarray(g[1])


def dag_lookahead(g) -> list[int]:
    """From vertex 0, repeatedly take the (vertex, token) pair with the best joint
    score until the last vertex; one token per visited vertex."""
    tok, trans = _graph_arrays(g)
    n = trans.shape[0]
    best_tok = tok.argmax(axis=1)
    best = tok.max(axis=1)
    i, out = 0, [int(best_tok[0])]
    while i != n - 1:
        score = trans[i] + best
        j = int(np.argmax(score))
        if not np.isfinite(score[j]) or j <= i:
            raise DecodeError(f"dead end at vertex {i} of {n} (no finite outgoing transition)")
        out.append(int(best_tok[j]))
        i = j
    return out


def dag_greedy(g) -> list[int]:
    """Next vertex by transition score alone, then the vertex's best token."""
    tok, trans = _graph_arrays(g)
    n = trans.shape[0]
    i, out = 0, [int(tok[0].argmax())]
    while i != n - 1:
        j = int(np.argmax(trans[i]))
        if not np.isfinite(trans[i, j]) or j <= i:
            raise DecodeError(f"dead end at vertex {i} of {n} (no finite outgoing transition)")
        out.append(int(tok[j].argmax()))
        i = j
    return out


def split_frame(ids: Sequence[int], K: int) -> list[list[int]]:
    """Cut a ``<s> ... </s>`` framed stream into sentences; always returns K lists."""
    sents, cur, inside = [], [], False
    for t in ids:
        if t == BOS:
            cur, inside = [], True
        elif t == EOS:
            sents.append(cur)
            cur, inside = [], False
        elif t != PAD:
            cur.append(t)
    if inside and cur:
        sents.append(cur)
    sents = sents[:K]
    return sents + [[] for _ in range(K - len(sents))]


_MARKERS = frozenset((PAD, BOS, EOS, BLANK))


def _finish(vocab: Vocab, sents, mode, **kw) -> Translation:
    strs = [vocab.decode([t for t in s if t not in _MARKERS]) for s in sents]
    return Translation(strs, [t for s in strs for t in s], mode=mode, **kw)


# ---------------------------------------------------------------------------
# teacher
# ---------------------------------------------------------------------------


def at_greedy(cfg, P, enc: M.EncoderStates, n_sentences: Sequence[int], max_len: Sequence[int]):
    """Batched stepwise argmax with cached keys/values.  Stops an example after
    its K-th eos or at ``max_len`` generated tokens (flagged as truncated).
    Returns (frames with leading bos, truncated flags, per-example decoder passes)."""
    B = len(n_sentences)
    st = M.teacher_start(cfg, enc, n_sentences)
    prefixes = [[BOS] for _ in range(B)]
    eos_count = np.zeros(B, dtype=int)
    active = np.ones(B, dtype=bool)
    truncated = np.zeros(B, dtype=bool)
    last = np.full(B, BOS, dtype=np.int64)
    while active.any():
        logits = M.teacher_step(cfg, P, enc, st, last)
        COUNTER["decoder"] += 1
        nxt = np.argmax(logits, axis=-1)
        for b in np.flatnonzero(active):
            prefixes[b].append(int(nxt[b]))
            eos_count[b] += int(nxt[b] == EOS)
            if eos_count[b] >= n_sentences[b]:
                active[b] = False
            elif len(prefixes[b]) - 1 >= max_len[b]:
                active[b] = False
                truncated[b] = True
        # finished rows keep stepping on eos; their outputs are ignored
        last = np.where(active, nxt, EOS)
    passes = [len(p) - 1 for p in prefixes]
    return prefixes, truncated, passes


def _subset(src: M.SourceBatch, idx) -> M.SourceBatch:
    if len(idx) == src.ids.shape[0]:
        return src
    return M.SourceBatch(src.ids[idx], src.tags[idx], src.pos[idx], [src.spans[i] for i in idx],
                         [src.content[i] for i in idx], src.lengths[idx])


def teacher_max_len(src_len: int) -> int:
    return 2 * src_len + 8


# ---------------------------------------------------------------------------
# end-to-end
# ---------------------------------------------------------------------------


def segment_ids(vocab: Vocab, seg: Segment):
    return [vocab.encode(s) for s in seg.src]


def translate_batch(cfg, params, vocab: Vocab, segments: Sequence[Segment], dag_mode: str = "lookahead",
                    lengths: Sequence | None = None) -> list[Translation]:
    """Translate several segments with one batched forward pass per decoding step.

    ``lengths`` optionally overrides predicted target lengths (per-sentence lists
    for grouped variants, totals otherwise); it is used by evaluation ablations."""
    segments = list(segments)
    if not segments:
        return []
    t0 = time.perf_counter()
    nonempty = [i for i, s in enumerate(segments) if s.n_sentences and s.src_len]
    results: list[Translation | None] = [None] * len(segments)
    for i, s in enumerate(segments):
        if i not in nonempty:
            results[i] = Translation([[] for _ in s.src], [], mode=cfg.variant)
    if nonempty:
        segs = [segments[i] for i in nonempty]
        over = None if lengths is None else [lengths[i] for i in nonempty]
        P = params if isinstance(next(iter(params.values())), nc.Tensor) else M.as_tensors(params)
        with nc.no_grad():
            out = _translate(cfg, P, vocab, segs, dag_mode, over)
        for i, tr in zip(nonempty, out):
            results[i] = tr
    dt = time.perf_counter() - t0
    for tr in results:
        tr.wall_time = dt
    return results


def translate_segment(cfg, params, vocab: Vocab, segment: Segment, mode: str = "lookahead") -> Translation:
    return translate_batch(cfg, params, vocab, [segment], dag_mode=mode)[0]


def _translate(cfg, P, vocab, segs, dag_mode, lengths):
    v = cfg.variant
    src_ids = [segment_ids(vocab, s) for s in segs]
    src = M.source_batch(cfg, src_ids)
    enc = M.encode(cfg, P, src)
    K = [s.n_sentences for s in segs]
    B = len(segs)

    if v == "at_teacher":
        frames, trunc, passes = at_greedy(cfg, P, enc, K, [teacher_max_len(int(n)) for n in src.lengths])
        return [
            _finish(vocab, split_frame(frames[b][1:], K[b]), v, truncated=bool(trunc[b]), passes=passes[b])
            for b in range(B)
        ]

    if v in ("nat_vanilla", "glat", "gtrans_glat"):
        if lengths is None:
            preds = M.predict_lengths(cfg, P, enc)
            counts = [p.chosen.tolist() if cfg.grouped else p.total for p in preds]
        else:
            counts = list(lengths)
        frame = M.target_frame(cfg, src, counts)
        ids = nat_argmax(M.decode_nat(cfg, P, enc, frame).data)
        COUNTER["decoder"] += 1
        out = []
        for b in range(B):
            if cfg.grouped:
                sents = [ids[b, s:e].tolist() for s, e in frame.spans[b]]
            else:
                sents = [ids[b, : frame.lengths[b]].tolist()]
            out.append(_finish(vocab, sents, v, passes=1))
        return out

    if v in ("glat_ctc", "gtrans_glat_ctc"):
        if cfg.grouped:
            counts = [[int(math.ceil(cfg.ctc_upsample * len(x))) for x in xs] for xs in src_ids]
        else:
            counts = [int(math.ceil(cfg.ctc_upsample * sum(len(x) for x in xs))) for xs in src_ids]
        frame = M.target_frame(cfg, src, counts)
        ids = nat_argmax(M.decode_nat(cfg, P, enc, frame).data)
        COUNTER["decoder"] += 1
        out = []
        for b in range(B):
            sents = [ctc_collapse(ids[b, s:e]) for s, e in frame.spans[b]]
            out.append(_finish(vocab, sents, v, passes=1))
        return out

    if v in ("dag", "gtrans_dag"):
        counts = M.dag_vertex_counts(cfg, src)
        frame = M.target_frame(cfg, src, counts)
        tok, trans = M.dag_heads(cfg, P, enc, frame)
        COUNTER["decoder"] += 1
        walk = dag_lookahead if dag_mode == "lookahead" else dag_greedy
        out = []
        for b in range(B):
            n = int(frame.lengths[b])
            diag = []
            try:
                ids = walk((tok.data[b, :n], trans.data[b, :n, :n]))
            except DecodeError as e:
                log.warning("segment %d: %s", b, e)
                ids, diag = [], [str(e)]
            if cfg.grouped:
                sents = split_frame(ids, K[b])
            else:
                sents = [[t for t in ids if t not in (BOS, EOS, PAD)]]
            out.append(_finish(vocab, sents, v, passes=1, diagnostics=diag))
        return out

    raise M.ConfigurationError(f"cannot translate with variant {v!r}")
