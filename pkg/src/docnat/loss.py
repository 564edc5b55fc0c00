"""Training objectives.

The CTC and DAG likelihoods are fused ops: the forward pass runs the alignment
DP, and the backward pass hands back posterior occupancies computed by the
matching backward DP, so no per-cell graph is ever recorded.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .data import BLANK, BOS, EOS

log = logging.getLogger(__name__)
NEG_INF = -np.inf


class ContractError(ValueError):
    pass


class DataError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# cross-entropy style losses
# ---------------------------------------------------------------------------


def xe_nat_loss(logits, target: np.ndarray, mask: np.ndarray) -> nc.Tensor:
    """Mean over unmasked positions of -log p(target)."""
    logits = nc.as_tensor(logits)
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ContractError("xe_nat_loss: every position is masked")
    if logits.shape[:-1] != np.shape(target):
        raise ContractError(f"logits {logits.shape} do not match target {np.shape(target)}")
    lp = nc.pick(nc.log_softmax(logits), np.asarray(target))
    return -nc.sum_(lp * mask.astype(float)) * (1.0 / n)


def length_loss(logits, true_lengths: np.ndarray, valid: np.ndarray) -> nc.Tensor:
    """Mean cross-entropy of per-sentence length classes (class c <-> length c+1)."""
    logits = nc.as_tensor(logits)
    C = logits.shape[-1]
    lengths = np.asarray(true_lengths)
    if (lengths[valid] > C).any():
        log.warning("clamping %d target lengths above %d", int((lengths[valid] > C).sum()), C)
    cls = np.clip(lengths, 1, C) - 1
    return xe_nat_loss(logits, cls, valid)


# ---------------------------------------------------------------------------
# glancing
# ---------------------------------------------------------------------------


def glancing_reveal(pred: np.ndarray, target: np.ndarray, ratio_fn: Callable[[int], float],
                    rng: np.random.Generator, pool: np.ndarray | None = None,
                    cap: int | None = None) -> np.ndarray:
    """Positions to reveal: ceil(ratio_fn(hamming)) drawn uniformly from ``pool``
    (default: every position)."""
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ContractError("glancing needs equal-length prediction and target")
    pool = np.arange(len(target)) if pool is None else np.asarray(pool)
    d = int((pred[pool] != target[pool]).sum()) if len(pool) else 0
    n = int(math.ceil(ratio_fn(d) - 1e-12)) if d else 0
    n = min(n, len(pool) if cap is None else cap)
    if n <= 0:
        return np.zeros(0, dtype=np.int64)
    return np.sort(rng.choice(pool, size=n, replace=False))


# ---------------------------------------------------------------------------
# CTC
# ---------------------------------------------------------------------------


def _expand(targets: Sequence[Sequence[int]], blank: int):
    L = max([len(y) for y in targets] + [0])
    S = 2 * L + 1
    N = len(targets)
    ext = np.full((N, S), blank, dtype=np.int64)
    valid = np.zeros((N, S), dtype=bool)
    for n, y in enumerate(targets):
        ext[n, 1:2 * len(y):2] = y
        valid[n, :2 * len(y) + 1] = True
    skip = np.zeros((N, S), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])
    return ext, valid, skip


def _shift(a, k):
    out = np.full_like(a, NEG_INF)
    out[..., k:] = a[..., :-k]
    return out


def ctc_alpha(E: np.ndarray, skip: np.ndarray) -> np.ndarray:
    """Forward log scores; E: [N, M, S] emissions of the expanded target."""
    N, M, S = E.shape
    alpha = np.full((N, M, S), NEG_INF)
    alpha[:, 0, :2] = E[:, 0, :2]
    with np.errstate(invalid="ignore"):
        for t in range(1, M):
            prev = alpha[:, t - 1]
            a = np.logaddexp(prev, _shift(prev, 1))
            a = np.logaddexp(a, np.where(skip, _shift(prev, 2), NEG_INF))
            alpha[:, t] = a + E[:, t]
    return alpha


def ctc_core(lp: np.ndarray, targets, in_lens, blank: int, need_grad: bool = True):
    """Batched CTC.  lp: [N, M, V] log-emissions.  Returns (logZ [N], d logZ / d lp)."""
    N, M, V = lp.shape
    ext, valid, skip = _expand(targets, blank)
    S = ext.shape[1]
    E = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (N, M, S)), axis=2)
    E = np.where(valid[:, None, :], E, NEG_INF)
    in_lens = np.asarray(in_lens)
    tl = np.array([len(y) for y in targets])
    alpha = ctc_alpha(E, skip)
    rows = np.arange(N)
    last = alpha[rows, in_lens - 1]
    end = last[rows, 2 * tl]
    end2 = np.where(tl > 0, last[rows, np.maximum(2 * tl - 1, 0)], NEG_INF)
    logZ = np.logaddexp(end, end2)
    if not need_grad:
        return logZ, None
    beta = np.full((N, M, S), NEG_INF)
    init = np.full((N, S), NEG_INF)
    init[rows, 2 * tl] = 0.0
    init[rows[tl > 0], 2 * tl[tl > 0] - 1] = 0.0
    with np.errstate(invalid="ignore"):
        for t in range(M - 1, -1, -1):
            if t < M - 1:
                nxt = beta[:, t + 1] + E[:, t + 1]
                b = np.logaddexp(nxt, _shift_left(nxt, 1))
                b = np.logaddexp(b, np.where(_shift_left_bool(skip, 2), _shift_left(nxt, 2), NEG_INF))
            else:
                b = np.full((N, S), NEG_INF)
            b = np.where((t == in_lens - 1)[:, None], init, b)
            b = np.where((t > in_lens - 1)[:, None], NEG_INF, b)
            beta[:, t] = b
        ok = np.isfinite(logZ)
        occ = np.exp(alpha + beta - np.where(ok, logZ, 0.0)[:, None, None])
    occ = np.where(ok[:, None, None] & np.isfinite(occ), occ, 0.0)
    onehot = np.zeros((N, S, V))
    np.put_along_axis(onehot, ext[:, :, None], 1.0, axis=2)
    onehot *= valid[:, :, None]
    return logZ, occ @ onehot


def _shift_left(a, k):
    out = np.full_like(a, NEG_INF)
    out[..., :-k] = a[..., k:]
    return out


def _shift_left_bool(a, k):
    out = np.zeros_like(a)
    out[..., :-k] = a[..., k:]
    return out


def ctc_batch(lp: nc.Tensor, targets, in_lens, blank: int = BLANK) -> nc.Tensor:
    """Differentiable batched CTC log-likelihood, one value per problem."""
    need = nc.grad_enabled() and lp.requires_grad
    logZ, grad = ctc_core(lp.data, targets, in_lens, blank, need_grad=need)
    return nc.make(logZ, (lp,), lambda g: (g[:, None, None] * grad,))


def ctc_log_prob(token_logp, target: Sequence[int], blank: int = BLANK) -> nc.Tensor:
    """log sum over alignments of prod_i p(a_i); -inf if no alignment fits."""
    token_logp = nc.as_tensor(token_logp)
    M, V = token_logp.shape
    if not 0 <= blank < V:
        raise ContractError(f"blank id {blank} outside vocabulary of size {V}")
    out = ctc_batch(nc.reshape(token_logp, (1, M, V)), [list(target)], [M], blank)
    return nc.reshape(out, ())


def ctc_sentence_log_prob(token_logp, target: Sequence[int], tgt_spans, reserved_spans,
                          blank: int = BLANK) -> nc.Tensor:
    """Sum over sentences j of CTC(token_logp[reserved_j], target[tgt_span_j])."""
    token_logp = nc.as_tensor(token_logp)
    if len(tgt_spans) != len(reserved_spans):
        raise DataError(f"{len(tgt_spans)} target sentences vs {len(reserved_spans)} reserved spans")
    M, V = token_logp.shape
    if not 0 <= blank < V:
        raise ContractError(f"blank id {blank} outside vocabulary of size {V}")
    target = list(target)
    width = max(e - s for s, e in reserved_spans)
    idx = np.full((len(reserved_spans), width), -1, dtype=np.int64)
    for j, (s, e) in enumerate(reserved_spans):
        idx[j, : e - s] = np.arange(s, e)
    rows = nc.take_rows(token_logp, idx)
    per = ctc_batch(rows, [target[s:e] for s, e in tgt_spans], [e - s for s, e in reserved_spans], blank)
    return nc.sum_(per)


def ctc_viterbi_batch(lp: np.ndarray, targets, in_lens, blank: int = BLANK) -> np.ndarray:
    """Best alignments as [N, M] token arrays (blanks included); rows whose target
    cannot be aligned are all -1, positions past ``in_lens[n]`` are -1 too."""
    N, M, V = lp.shape
    ext, valid, skip = _expand(targets, blank)
    S = ext.shape[1]
    E = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (N, M, S)), axis=2)
    E = np.where(valid[:, None, :], E, NEG_INF)
    score = np.full((N, S), NEG_INF)
    score[:, :2] = E[:, 0, :2]
    hist = np.zeros((N, M, S))
    hist[:, 0] = score
    back = np.zeros((N, M, S), dtype=np.int64)
    for t in range(1, M):
        stack = np.stack([score, _shift(score, 1), np.where(skip, _shift(score, 2), NEG_INF)])
        arg = np.argmax(stack, axis=0)
        score = np.take_along_axis(stack, arg[None], axis=0)[0] + E[:, t]
        hist[:, t] = score
        back[:, t] = arg
    in_lens = np.asarray(in_lens)
    tl = np.array([len(y) for y in targets])
    rows = np.arange(N)
    last = hist[rows, in_lens - 1]
    e1 = last[rows, 2 * tl]
    e2 = np.where(tl > 0, last[rows, np.maximum(2 * tl - 1, 0)], NEG_INF)
    s = np.where(e2 > e1, 2 * tl - 1, 2 * tl)
    feasible = np.isfinite(np.maximum(e1, e2))
    path = np.full((N, M), -1, dtype=np.int64)
    for t in range(M - 1, -1, -1):
        live = t <= in_lens - 1
        path[live, t] = ext[rows[live], s[live]]
        s = np.where(live, s - back[rows, t, s], s)
    path[~feasible] = -1
    return path


def ctc_viterbi(lp: np.ndarray, target: Sequence[int], blank: int = BLANK) -> np.ndarray | None:
    """Best single alignment of ``target`` to the rows of ``lp``, or None."""
    path = ctc_viterbi_batch(lp[None], [list(target)], [lp.shape[0]], blank)[0]
    return None if (path < 0).any() else path


# ---------------------------------------------------------------------------
# DAG
# ---------------------------------------------------------------------------


@dataclass
class DagGraph:
    token_logp: nc.Tensor  # [M, V]
    trans_logp: nc.Tensor  # [M, M]
    vertex_tags: np.ndarray | None = None
    bos_vertices: list = field(default_factory=list)
    eos_vertices: list = field(default_factory=list)

    @property
    def M(self) -> int:
        return self.trans_logp.shape[0]


def dag_core(tok: np.ndarray, trans: np.ndarray, targets, n_vertices, need_grad: bool = True):
    """Batched DAG marginal.  tok: [B, M, V], trans: [B, M, M] (log).  Path starts
    at vertex 0 and ends at vertex n_vertices[b]-1.  Returns logZ and grads."""
    B, M, V = tok.shape
    tl = np.array([len(y) for y in targets])
    L = max(int(tl.max()), 1)
    y = np.zeros((B, L), dtype=np.int64)
    for b, t in enumerate(targets):
        y[b, : len(t)] = t
    E = np.take_along_axis(tok, np.broadcast_to(y[:, None, :], (B, M, L)), axis=2).transpose(0, 2, 1)
    P = np.exp(trans)
    rows = np.arange(B)
    f = np.full((B, L, M), NEG_INF)
    f[:, 0, 0] = E[:, 0, 0]
    cs = np.zeros((B, L))
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        for t in range(1, L):
            prev = f[:, t - 1]
            c = prev.max(axis=1)
            c = np.where(np.isfinite(c), c, 0.0)
            cs[:, t - 1] = c
            s = np.matmul(np.exp(prev - c[:, None])[:, None, :], P)[:, 0, :]
            f[:, t] = np.log(s) + c[:, None] + E[:, t]
    nv = np.asarray(n_vertices)
    logZ = f[rows, np.maximum(tl - 1, 0), nv - 1]
    logZ = np.where((tl >= 1) & (tl <= nv), logZ, NEG_INF)
    if not need_grad:
        return logZ, None, None
    bt = np.full((B, L, M), NEG_INF)
    init = np.full((B, M), NEG_INF)
    init[rows, nv - 1] = 0.0
    ds = np.zeros((B, L))
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        for t in range(L - 1, -1, -1):
            if t < L - 1:
                h = E[:, t + 1] + bt[:, t + 1]
                d = h.max(axis=1)
                d = np.where(np.isfinite(d), d, 0.0)
                ds[:, t + 1] = d
                s = np.matmul(P, np.exp(h - d[:, None])[:, :, None])[:, :, 0]
                b = np.log(s) + d[:, None]
            else:
                b = np.full((B, M), NEG_INF)
            b = np.where((t == tl - 1)[:, None], init, b)
            b = np.where((t > tl - 1)[:, None], NEG_INF, b)
            bt[:, t] = b
        ok = np.isfinite(logZ)
        z = np.where(ok, logZ, 0.0)
        node = np.exp(f + bt - z[:, None, None])
        node = np.where(ok[:, None, None] & np.isfinite(node), node, 0.0)
        # edge posteriors summed over steps: P * sum_t a_{t-1}[i] g_t[j]
        if L > 1:
            A = np.exp(f[:, :-1] - cs[:, :-1, None])
            h = E[:, 1:] + bt[:, 1:]
            w = cs[:, :-1] + ds[:, 1:] - z[:, None]
            G = np.exp(h - ds[:, 1:, None] + w[:, :, None])
            A = np.where(np.isfinite(A), A, 0.0)
            G = np.where(np.isfinite(G), G, 0.0)
            g_trans = P * np.matmul(A.transpose(0, 2, 1), G)
        else:
            g_trans = np.zeros_like(trans)
    g_trans = np.where(ok[:, None, None], g_trans, 0.0)
    onehot = np.zeros((B, L, V))
    np.put_along_axis(onehot, y[:, :, None], 1.0, axis=2)
    onehot *= (np.arange(L)[None, :] < tl[:, None])[:, :, None]
    g_tok = node.transpose(0, 2, 1) @ onehot
    return logZ, g_tok, g_trans


def dag_batch(tok: nc.Tensor, trans: nc.Tensor, targets, n_vertices) -> nc.Tensor:
    need = nc.grad_enabled() and (tok.requires_grad or trans.requires_grad)
    logZ, gt, gr = dag_core(tok.data, trans.data, targets, n_vertices, need_grad=need)
    return nc.make(logZ, (tok, trans), lambda g: (g[:, None, None] * gt, g[:, None, None] * gr))


def dag_log_prob(g: DagGraph, target: Sequence[int]) -> nc.Tensor:
    """log sum over increasing vertex paths 0 -> M-1 of length |y| of transition
    and emission probabilities."""
    M = g.M
    if len(target) > M:
        log.info("dag_log_prob: target length %d exceeds %d vertices", len(target), M)
    V = g.token_logp.shape[1]
    out = dag_batch(nc.reshape(g.token_logp, (1, M, V)), nc.reshape(g.trans_logp, (1, M, M)), [list(target)], [M])
    return nc.reshape(out, ())


def sentence_transition_mask(vertex_tags, bos_vertices, eos_vertices) -> np.ndarray:
    """j > i within a sentence, plus eos(s) -> bos(s+1)."""
    tags = np.asarray(vertex_tags)
    M = len(tags)
    m = np.triu(np.ones((M, M), dtype=bool), 1) & (tags[:, None] == tags[None, :])
    for s in range(len(eos_vertices) - 1):
        m[eos_vertices[s], bos_vertices[s + 1]] = True
    return m


def apply_sentence_mask(g: DagGraph) -> DagGraph:
    """Disable cross-sentence transitions except eos(s) -> bos(s+1); renormalize rows."""
    if g.vertex_tags is None or not g.bos_vertices or not g.eos_vertices:
        raise ConfigurationError("sentence masking needs vertex tags and bos/eos vertices")
    if len(g.bos_vertices) != len(g.eos_vertices):
        raise ConfigurationError("unequal numbers of bos and eos vertices")
    mask = sentence_transition_mask(g.vertex_tags, g.bos_vertices, g.eos_vertices)
    trans = nc.log_softmax_masked(g.trans_logp, mask & np.isfinite(g.trans_logp.data))
    return DagGraph(g.token_logp, trans, g.vertex_tags, list(g.bos_vertices), list(g.eos_vertices))


# ---------------------------------------------------------------------------
# per-variant objective
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    """Token ids per example and sentence (no markers)."""

    src: list
    tgt: list

    def __len__(self):
        return len(self.src)


def _flat(sents):
    return [t for s in sents for t in s]


def _glance_ratio(coef: float):
    return lambda d: coef * d


def composite_loss(cfg, P, batch: Batch, rng: np.random.Generator | None = None,
                   glance: float = 0.5, w_len: float = 0.1):
    """Scalar training loss for ``cfg.variant`` plus a metrics dict."""
    from . import model as M

    rng = rng if rng is not None else np.random.default_rng(0)
    v = cfg.variant
    src = M.source_batch(cfg, batch.src)
    enc = M.encode(cfg, P, src)
    metrics = {"skipped": 0}

    if v == "at_teacher":
        full = [_framed(t) for t in batch.tgt]
        logits = M.decode_teacher(cfg, P, enc, [f[:-1] for f in full], [len(t) for t in batch.tgt])
        T = logits.shape[1]
        tgt = np.zeros((len(batch), T), dtype=np.int64)
        mask = np.zeros((len(batch), T), dtype=bool)
        for b, f in enumerate(full):
            tgt[b, : len(f) - 1] = f[1:]
            mask[b, : len(f) - 1] = True
        loss = xe_nat_loss(logits, tgt, mask)
        metrics["loss"] = float(loss.data)
        return loss, metrics

    if v in ("nat_vanilla", "glat", "gtrans_glat"):
        counts = [[len(s) for s in t] for t in batch.tgt] if cfg.grouped else [len(_flat(t)) for t in batch.tgt]
        frame = M.target_frame(cfg, src, counts)
        tgt = _frame_targets(frame, batch.tgt, cfg.grouped)
        reveal = None
        if v != "nat_vanilla" and glance > 0:
            with nc.no_grad():
                pred = np.argmax(M.decode_nat(cfg, P, enc, frame).data, axis=-1)
            reveal = np.zeros_like(frame.slot)
            for b in range(len(batch)):
                pool = np.flatnonzero(frame.slot[b])
                pos = glancing_reveal(pred[b], tgt[b], _glance_ratio(glance), rng, pool, cap=len(pool) - 1)
                reveal[b, pos] = True
        logits = M.decode_nat(cfg, P, enc, frame, reveal, tgt if reveal is not None else None)
        mask = frame.slot if reveal is None else frame.slot & ~reveal
        loss = xe_nat_loss(logits, tgt, mask)
        len_logits, valid = M.length_logits(cfg, P, enc)
        true = np.zeros(valid.shape, dtype=np.int64)
        for b, t in enumerate(batch.tgt):
            if cfg.grouped:
                true[b, : len(t)] = [len(s) for s in t]
            else:
                true[b, 0] = len(_flat(t))
        ll = length_loss(len_logits, true, valid)
        metrics.update(token_loss=float(loss.data), length_loss=float(ll.data))
        if w_len:
            loss = loss + ll * w_len
        metrics["loss"] = float(loss.data)
        return loss, metrics

    if v in ("glat_ctc", "gtrans_glat_ctc"):
        if cfg.grouped:
            counts = [[int(math.ceil(cfg.ctc_upsample * len(s))) for s in x] for x in batch.src]
        else:
            counts = [int(math.ceil(cfg.ctc_upsample * len(_flat(x)))) for x in batch.src]
        frame = M.target_frame(cfg, src, counts)
        problems = []  # (example, span, target)
        for b in range(len(batch)):
            if cfg.grouped:
                for j, sp in enumerate(frame.spans[b]):
                    problems.append((b, sp, list(batch.tgt[b][j])))
            else:
                problems.append((b, frame.spans[b][0], _flat(batch.tgt[b])))
        reveal = None
        reveal_tok = None
        if glance > 0:
            with nc.no_grad():
                lg = M.decode_nat(cfg, P, enc, frame).data
            lp0 = lg - nc._lse(lg, keepdims=True)
            pred = np.argmax(lg, axis=-1)
            aligned = np.full(frame.tokens.shape, -1, dtype=np.int64)
            width = max(e - s for _, (s, e), _ in problems)
            T0 = lp0.shape[1]
            gidx = np.zeros((len(problems), width), dtype=np.int64)
            for n, (b, (s, e), _) in enumerate(problems):
                gidx[n] = b * T0 + np.minimum(np.arange(s, s + width), T0 - 1)
            paths = ctc_viterbi_batch(lp0.reshape(-1, lp0.shape[-1])[gidx], [y for _, _, y in problems],
                                      [max(e - s, 1) for _, (s, e), _ in problems])
            for n, (b, (s, e), _) in enumerate(problems):
                if e > s and paths[n, 0] >= 0:
                    aligned[b, s:e] = paths[n, : e - s]
            reveal = np.zeros_like(frame.slot)
            for b in range(len(batch)):
                pool = np.flatnonzero(frame.slot[b] & (aligned[b] >= 0))
                if len(pool):
                    pos = glancing_reveal(pred[b], aligned[b], _glance_ratio(glance), rng, pool, cap=len(pool) - 1)
                    reveal[b, pos] = True
            reveal_tok = np.where(aligned >= 0, aligned, 0)
        logits = M.decode_nat(cfg, P, enc, frame, reveal, reveal_tok)
        lp = nc.log_softmax(logits)
        B, T, V = lp.shape
        width = max(e - s for _, (s, e), _ in problems)
        idx = np.full((len(problems), width), -1, dtype=np.int64)
        for n, (b, (s, e), _) in enumerate(problems):
            idx[n, : e - s] = b * T + np.arange(s, e)
        rows = nc.take_rows(nc.reshape(lp, (B * T, V)), idx)
        in_lens = [max(e - s, 1) for _, (s, e), _ in problems]
        logz = ctc_batch(rows, [y for _, _, y in problems], in_lens)
        ok = np.isfinite(logz.data) & np.array([e > s or not y for _, (s, e), y in problems])
        metrics["skipped"] = int((~ok).sum())
        ntok = sum(max(len(y), 1) for (_, _, y), o in zip(problems, ok) if o)
        if ntok == 0:
            raise ContractError("every CTC target in the batch is infeasible")
        safe = nc.where(ok, logz, 0.0)
        loss = -nc.sum_(safe) * (1.0 / ntok)
        metrics["loss"] = float(loss.data)
        return loss, metrics

    if v in ("dag", "gtrans_dag"):
        counts = M.dag_vertex_counts(cfg, src)
        frame = M.target_frame(cfg, src, counts)
        tok, trans = M.dag_heads(cfg, P, enc, frame)
        targets = [_framed(t) if cfg.grouped else [BOS, *_flat(t), EOS] for t in batch.tgt]
        nv = frame.lengths
        for b, y in enumerate(targets):
            if len(y) > nv[b]:
                raise ContractError(f"example {b}: {len(y)} target tokens exceed {nv[b]} vertices")
        logz = dag_batch(tok, trans, targets, nv)
        ok = np.isfinite(logz.data)
        metrics["skipped"] = int((~ok).sum())
        ntok = sum(len(y) for y, o in zip(targets, ok) if o)
        loss = -nc.sum_(nc.where(ok, logz, 0.0)) * (1.0 / max(ntok, 1))
        metrics["loss"] = float(loss.data)
        return loss, metrics

    raise ConfigurationError(f"no objective for variant {v!r}")


def _framed(sents) -> list[int]:
    out = []
    for s in sents:
        out.extend([BOS, *s, EOS])
    return out


def _frame_targets(frame, tgt, grouped: bool) -> np.ndarray:
    out = np.zeros(frame.tokens.shape, dtype=np.int64)
    for b, sents in enumerate(tgt):
        if grouped:
            f = _framed(sents)
            out[b, : len(f)] = f
        else:
            f = _flat(sents)
            out[b, : len(f)] = f
    return out
