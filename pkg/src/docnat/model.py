"""Encoder/decoder stacks for the teacher and every NAT variant.

Parameters live in a flat ``dict[str, np.ndarray]``; forward functions take the
same dict wrapped as ``numcore.Tensor`` values so one code path serves both
training (with gradients) and inference (under ``no_grad``).
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .attmask import attention, build_causal_mask, build_global_mask, build_group_mask
from .data import BLANK, BOS, EOS, PAD, UNK, Vocab

VARIANTS = (
    "at_teacher",
    "nat_vanilla",
    "glat",
    "glat_ctc",
    "dag",
    "gtrans_glat",
    "gtrans_glat_ctc",
    "gtrans_dag",
)
GROUPED = {"at_teacher", "gtrans_glat", "gtrans_glat_ctc", "gtrans_dag"}
CTC_VARIANTS = {"glat_ctc", "gtrans_glat_ctc"}
DAG_VARIANTS = {"dag", "gtrans_dag"}
LENGTH_VARIANTS = {"nat_vanilla", "glat", "gtrans_glat"}
GLANCING = {"glat", "glat_ctc", "gtrans_glat", "gtrans_glat_ctc"}
MAX_POSITIONS = 4096


class ConfigurationError(ValueError):
    pass


class SegmentationError(ValueError):
    pass


class ContractError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    variant: str = "gtrans_glat_ctc"
    layers: int = 2
    heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    global_layers: int = 1
    vocab_size: int = 0
    max_sentence_len: int = 64
    max_target_len: int = 640
    ctc_upsample: float = 2.0
    dag_lambda: float = 4.0
    max_vertices: int = 4096
    seed: int = 1

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        if self.d_model % self.heads:
            raise ConfigurationError("d_model must be divisible by heads")
        if self.ctc_upsample < 1:
            raise ConfigurationError("ctc_upsample must be >= 1")
        if self.dag_lambda < 2:
            raise ConfigurationError("dag_lambda must be >= 2")
        if not 0 <= self.global_layers <= self.layers:
            raise ConfigurationError("global_layers must lie in [0, layers]")
        if self.vocab_size <= UNK:
            raise ConfigurationError("vocab_size must cover the reserved ids")
        return self

    @property
    def grouped(self) -> bool:
        return self.variant in GROUPED

    @property
    def length_classes(self) -> int:
        return self.max_sentence_len if self.grouped else self.max_target_len

    def size_signature(self) -> tuple:
        return (self.layers, self.heads, self.d_model, self.d_ff, self.vocab_size)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _uniform(rng, fan_in, fan_out, shape=None):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape or (fan_in, fan_out))


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    d, f, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    p: dict[str, np.ndarray] = {}
    p["emb"] = rng.uniform(-1, 1, size=(V, d)) * math.sqrt(3.0 / d)

    def ln(prefix):
        p[prefix + ".g"] = np.ones(d)
        p[prefix + ".b"] = np.zeros(d)

    def attn(prefix):
        for w in ("wq", "wk", "wv", "wo"):
            p[f"{prefix}.{w}"] = _uniform(rng, d, d)

    def ffn(prefix):
        p[prefix + ".w1"] = _uniform(rng, d, f)
        p[prefix + ".b1"] = np.zeros(f)
        p[prefix + ".w2"] = _uniform(rng, f, d)
        p[prefix + ".b2"] = np.zeros(d)

    for l in range(cfg.layers):
        ln(f"enc.{l}.ln1")
        attn(f"enc.{l}.self")
        ln(f"enc.{l}.ln2")
        ffn(f"enc.{l}.ff")
    ln("enc.ln")
    for l in range(cfg.layers):
        ln(f"dec.{l}.ln1")
        attn(f"dec.{l}.self")
        ln(f"dec.{l}.ln2")
        attn(f"dec.{l}.cross")
        ln(f"dec.{l}.ln3")
        ffn(f"dec.{l}.ff")
    ln("dec.ln")
    p["out.w"] = _uniform(rng, d, V)
    p["out.b"] = np.zeros(V)
    if cfg.variant in LENGTH_VARIANTS:
        p["len.w"] = _uniform(rng, d, cfg.length_classes)
        p["len.b"] = np.zeros(cfg.length_classes)
    if cfg.variant in DAG_VARIANTS:
        p["dag.wq"] = _uniform(rng, d, d)
        p["dag.wk"] = _uniform(rng, d, d)
    return p


def as_tensors(params: dict[str, np.ndarray], requires_grad: bool = False) -> dict[str, nc.Tensor]:
    return {k: nc.Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


def _pe_table(d: int, n: int = MAX_POSITIONS) -> np.ndarray:
    pos = np.arange(n)[:, None]
    div = np.exp(np.arange(0, d, 2) * (-math.log(10000.0) / d))
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div)
    return pe


_PE_CACHE: dict[int, np.ndarray] = {}


def positional(d: int, pos: np.ndarray) -> np.ndarray:
    if d not in _PE_CACHE:
        _PE_CACHE[d] = _pe_table(d)
    if pos.size and pos.max() >= MAX_POSITIONS:
        raise SegmentationError(f"position {pos.max()} exceeds {MAX_POSITIONS}; segment the input")
    return _PE_CACHE[d][pos]


# ---------------------------------------------------------------------------
# batch framing
# ---------------------------------------------------------------------------


@dataclass
class SourceBatch:
    ids: np.ndarray  # [B, S]
    tags: np.ndarray  # [B, S], -1 on padding
    pos: np.ndarray  # [B, S]
    spans: list  # per example: (start, end) per sentence, markers included
    content: list  # per example: array of content positions per sentence
    lengths: np.ndarray  # [B] non-pad positions

    @property
    def shape(self):
        return self.ids.shape


def source_batch(cfg: ModelConfig, src: Sequence[Sequence[Sequence[int]]]) -> SourceBatch:
    """``src[b][j]`` is the token ids of sentence j of example b (no markers)."""
    rows, tag_rows, pos_rows, spans, content = [], [], [], [], []
    for sents in src:
        ids, tags, pos, sp, ct = [], [], [], [], []
        for j, s in enumerate(sents):
            start = len(ids)
            ids.extend([BOS, *s, EOS])
            n = len(s) + 2
            tags.extend([j if cfg.grouped else 0] * n)
            pos.extend(range(n) if cfg.grouped else range(start, start + n))
            sp.append((start, start + n))
            ct.append(np.arange(start + 1, start + n - 1))
        rows.append(ids)
        tag_rows.append(tags)
        pos_rows.append(pos)
        spans.append(sp if cfg.grouped else [(0, len(ids))])
        content.append(ct)
    B = len(rows)
    S = max(len(r) for r in rows)
    ids = np.full((B, S), PAD, dtype=np.int64)
    tags = np.full((B, S), -1, dtype=np.int64)
    pos = np.zeros((B, S), dtype=np.int64)
    for b in range(B):
        n = len(rows[b])
        ids[b, :n], tags[b, :n], pos[b, :n] = rows[b], tag_rows[b], pos_rows[b]
    return SourceBatch(ids, tags, pos, spans, content, np.array([len(r) for r in rows]))


def uniform_copy_index(S: int, T: int) -> np.ndarray:
    """Source index for each of T decoder slots: round(t*(S-1)/(T-1)), half up."""
    if T < 1:
        return np.zeros(0, dtype=np.int64)
    if T == 1:
        return np.zeros(1, dtype=np.int64)
    return np.floor(np.arange(T) * (S - 1) / (T - 1) + 0.5).astype(np.int64)


@dataclass
class TargetFrame:
    tokens: np.ndarray  # [B, T] frame tokens (unk in content slots)
    tags: np.ndarray  # [B, T], -1 on padding
    pos: np.ndarray  # [B, T]
    copy: np.ndarray  # [B, T] flat index into encoder rows (b*S + s), -1 for none
    slot: np.ndarray  # [B, T] bool: content slot (not a marker, not padding)
    spans: list  # per example: (start, end) of content slots per sentence
    blocks: list  # per example: (start, end) of each sentence's frame incl. markers
    lengths: np.ndarray  # [B]

    @property
    def valid(self) -> np.ndarray:
        return self.tags >= 0


def sentence_frame(counts: Sequence[int]) -> tuple[list[int], list[int]]:
    """Frame for one segment: concat over j of [bos, counts[j] x unk, eos] with tags."""
    toks, tags = [], []
    for j, n in enumerate(counts):
        if n < 0:
            raise ContractError("sentence slot count must be >= 0")
        toks.extend([BOS] + [UNK] * int(n) + [EOS])
        tags.extend([j] * (int(n) + 2))
    return toks, tags


def target_frame(cfg: ModelConfig, src: SourceBatch, counts: Sequence) -> TargetFrame:
    """Decoder frame.  Grouped variants: ``counts[b]`` lists slots per sentence and the
    frame carries bos/eos markers.  Flat variants: ``counts[b]`` is the total slot count."""
    B, S = src.shape
    rows = []
    for b in range(B):
        if cfg.grouped:
            toks, tags = sentence_frame(counts[b])
            pos, copy, slot, spans, blocks = [], [], [], [], []
            for j, n in enumerate(counts[b]):
                n = int(n)
                start = len(pos)
                blocks.append((start, start + n + 2))
                spans.append((start + 1, start + 1 + n))
                pos.extend(range(n + 2))
                ct = src.content[b][j]
                idx = ct[uniform_copy_index(len(ct), n)] if n else np.zeros(0, dtype=np.int64)
                copy.extend([-1, *(b * S + idx).tolist(), -1])
                slot.extend([False] + [True] * n + [False])
        else:
            T = int(counts[b])
            toks, tags = [UNK] * T, [0] * T
            pos = list(range(T))
            copy = (b * S + uniform_copy_index(int(src.lengths[b]), T)).tolist()
            slot = [True] * T
            spans = [(0, T)]
            blocks = [(0, T)]
        rows.append((toks, tags, pos, copy, slot, spans, blocks))
    T = max(1, max(len(r[0]) for r in rows))
    tokens = np.full((B, T), PAD, dtype=np.int64)
    tags = np.full((B, T), -1, dtype=np.int64)
    pos = np.zeros((B, T), dtype=np.int64)
    copy = np.full((B, T), -1, dtype=np.int64)
    slot = np.zeros((B, T), dtype=bool)
    for b, (tk, tg, ps, cp, sl, _, _) in enumerate(rows):
        n = len(tk)
        tokens[b, :n], tags[b, :n], pos[b, :n], copy[b, :n], slot[b, :n] = tk, tg, ps, cp, sl
    return TargetFrame(
        tokens, tags, pos, copy, slot, [r[5] for r in rows], [r[6] for r in rows],
        np.array([len(r[0]) for r in rows]),
    )


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def _embed(cfg, P, ids: np.ndarray, pos: np.ndarray) -> nc.Tensor:
    e = nc.take_rows(P["emb"], ids) * math.sqrt(cfg.d_model)
    return e + positional(cfg.d_model, pos)


def _ln(P, prefix, x):
    return nc.layer_norm(x, P[prefix + ".g"], P[prefix + ".b"])


def _mha(cfg, P, prefix, xq, xkv, mask):
    q = nc.matmul(xq, P[prefix + ".wq"])
    k = nc.matmul(xkv, P[prefix + ".wk"])
    v = nc.matmul(xkv, P[prefix + ".wv"])
    return nc.matmul(attention(q, k, v, mask, cfg.heads), P[prefix + ".wo"])


def _ffn(P, prefix, x):
    h = nc.relu(nc.matmul(x, P[prefix + ".w1"]) + P[prefix + ".b1"])
    return nc.matmul(h, P[prefix + ".w2"]) + P[prefix + ".b2"]


def is_group_layer(cfg: ModelConfig, l: int) -> bool:
    return cfg.grouped and l < cfg.layers - cfg.global_layers


@dataclass
class EncoderStates:
    h: nc.Tensor  # [B, S, d]
    src: SourceBatch


def encode(cfg: ModelConfig, P, src: SourceBatch) -> EncoderStates:
    """Group-masked lower layers, globally-masked top ``global_layers``."""
    if src.lengths.max() > MAX_POSITIONS:
        raise SegmentationError("source longer than the position table; segment first")
    x = _embed(cfg, P, src.ids, src.pos)
    group = build_group_mask(src.tags, src.tags)
    glob = build_global_mask(src.tags, src.tags)
    for l in range(cfg.layers):
        m = group if is_group_layer(cfg, l) else glob
        h = _ln(P, f"enc.{l}.ln1", x)
        x = x + _mha(cfg, P, f"enc.{l}.self", h, h, m)
        x = x + _ffn(P, f"enc.{l}.ff", _ln(P, f"enc.{l}.ln2", x))
    return EncoderStates(_ln(P, "enc.ln", x), src)


def decoder_stack(cfg: ModelConfig, P, enc: EncoderStates, x: nc.Tensor, tgt_tags: np.ndarray,
                  causal: bool = False) -> nc.Tensor:
    self_group = build_group_mask(tgt_tags, tgt_tags)
    self_glob = build_global_mask(tgt_tags, tgt_tags)
    if causal:
        c = build_causal_mask(tgt_tags.shape[-1])
        self_group, self_glob = self_group & c, self_glob & c
    cross_group = build_group_mask(tgt_tags, enc.src.tags)
    cross_glob = build_global_mask(tgt_tags, enc.src.tags)
    for l in range(cfg.layers):
        g = is_group_layer(cfg, l)
        h = _ln(P, f"dec.{l}.ln1", x)
        x = x + _mha(cfg, P, f"dec.{l}.self", h, h, self_group if g else self_glob)
        x = x + _mha(cfg, P, f"dec.{l}.cross", _ln(P, f"dec.{l}.ln2", x), enc.h, cross_group if g else cross_glob)
        x = x + _ffn(P, f"dec.{l}.ff", _ln(P, f"dec.{l}.ln3", x))
    return _ln(P, "dec.ln", x)


def output_logits(P, h: nc.Tensor) -> nc.Tensor:
    return nc.matmul(h, P["out.w"]) + P["out.b"]


# ---------------------------------------------------------------------------
# decoder inputs
# ---------------------------------------------------------------------------


def init_uniform_copy(enc_h: np.ndarray, T: int) -> np.ndarray:
    """Decoder inputs for one example: encoder rows picked by the linear index map."""
    enc_h = np.asarray(enc_h)
    return enc_h[uniform_copy_index(enc_h.shape[0], T)]


def init_sentence_frame(K: int, lengths: Sequence[int], vocab: Vocab | None = None):
    """Token frame ``[bos, unk*T_j, eos]`` per sentence and its group tags."""
    if K < 1 or len(lengths) != K:
        raise ContractError("need K >= 1 lengths")
    toks, tags = sentence_frame(lengths)
    return np.array(toks), np.array(tags)


def decoder_inputs(cfg: ModelConfig, P, enc: EncoderStates, frame: TargetFrame,
                   reveal: np.ndarray | None = None, reveal_tokens: np.ndarray | None = None) -> nc.Tensor:
    """Frame-token embedding + copied encoder features + positions.

    Revealed (glanced) positions take the embedding of ``reveal_tokens`` instead.
    """
    B, S, d = enc.h.shape
    flat = nc.reshape(enc.h, (B * S, d))
    copied = nc.take_rows(flat, frame.copy)
    x = nc.take_rows(P["emb"], frame.tokens) * math.sqrt(cfg.d_model) + copied
    if reveal is not None and reveal.any():
        shown = nc.take_rows(P["emb"], reveal_tokens) * math.sqrt(cfg.d_model)
        x = nc.where(reveal[..., None], shown, x)
    return x + positional(cfg.d_model, frame.pos)


def decode_nat(cfg: ModelConfig, P, enc: EncoderStates, frame: TargetFrame, reveal=None,
               reveal_tokens=None, return_hidden: bool = False):
    """Position-wise vocabulary logits, no causal mask."""
    if cfg.variant == "at_teacher":
        raise ConfigurationError("decode_nat called on an autoregressive model")
    h = decoder_stack(cfg, P, enc, decoder_inputs(cfg, P, enc, frame, reveal, reveal_tokens), frame.tags)
    logits = output_logits(P, h)
    return (logits, h) if return_hidden else logits


# ---------------------------------------------------------------------------
# teacher
# ---------------------------------------------------------------------------


def teacher_positions(tokens: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Tags and sentence-local positions for a teacher prefix (new sentence after eos)."""
    tags, pos = np.zeros(len(tokens), dtype=np.int64), np.zeros(len(tokens), dtype=np.int64)
    tag, p = 0, 0
    for i, t in enumerate(tokens):
        tags[i], pos[i] = tag, p
        if t == EOS:
            tag, p = tag + 1, 0
        else:
            p += 1
    return tags, pos


def teacher_inputs(prefixes: Sequence[Sequence[int]], n_sentences: Sequence[int]):
    B = len(prefixes)
    T = max(len(p) for p in prefixes)
    ids = np.full((B, T), PAD, dtype=np.int64)
    tags = np.full((B, T), -1, dtype=np.int64)
    pos = np.zeros((B, T), dtype=np.int64)
    for b, p in enumerate(prefixes):
        tg, ps = teacher_positions(p)
        n = len(p)
        ids[b, :n], pos[b, :n] = p, ps
        tags[b, :n] = np.minimum(tg, max(n_sentences[b] - 1, 0))
    return ids, tags, pos


def decode_teacher(cfg: ModelConfig, P, enc: EncoderStates, prefixes, n_sentences) -> nc.Tensor:
    """Causal logits over full prefixes: logits[b, t] scores the token after position t."""
    if cfg.variant != "at_teacher":
        raise ConfigurationError("teacher decoding needs variant at_teacher")
    ids, tags, pos = teacher_inputs(prefixes, n_sentences)
    x = _embed(cfg, P, ids, pos)
    return output_logits(P, decoder_stack(cfg, P, enc, x, tags, causal=True))


def decode_at_step(cfg: ModelConfig, P, enc: EncoderStates, prefix: Sequence[int], n_sentences: int) -> np.ndarray:
    """Next-token logits for a single example given its prefix (bos first)."""
    logits = decode_teacher(cfg, P, enc, [list(prefix)], [n_sentences])
    return logits.data[0, len(prefix) - 1]


@dataclass
class TeacherState:
    """Per-layer self-attention keys/values for incremental decoding."""

    keys: list  # per layer [B, t, d]
    values: list
    tags: np.ndarray  # [B, t]
    cur_tag: np.ndarray  # [B] tag of the next position
    cur_pos: np.ndarray  # [B] sentence-local position of the next position
    n_sentences: np.ndarray  # [B]


def teacher_start(cfg: ModelConfig, enc: EncoderStates, n_sentences: Sequence[int]) -> TeacherState:
    B, d = enc.h.shape[0], cfg.d_model
    empty = [np.zeros((B, 0, d)) for _ in range(cfg.layers)]
    return TeacherState(empty, [e.copy() for e in empty], np.zeros((B, 0), dtype=np.int64),
                        np.zeros(B, dtype=np.int64), np.zeros(B, dtype=np.int64), np.asarray(n_sentences))


def teacher_step(cfg: ModelConfig, P, enc: EncoderStates, st: TeacherState, tokens: np.ndarray) -> np.ndarray:
    """Feed one token per example, return next-token logits [B, V].  Matches
    ``decode_teacher`` on the full prefix; the state is updated in place."""
    tokens = np.asarray(tokens)
    tag = np.minimum(st.cur_tag, np.maximum(st.n_sentences - 1, 0))
    x = _embed(cfg, P, tokens[:, None], st.cur_pos[:, None])
    st.tags = np.concatenate([st.tags, tag[:, None]], axis=1)
    q_tags = tag[:, None]
    self_group = build_group_mask(q_tags, st.tags)
    self_glob = build_global_mask(q_tags, st.tags)
    cross_group = build_group_mask(q_tags, enc.src.tags)
    cross_glob = build_global_mask(q_tags, enc.src.tags)
    for l in range(cfg.layers):
        g = is_group_layer(cfg, l)
        pre = f"dec.{l}.self"
        h = _ln(P, f"dec.{l}.ln1", x)
        st.keys[l] = np.concatenate([st.keys[l], nc.matmul(h, P[pre + ".wk"]).data], axis=1)
        st.values[l] = np.concatenate([st.values[l], nc.matmul(h, P[pre + ".wv"]).data], axis=1)
        a = attention(nc.matmul(h, P[pre + ".wq"]), st.keys[l], st.values[l], self_group if g else self_glob, cfg.heads)
        x = x + nc.matmul(a, P[pre + ".wo"])
        x = x + _mha(cfg, P, f"dec.{l}.cross", _ln(P, f"dec.{l}.ln2", x), enc.h, cross_group if g else cross_glob)
        x = x + _ffn(P, f"dec.{l}.ff", _ln(P, f"dec.{l}.ln3", x))
    logits = output_logits(P, _ln(P, "dec.ln", x)).data[:, 0]
    eos = tokens == EOS
    st.cur_tag = st.cur_tag + eos
    st.cur_pos = np.where(eos, 0, st.cur_pos + 1)
    return logits


# ---------------------------------------------------------------------------
# length prediction
# ---------------------------------------------------------------------------


@dataclass
class LengthPrediction:
    per_sentence: np.ndarray  # [K, C] distribution over lengths 1..C
    chosen: np.ndarray  # [K]
    total: int


def length_logits(cfg: ModelConfig, P, enc: EncoderStates) -> tuple[nc.Tensor, np.ndarray]:
    """Mean-pool each sentence span, then a linear classifier.  Returns logits
    [B, K, C] (class c means length c+1) and the sentence validity mask [B, K]."""
    B, S, d = enc.h.shape
    K = max(len(s) for s in enc.src.spans)
    pool = np.zeros((B, K, S))
    valid = np.zeros((B, K), dtype=bool)
    for b, spans in enumerate(enc.src.spans):
        for j, (s, e) in enumerate(spans):
            if e <= s:
                raise ContractError(f"empty source span {j} in example {b}")
            pool[b, j, s:e] = 1.0 / (e - s)
            valid[b, j] = True
    pooled = nc.matmul(pool, enc.h)
    return nc.matmul(pooled, P["len.w"]) + P["len.b"], valid


def predict_lengths(cfg: ModelConfig, P, enc: EncoderStates) -> list[LengthPrediction]:
    logits, valid = length_logits(cfg, P, enc)
    lp = logits.data - nc._lse(logits.data, keepdims=True)
    probs = np.exp(lp)
    out = []
    for b in range(valid.shape[0]):
        k = int(valid[b].sum())
        dist = probs[b, :k]
        chosen = np.argmax(dist, axis=-1) + 1
        out.append(LengthPrediction(dist, chosen, int(chosen.sum())))
    return out


# ---------------------------------------------------------------------------
# DAG heads
# ---------------------------------------------------------------------------


def dag_vertex_counts(cfg: ModelConfig, src: SourceBatch) -> list:
    """Per example: vertices per sentence block (grouped) or total vertices (flat)."""
    out = []
    for b in range(src.ids.shape[0]):
        if cfg.grouped:
            out.append([int(math.ceil(cfg.dag_lambda * (len(c) + 2))) - 2 for c in src.content[b]])
            total = sum(out[-1]) + 2 * len(out[-1])
        else:
            out.append(int(math.ceil(cfg.dag_lambda * src.lengths[b])))
            total = out[-1]
        if total > cfg.max_vertices:
            raise ConfigurationError(f"example {b} needs {total} vertices > max_vertices={cfg.max_vertices}")
    return out


def dag_masks(cfg: ModelConfig, frame: TargetFrame) -> tuple[np.ndarray, np.ndarray]:
    """Allowed transitions [B, M, M] and allowed emissions [B, M, V]."""
    from .loss import sentence_transition_mask

    B, M = frame.tokens.shape
    V = cfg.vocab_size
    trans = np.zeros((B, M, M), dtype=bool)
    emit = np.ones((B, M, V), dtype=bool)
    for b in range(B):
        n = int(frame.lengths[b])
        if cfg.grouped:
            bos_v = [s for s, _ in frame.blocks[b]]
            eos_v = [e - 1 for _, e in frame.blocks[b]]
            trans[b, :n, :n] = sentence_transition_mask(frame.tags[b, :n], bos_v, eos_v)
            emit[b, :n] = token_emission_mask(V, n, bos_v, eos_v)
        else:
            trans[b, :n, :n] = np.triu(np.ones((n, n), dtype=bool), 1)
    return trans, emit


def token_emission_mask(V: int, M: int, bos_v, eos_v) -> np.ndarray:
    """Marker vertices emit only their marker; content vertices never emit specials."""
    m = np.ones((M, V), dtype=bool)
    m[:, [PAD, BOS, EOS, BLANK]] = False
    for v in bos_v:
        m[v] = False
        m[v, BOS] = True
    for v in eos_v:
        m[v] = False
        m[v, EOS] = True
    return m


def dag_heads(cfg: ModelConfig, P, enc: EncoderStates, frame: TargetFrame):
    """Token log-probs [B, M, V] and transition log-probs [B, M, M] (both normalized,
    transitions restricted to j > i and, for gtrans_dag, to the sentence structure)."""
    if cfg.variant not in DAG_VARIANTS:
        raise ConfigurationError("dag_heads needs a DAG variant")
    logits, h = decode_nat(cfg, P, enc, frame, return_hidden=True)
    trans_mask, emit_mask = dag_masks(cfg, frame)
    q = nc.matmul(h, P["dag.wq"])
    k = nc.matmul(h, P["dag.wk"])
    tl = nc.matmul(q, nc.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(cfg.d_model))
    return nc.log_softmax_masked(logits, emit_mask), nc.log_softmax_masked(tl, trans_mask)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_MAGIC = "DOCNAT-CHECKPOINT 1"


def save_checkpoint(path, cfg: ModelConfig, params: dict[str, np.ndarray], vocab: Vocab) -> None:
    """Text header (config, array manifest, vocab) then little-endian float64 payloads."""
    lines = [_MAGIC, "[config]"]
    lines += [f"{k}={v}" for k, v in dataclasses.asdict(cfg).items()]
    lines.append("[arrays]")
    offset, blobs = 0, []
    for name in sorted(params):
        a = np.ascontiguousarray(params[name], dtype="<f8")
        lines.append(f"{name} {','.join(map(str, a.shape)) or '-'} {offset}")
        blobs.append(a.tobytes())
        offset += a.nbytes
    lines.append("[vocab]")
    lines += vocab.itos
    lines.append("[end]")
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("utf-8"))
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray], Vocab]:
    raw = Path(path).read_bytes()
    if b"\n[end]\n" not in raw:
        raise CheckpointError(f"{path}: truncated or not a checkpoint")
    end = raw.index(b"\n[end]\n") + len(b"\n[end]\n")
    header = raw[:end].decode("utf-8").split("\n")
    if header[0] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    section, conf, manifest, toks = None, {}, [], []
    for line in header[1:]:
        if line in ("[config]", "[arrays]", "[vocab]", "[end]"):
            section = line
        elif section == "[config]" and line:
            k, v = line.split("=", 1)
            conf[k] = v
        elif section == "[arrays]" and line:
            name, shape, off = line.split(" ")
            manifest.append((name, () if shape == "-" else tuple(int(s) for s in shape.split(",")), int(off)))
        elif section == "[vocab]":
            toks.append(line)
    fields = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
    kwargs = {}
    for k, v in conf.items():
        if k not in fields:
            raise CheckpointError(f"{path}: unknown config key {k!r}")
        t = fields[k]
        kwargs[k] = int(v) if t in (int, "int") else float(v) if t in (float, "float") else v
    cfg = ModelConfig(**kwargs)
    payload = memoryview(raw)[end:]
    params = {}
    for name, shape, off in manifest:
        n = int(np.prod(shape)) if shape else 1
        if off + 8 * n > len(payload):
            raise CheckpointError(f"{path}: payload for {name} is truncated")
        params[name] = np.frombuffer(payload[off:off + 8 * n], dtype="<f8").reshape(shape).astype(np.float64)
    vocab = Vocab()
    for t in toks[len(vocab.itos):]:
        vocab.add(t)
    return cfg, params, vocab
