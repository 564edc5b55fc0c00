"""Synthetic document-translation corpora, segmentation, corpus files, distillation.

The synthetic task is a monotone word cipher.  A fraction ``rho`` of source
types is ambiguous: each has two target words, and which one is correct is
fixed for the whole document by a selector token that opens the first
sentence.  Models that cannot see the selector are at chance on those words.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

PAD, BOS, EOS, BLANK, UNK = 0, 1, 2, 3, 4
SPECIALS = ["<pad>", "<s>", "</s>", "<blank>", "<unk>"]


class DataError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class CorpusFormatError(DataError):
    pass


class Vocab:
    """Token/id bijection; ids 0-4 are always pad, bos, eos, blank, unk."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(SPECIALS)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, tok: str) -> int:
        if tok not in self.stoi:
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)
        return self.stoi[tok]

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, toks: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in toks]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    @classmethod
    def from_docs(cls, docs: Iterable["DocumentPair"]) -> "Vocab":
        toks = set()
        for d in docs:
            for s in d.src_sentences + d.tgt_sentences:
                toks.update(s.split())
        return cls(sorted(toks))


@dataclass
class DocumentPair:
    id: str
    src_sentences: list[str]
    tgt_sentences: list[str]
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.src_sentences) != len(self.tgt_sentences):
            raise DataError(
                f"document {self.id}: {len(self.src_sentences)} source vs "
                f"{len(self.tgt_sentences)} target sentences"
            )


@dataclass
class Segment:
    """A run of whole sentences from one document, tokenized."""

    doc_id: str
    sent_range: tuple[int, int]
    src: list[list[str]]
    tgt: list[list[str]]

    @property
    def n_sentences(self) -> int:
        return len(self.src)

    @property
    def src_len(self) -> int:
        return sum(len(s) for s in self.src)

    @property
    def tgt_len(self) -> int:
        return sum(len(s) for s in self.tgt)

    @property
    def src_spans(self) -> list[tuple[int, int]]:
        return _spans([len(s) for s in self.src])

    @property
    def tgt_spans(self) -> list[tuple[int, int]]:
        return _spans([len(s) for s in self.tgt])


def _spans(lengths):
    out, start = [], 0
    for n in lengths:
        out.append((start, start + n))
        start += n
    return out


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    vocab_size: int = 64
    n_sentences: int = 4
    min_len: int = 5
    max_len: int = 12
    rho: float = 0.5
    cohesion: str = "selector"
    seed: int = 1

    def validate(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigurationError(f"rho must lie in [0, 1], got {self.rho}")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ConfigurationError("sentence lengths must satisfy 1 <= min_len <= max_len")
        if self.n_sentences < 1:
            raise ConfigurationError("n_sentences must be >= 1")
        if self.vocab_size < 2:
            raise ConfigurationError("vocab_size must be >= 2")
        if self.rho > 0 and n_ambiguous(self) == 0:
            raise ConfigurationError(
                f"vocab_size={self.vocab_size} too small for rho={self.rho}: no ambiguous type"
            )
        if self.cohesion != "selector":
            raise ConfigurationError(f"unknown cohesion rule {self.cohesion!r}")


def n_ambiguous(cfg: SynthConfig) -> int:
    return int(round(cfg.rho * cfg.vocab_size))


def ambiguous_types(cfg: SynthConfig) -> frozenset[int]:
    rng = np.random.default_rng([cfg.seed, 0xA3])
    return frozenset(int(i) for i in rng.permutation(cfg.vocab_size)[: n_ambiguous(cfg)])


def selector_of(src_sentences: Sequence[str]) -> int:
    first = src_sentences[0].split()[0]
    if not first.startswith("sel"):
        raise DataError(f"document does not open with a selector token: {first!r}")
    return int(first[3:])


def translate_word(tok: str, selector: int, ambiguous: frozenset[int]) -> str:
    if tok.startswith("sel"):
        return "SEL" + tok[3:]
    i = int(tok[1:])
    if i in ambiguous:
        return f"T{i}" + "ab"[selector]
    return f"T{i}"


def alternative_word(tok: str, selector: int, ambiguous: frozenset[int]) -> str | None:
    """The wrong-selector translation of an ambiguous token, else None."""
    if tok.startswith("sel") or int(tok[1:]) not in ambiguous:
        return None
    return translate_word(tok, 1 - selector, ambiguous)


def oracle_translate(cfg: SynthConfig, src_sentences: Sequence[str], selector: int | None = None) -> list[str]:
    """The unique correct target for a document under the selector rule."""
    amb = ambiguous_types(cfg)
    sel = selector_of(src_sentences) if selector is None else selector
    return [" ".join(translate_word(t, sel, amb) for t in s.split()) for s in src_sentences]


def gen_document(cfg: SynthConfig, index: int) -> DocumentPair:
    rng = np.random.default_rng([cfg.seed, index])
    sel = int(rng.integers(2))
    sents = []
    for j in range(cfg.n_sentences):
        n = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        words = [f"w{int(w)}" for w in rng.integers(cfg.vocab_size, size=n)]
        if j == 0:
            words[0] = f"sel{sel}"
        sents.append(" ".join(words))
    return DocumentPair(f"doc{index:06d}", sents, oracle_translate(cfg, sents, sel))


def gen_corpus(cfg: SynthConfig, n_docs: int, offset: int = 0) -> list[DocumentPair]:
    """Deterministic corpus; document ``i`` depends only on ``(cfg, offset + i)``."""
    cfg.validate()
    return [gen_document(cfg, offset + i) for i in range(n_docs)]


def synth_vocab(cfg: SynthConfig) -> Vocab:
    """Every token the generator can emit, in a fixed order."""
    amb = ambiguous_types(cfg)
    toks = ["sel0", "sel1", "SEL0", "SEL1"]
    for i in range(cfg.vocab_size):
        toks.append(f"w{i}")
        toks.extend([f"T{i}a", f"T{i}b"] if i in amb else [f"T{i}"])
    return Vocab(toks)


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------


def segment_documents(pairs: Sequence[DocumentPair], max_len: int = 512) -> list[Segment]:
    """Greedily pack consecutive whole sentences into segments of <= max_len source tokens."""
    out = []
    for d in pairs:
        src = [s.split() for s in d.src_sentences]
        tgt = [s.split() for s in d.tgt_sentences]
        start, used = 0, 0
        for j, s in enumerate(src):
            if len(s) > max_len:
                raise DataError(f"document {d.id}: sentence {j} has {len(s)} tokens > {max_len}")
            if used + len(s) > max_len and j > start:
                out.append(Segment(d.id, (start, j), src[start:j], tgt[start:j]))
                start, used = j, 0
            used += len(s)
        if src:
            out.append(Segment(d.id, (start, len(src)), src[start:], tgt[start:]))
    return out


def assign_group_tags(seg: Segment) -> tuple[np.ndarray, np.ndarray]:
    """Token in sentence j gets tag j, on both sides."""
    return (
        np.repeat(np.arange(seg.n_sentences), [len(s) for s in seg.src]),
        np.repeat(np.arange(seg.n_sentences), [len(s) for s in seg.tgt]),
    )


def split_by_length(segments: Sequence[Segment], buckets: Sequence[int]) -> dict[int, list[Segment]]:
    """Assign each segment to the smallest bucket bound that holds its source length."""
    res: dict[int, list[Segment]] = {b: [] for b in buckets}
    for s in segments:
        for b in sorted(buckets):
            if s.src_len <= b:
                res[b].append(s)
                break
    return res


# ---------------------------------------------------------------------------
# corpus files: one JSON record per line {id, src, tgt, ...}
# ---------------------------------------------------------------------------


def dumps_doc(d: DocumentPair) -> str:
    rec = {"id": d.id, "src": d.src_sentences, "tgt": d.tgt_sentences}
    rec.update(d.extra)
    return json.dumps(rec, ensure_ascii=False)


def write_corpus(path, docs: Iterable[DocumentPair]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for d in docs:
            f.write(dumps_doc(d) + "\n")


def read_corpus(path) -> list[DocumentPair]:
    text = Path(path).read_bytes().decode("utf-8").replace("\r\n", "\n")
    docs = []
    for n, line in enumerate(text.split("\n"), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise CorpusFormatError(f"{path}:{n}: malformed record ({e.msg})") from None
        if not isinstance(rec, dict):
            raise CorpusFormatError(f"{path}:{n}: record is not an object")
        for key in ("id", "src", "tgt"):
            if key not in rec:
                raise CorpusFormatError(f"{path}:{n}: missing field '{key}'")
        for key in ("src", "tgt"):
            if not isinstance(rec[key], list) or not all(isinstance(s, str) for s in rec[key]):
                raise CorpusFormatError(f"{path}:{n}: field '{key}' must be a list of strings")
        extra = {k: v for k, v in rec.items() if k not in ("id", "src", "tgt")}
        try:
            docs.append(DocumentPair(str(rec["id"]), rec["src"], rec["tgt"], extra))
        except DataError as e:
            raise CorpusFormatError(f"{path}:{n}: {e}") from None
    return docs


# ---------------------------------------------------------------------------
# knowledge distillation
# ---------------------------------------------------------------------------


def distill_corpus(teacher, vocab: Vocab, docs: Sequence[DocumentPair], max_len: int = 512,
                   batch_size: int = 32) -> list[DocumentPair]:
    """Replace each target with the teacher's greedy translation.

    ``teacher`` is a ``(ModelConfig, params)`` pair for an ``at_teacher`` model.
    Truncated translations are kept and flagged with ``extra["truncated"]``.
    """
    from .decode import translate_batch

    cfg, params = teacher
    if cfg.variant != "at_teacher":
        raise ConfigurationError("distillation needs an at_teacher checkpoint")
    segs = segment_documents(docs, max_len)
    outs = []
    for i in range(0, len(segs), batch_size):
        outs.extend(translate_batch(cfg, params, vocab, segs[i:i + batch_size]))
    by_doc: dict[str, list] = {}
    for seg, tr in zip(segs, outs):
        by_doc.setdefault(seg.doc_id, []).append(tr)
    res = []
    for d in docs:
        sents, truncated = [], False
        for tr in by_doc[d.id]:
            sents.extend(" ".join(s) for s in tr.sentences)
            truncated |= tr.truncated
        extra = {"truncated": True} if truncated else {}
        if truncated:
            log.warning("teacher truncated document %s", d.id)
        res.append(DocumentPair(d.id, list(d.src_sentences), sents, extra))
    return res
