"""Fixed-seed training: Adam with inverse-sqrt schedule, glancing decay, best-dev checkpoint."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import data as D
from . import model as M
from . import numcore as nc
from .loss import Batch, composite_loss

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 3e-4
    warmup: int = 400
    steps: int = 4000
    batch_tokens: int = 512
    seed: int = 1
    w_len: float = 0.1
    glance_start: float = 0.5
    glance_end: float = 0.3
    eval_every: int = 500
    dev_docs: int = 100
    max_len: int = 512
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9


def lr_at(tc: TrainConfig, step: int) -> float:
    """Linear warmup to ``lr`` then decay with 1/sqrt(step)."""
    s = max(step, 1)
    return tc.lr * min(s / tc.warmup, math.sqrt(tc.warmup / s)) if tc.warmup else tc.lr / math.sqrt(s)


def glance_at(tc: TrainConfig, step: int) -> float:
    f = min(step / max(tc.steps, 1), 1.0)
    return tc.glance_start + (tc.glance_end - tc.glance_start) * f


class Adam:
    def __init__(self, params: dict[str, np.ndarray], tc: TrainConfig):
        self.tc = tc
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
        tc = self.tc
        self.t += 1
        c1 = 1 - tc.beta1 ** self.t
        c2 = 1 - tc.beta2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= tc.beta1
            m += (1 - tc.beta1) * g
            v *= tc.beta2
            v += (1 - tc.beta2) * g * g
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + tc.adam_eps)


def make_batches(cfg: M.ModelConfig, vocab: D.Vocab, segs: Sequence[D.Segment], batch_tokens: int,
                 rng: np.random.Generator) -> list[Batch]:
    """Shuffle, then pack segments until the source token budget is reached."""
    order = rng.permutation(len(segs))
    out, cur, used = [], [], 0
    for i in order:
        s = segs[i]
        cur.append(s)
        used += s.src_len
        if used >= batch_tokens:
            out.append(_to_batch(vocab, cur))
            cur, used = [], 0
    if cur:
        out.append(_to_batch(vocab, cur))
    return out


def _to_batch(vocab, segs) -> Batch:
    return Batch([[vocab.encode(x) for x in s.src] for s in segs], [[vocab.encode(y) for y in s.tgt] for s in segs])


def dev_score(cfg, params, vocab, dev: Sequence[D.DocumentPair], max_len: int = 512) -> float:
    from .eval import score_docs, translate_docs

    hyp = translate_docs(cfg, params, vocab, dev, max_len)
    return score_docs(cfg, hyp, dev)["d_bleu"]


def train(cfg: M.ModelConfig, tc: TrainConfig, vocab: D.Vocab, train_docs: Sequence[D.DocumentPair],
          dev_docs: Sequence[D.DocumentPair] = (), ckpt_path=None, log_file=None, params=None):
    """Returns (best params, history).  History rows are dicts {step, loss, dev_dbleu}."""
    cfg.vocab_size = len(vocab)
    cfg.validate()
    params = M.init_params(cfg) if params is None else {k: v.copy() for k, v in params.items()}
    opt = Adam(params, tc)
    rng = np.random.default_rng([tc.seed, 7])
    segs = D.segment_documents(train_docs, tc.max_len)
    dev = list(dev_docs)[: tc.dev_docs]
    best, best_params, history = -1.0, {k: v.copy() for k, v in params.items()}, []
    fh = open(log_file, "w") if log_file else None
    batches: list[Batch] = []
    bi, epoch, run_loss, n_loss = 0, 0, 0.0, 0
    t0 = time.perf_counter()

    def emit(row):
        history.append(row)
        line = " ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items())
        log.info(line)
        if fh:
            fh.write(line + "\n")
            fh.flush()

    try:
        for step in range(1, tc.steps + 1):
            if bi >= len(batches):
                batches, bi, epoch = make_batches(cfg, vocab, segs, tc.batch_tokens, rng), 0, epoch + 1
            batch = batches[bi]
            bi += 1
            P = M.as_tensors(params, requires_grad=True)
            loss, _ = composite_loss(cfg, P, batch, rng=rng, glance=glance_at(tc, step), w_len=tc.w_len)
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite loss {float(loss.data)} at step {step} (epoch {epoch}, batch {bi - 1})")
            nc.backward(loss)
            grads = {k: t.grad for k, t in P.items() if t.grad is not None}
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if not math.isfinite(norm):
                raise NumericError(f"non-finite gradient at step {step} (epoch {epoch}, batch {bi - 1})")
            if tc.clip_norm and norm > tc.clip_norm:
                grads = {k: g * (tc.clip_norm / norm) for k, g in grads.items()}
            opt.step(params, grads, lr_at(tc, step))
            run_loss += float(loss.data)
            n_loss += 1
            if step % tc.eval_every == 0 or step == tc.steps:
                row = {"step": step, "loss": run_loss / n_loss}
                run_loss, n_loss = 0.0, 0
                if dev:
                    score = dev_score(cfg, params, vocab, dev, tc.max_len)
                    row["dev_dbleu"] = score
                    if score > best:
                        best, best_params = score, {k: v.copy() for k, v in params.items()}
                        if ckpt_path:
                            M.save_checkpoint(ckpt_path, cfg, best_params, vocab)
                else:
                    best_params = {k: v.copy() for k, v in params.items()}
                row["elapsed"] = round(time.perf_counter() - t0, 1)
                emit(row)
        if ckpt_path and not dev:
            M.save_checkpoint(ckpt_path, cfg, best_params, vocab)
    finally:
        if fh:
            fh.close()
    return best_params, history
