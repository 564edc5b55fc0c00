"""Group / global / causal attention masks and masked multi-head attention.

Tags are per-position sentence indices.  A tag of -1 marks padding; padded keys
are never attendable and padded queries get an all-false row.
"""
from __future__ import annotations

import math

import numpy as np

from . import numcore as nc


class ConfigurationError(ValueError):
    pass


def check_tags(tags) -> None:
    """Raise if ``tags`` (ignoring trailing -1 padding) is not a valid group tagging."""
    t = np.asarray(tags)
    t = t[t >= 0]
    if t.size == 0:
        return
    d = np.diff(t)
    if t[0] != 0 or (d < 0).any() or (d > 1).any():
        raise ValueError(f"invalid group tags: {t.tolist()}")


def tags_from_lengths(lengths) -> np.ndarray:
    """Sentence j of length n_j contributes n_j copies of tag j."""
    return np.repeat(np.arange(len(lengths)), lengths)


def build_group_mask(q_tags, k_tags) -> np.ndarray:
    """allowed[..., i, j] = q_tags[i] == k_tags[j] (both non-pad)."""
    q = np.asarray(q_tags)[..., :, None]
    k = np.asarray(k_tags)[..., None, :]
    return (q == k) & (k >= 0) & (q >= 0)


def build_global_mask(q_tags, k_tags) -> np.ndarray:
    """Every non-pad query may see every non-pad key."""
    q = np.asarray(q_tags)[..., :, None]
    k = np.asarray(k_tags)[..., None, :]
    return (k >= 0) & (q >= 0)


def build_causal_mask(n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("causal mask needs n >= 1")
    return np.tril(np.ones((n, n), dtype=bool))


def attention(q, k, v, mask: np.ndarray, heads: int, return_weights: bool = False):
    """Scaled dot-product attention split over ``heads``.

    ``q``: [..., Tq, d], ``k``/``v``: [..., Tk, d]; ``mask``: [..., Tq, Tk] boolean.
    Disallowed positions get exactly zero weight.
    """
    q, k, v = nc.as_tensor(q), nc.as_tensor(k), nc.as_tensor(v)
    d = q.shape[-1]
    if d % heads:
        raise ConfigurationError(f"model dimension {d} not divisible by {heads} heads")
    dh = d // heads
    lead = q.shape[:-2]
    tq, tk = q.shape[-2], k.shape[-2]
    nlead = len(lead)
    perm = tuple(range(nlead)) + (nlead + 1, nlead, nlead + 2)

    def split(x, t):
        return nc.transpose(nc.reshape(x, lead + (t, heads, dh)), perm)

    qh, kh, vh = split(q * (1.0 / math.sqrt(dh)), tq), split(k, tk), split(v, tk)
    kt = nc.transpose(kh, tuple(range(nlead + 1)) + (nlead + 2, nlead + 1))
    scores = nc.matmul(qh, kt)
    w = nc.softmax_masked(scores, np.expand_dims(np.asarray(mask, dtype=bool), -3))
    out = nc.matmul(w, vh)
    out = nc.reshape(nc.transpose(out, perm), lead + (tq, d))
    if return_weights:
        return out, w
    return out
