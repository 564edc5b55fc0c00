"""Acceptance criteria 1-10.  Each test prints one ``criterion N: PASS/FAIL`` line.

The end-to-end criteria (7-10) share one trained model zoo.  It is built once per
session and cached under ``tests/.cache/acceptance`` together with its measured
build time; delete that directory (or set ``DOCNAT_FRESH=1``) for a fresh run.
"""
import itertools
import json
import math
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

sys.path.insert(0, str(Path(__file__).parent))
import gradsuite  # noqa: E402

from docnat import data as D  # noqa: E402
from docnat import eval as E  # noqa: E402
from docnat import loss as L  # noqa: E402
from docnat import model as M  # noqa: E402
from docnat import numcore as nc  # noqa: E402
from docnat.attmask import attention, build_group_mask, tags_from_lengths  # noqa: E402
from docnat.decode import translate_batch  # noqa: E402
from docnat.train import TrainConfig, train  # noqa: E402

NAT = ["nat_vanilla", "glat", "glat_ctc", "dag", "gtrans_glat", "gtrans_glat_ctc", "gtrans_dag"]
CACHE = Path(__file__).parent / ".cache" / "acceptance"

# one budget for every model, fixed before looking at any test score
BUDGET = dict(steps=600, lr=1e-3, warmup=150, batch_tokens=256, eval_every=200, dev_docs=100, seed=1)


def _collapse(a, blank):
    out, prev = [], None
    for t in a:
        if t != prev and t != blank:
            out.append(t)
        prev = t
    return tuple(out)


_ALIGN: dict = {}


def _alignments(m, v, blank):
    """All V^M alignments, grouped by their collapsed label sequence."""
    key = (m, v, blank)
    if key not in _ALIGN:
        A = np.array(list(itertools.product(range(v), repeat=m)), dtype=np.int64).reshape(-1, m)
        groups: dict = {}
        for i, a in enumerate(A.tolist()):
            groups.setdefault(_collapse(a, blank), []).append(i)
        _ALIGN[key] = (A, {k: np.array(ix) for k, ix in groups.items()})
    return _ALIGN[key]


def brute_ctc(lp, y, blank):
    m, v = lp.shape
    A, groups = _alignments(m, v, blank)
    ix = groups.get(tuple(y))
    if ix is None:
        return -np.inf
    scores = lp[np.arange(m), A[ix]].sum(axis=1)
    return float(np.logaddexp.reduce(scores))


def rand_lp(rng, m, v):
    return np.log(rng.dirichlet(np.ones(v), size=m))


# ---------------------------------------------------------------------------
# 1-6: oracle and invariant suites
# ---------------------------------------------------------------------------


def test_c1_ctc_oracle(criterion):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst, n_inf = 0.0, 0
    for _ in range(200):
        m, v = int(rng.integers(1, 9)), int(rng.integers(2, 5))
        blank = v - 1
        lp = rand_lp(rng, m, v)
        y = rng.integers(0, v - 1, size=int(rng.integers(0, 6))).tolist()
        dp, bf = float(L.ctc_log_prob(lp, y, blank=blank).data), brute_ctc(lp, y, blank)
        if bf == -np.inf:
            n_inf += 1
            worst = max(worst, 0.0 if dp == -np.inf else math.inf)
        else:
            worst = max(worst, abs(dp - bf))
    dt = time.perf_counter() - t0
    ok = worst < 1e-9 and dt < 10
    criterion(1, ok, f"200 instances, max |dp - enum| = {worst:.2e} ({n_inf} infeasible), {dt:.1f}s")
    assert ok


def test_c2_sentence_ctc(criterion):
    rng = np.random.default_rng(102)
    eq1 = eq2 = le = True
    worst2 = 0.0
    for _ in range(200):
        lp = rand_lp(rng, 6, 5)
        y = rng.integers(0, 4, size=3).tolist()
        a = L.ctc_log_prob(lp, y).data
        b = L.ctc_sentence_log_prob(lp, y, [(0, 3)], [(0, 6)]).data
        eq1 &= bool(a == b)
    for _ in range(200):
        lp = rand_lp(rng, 8, 5)
        n1 = int(rng.integers(1, 3))
        y = rng.integers(0, 3, size=n1 + 2).tolist()
        s = L.ctc_sentence_log_prob(lp, y, [(0, n1), (n1, n1 + 2)], [(0, 4), (4, 8)]).data
        parts = L.ctc_log_prob(lp[:4], y[:n1]).data + L.ctc_log_prob(lp[4:], y[n1:]).data
        worst2 = max(worst2, 0.0 if s == parts == -np.inf else abs(s - parts))
    # the restricted alignment set is a subset of the global one as long as the
    # two sentences do not meet on the same token (otherwise the global collapse
    # merges them); the generator respects that boundary condition
    n = 0
    while n < 200:
        lp = rand_lp(rng, 8, 5)
        y = rng.integers(0, 3, size=4).tolist()
        if y[1] == y[2]:
            continue
        n += 1
        s = L.ctc_sentence_log_prob(lp, y, [(0, 2), (2, 4)], [(0, 4), (4, 8)]).data
        le &= bool(s <= L.ctc_log_prob(lp, y).data + 1e-12)
    eq2 = worst2 < 1e-12
    ok = eq1 and eq2 and le
    criterion(2, ok, f"K=1 bit-equal={eq1}, K=2 max|diff|={worst2:.1e}, sentence<=global on 200={le}")
    assert ok


def _path_score(tok, tr, path, y):
    return sum(tok[a, c] for a, c in zip(path, y)) + sum(tr[a, b] for a, b in zip(path, path[1:]))


def test_c3_dag_oracle(criterion):
    rng = np.random.default_rng(103)
    worst = 0.0
    for _ in range(200):
        m = int(rng.integers(2, 9))
        mask = np.triu(np.ones((m, m), bool), 1)
        tok = nc.log_softmax(nc.Tensor(rng.normal(size=(m, 4))))
        tr = nc.log_softmax_masked(nc.Tensor(rng.normal(size=(m, m))), mask)
        y = rng.integers(0, 4, size=int(rng.integers(2, m + 1))).tolist()
        paths = [(0, *mid, m - 1) for mid in itertools.combinations(range(1, m - 1), len(y) - 2)]
        ref = np.logaddexp.reduce([_path_score(tok.data, tr.data, p, y) for p in paths])
        worst = max(worst, abs(float(L.dag_log_prob(L.DagGraph(tok, tr), y).data) - ref))
    # sentence masking: 3 sentences over M = 8 vertices
    illegal_mass, n_illegal = 0.0, 0
    for _ in range(20):
        tags = np.array([0, 0, 0, 1, 1, 2, 2, 2])
        bos_v, eos_v = [0, 3, 5], [2, 4, 7]
        m = len(tags)
        g = L.DagGraph(nc.log_softmax(nc.Tensor(rng.normal(size=(m, 4)))),
                       nc.log_softmax_masked(nc.Tensor(rng.normal(size=(m, m))), np.triu(np.ones((m, m), bool), 1)),
                       tags, bos_v, eos_v)
        g = L.apply_sentence_mask(g)
        for n in range(2, m + 1):
            y = rng.integers(0, 4, size=n).tolist()
            for mid in itertools.combinations(range(1, m - 1), n - 2):
                p = (0, *mid, m - 1)
                legal = all(tags[a] == tags[b] or (a in eos_v and b in bos_v and tags[b] == tags[a] + 1)
                            for a, b in zip(p, p[1:]))
                if not legal:
                    n_illegal += 1
                    illegal_mass += math.exp(_path_score(g.token_logp.data, g.trans_logp.data, p, y))
    ok = worst < 1e-9 and illegal_mass == 0.0
    criterion(3, ok, f"200 instances, max |dp - enum| = {worst:.2e}; {n_illegal} illegal paths, mass {illegal_mass}")
    assert ok


def test_c4_gradients(criterion):
    t0 = time.perf_counter()
    res = gradsuite.run_suite(50, seed=104)
    dt = time.perf_counter() - t0
    ok = all(v < 1e-6 for v in res.values()) and dt < 120
    worst = max(res, key=res.get)
    criterion(4, ok, f"{len(res)} losses x 50 instances, worst {worst} = {res[worst]:.1e}, {dt:.0f}s")
    assert ok


def test_c5_masks(criterion):
    rng = np.random.default_rng(105)
    # group attention weight on cross-sentence pairs
    zero = True
    for _ in range(50):
        t = tags_from_lengths(rng.integers(1, 5, size=rng.integers(1, 5)).tolist())
        x = nc.Tensor(rng.normal(size=(len(t), 8)) * 10)
        m = build_group_mask(t, t)
        _, w = attention(x, x, x, m, heads=2, return_weights=True)
        zero &= bool((w.data[:, ~m] == 0.0).all())
    # teacher prefix consistency
    V = 16
    cfg = M.ModelConfig(variant="at_teacher", layers=2, heads=2, d_model=8, d_ff=16, vocab_size=V)
    P = M.as_tensors(M.init_params(cfg))
    enc = M.encode(cfg, P, M.source_batch(cfg, [[[5, 6, 7], [8, 9]]]))
    worst = 0.0
    for _ in range(100):
        pre = [D.BOS] + rng.choice([5, 6, 7, 8, D.EOS, D.BOS], size=int(rng.integers(1, 12))).tolist()
        t = int(rng.integers(1, len(pre) + 1))
        full = M.decode_teacher(cfg, P, enc, [pre], [2]).data[0]
        worst = max(worst, float(np.abs(full[t - 1] - M.decode_at_step(cfg, P, enc, pre[:t], 2)).max()))
    # locality with global_layers = 0: editing source sentence 1 leaves target sentence 0 unchanged
    local = True
    for variant in ("gtrans_glat", "gtrans_glat_ctc", "gtrans_dag"):
        c = M.ModelConfig(variant=variant, layers=2, heads=2, d_model=8, d_ff=16, vocab_size=V, global_layers=0,
                          max_sentence_len=8, dag_lambda=2.0)
        Pc = M.as_tensors(M.init_params(c))
        doc = [[5, 6, 7], [8, 9, 10]]
        outs = []
        for d in (doc, [doc[0], [11, 12, 13]]):
            src = M.source_batch(c, [d])
            fr = M.target_frame(c, src, [[4, 4]])
            outs.append((M.decode_nat(c, Pc, M.encode(c, Pc, src), fr).data[0], fr.blocks[0]))
        (a, blocks), (b, _) = outs
        s, e = blocks[0]
        s1, e1 = blocks[1]
        local &= bool(np.array_equal(a[s:e], b[s:e])) and not np.allclose(a[s1:e1], b[s1:e1])
    ok = zero and worst < 1e-12 and local
    criterion(5, ok, f"cross-sentence weight zero={zero}, prefix max|diff|={worst:.1e} on 100, locality={local}")
    assert ok


def test_c6_metrics(criterion):
    r = E.bleu([["the", "the", "the"]], [["the", "cat"]])
    # hand count: unigram 1/3 clipped; no bigram+ matches -> (0+1)/(2+1), (0+1)/(1+1), (0+1)/(0+1); bp = 1
    hand = 100 * math.exp((math.log(1 / 3) + math.log(1 / 3) + math.log(1 / 2) + math.log(1)) / 4)
    c1 = abs(r.precisions[0] - 1 / 3) < 1e-9 and abs(r.score - hand) < 1e-9
    hyp, ref = ["a", "b", "c", "d", "x"], ["a", "b", "c", "d", "e", "f"]
    # p = 4/5, 3/4, 2/3, 1/2 ; bp = exp(1 - 6/5)
    hand2 = 100 * math.exp(1 - 6 / 5) * (4 / 5 * 3 / 4 * 2 / 3 * 1 / 2) ** 0.25
    c2 = abs(E.bleu([hyp], [ref]).score - hand2) < 1e-9
    c3 = E.bleu([ref, hyp], [ref, hyp]).score == 100.0
    c4 = (E.repetition_ratio([["a", "a", "a", "a"]], 1) == 0.75
          and abs(E.repetition_ratio([["a", "b", "a", "b", "a"]], 2) - 2 / 4) < 1e-12
          and E.repetition_ratio([["a", "b", "c"]], 1) == 0.0)
    ok = c1 and c2 and c3 and c4
    criterion(6, ok, f"clipped case={c1}, brevity case={c2}, identity={c3}, repetition={c4}")
    assert ok


# ---------------------------------------------------------------------------
# 7-10: trained model zoo
# ---------------------------------------------------------------------------


def _score(cfg, params, vocab, docs):
    hyp = E.translate_docs(cfg, params, vocab, docs)
    return E.score_docs(cfg, hyp, docs)["d_bleu"]


def _build_zoo(root: Path) -> dict:
    sc = D.SynthConfig()
    vocab = D.synth_vocab(sc)
    tr, dev, test = D.gen_corpus(sc, 2000), D.gen_corpus(sc, 200, 1_000_000), D.gen_corpus(sc, 200, 2_000_000)
    tc = TrainConfig(**BUDGET)
    state: dict = {"budget": BUDGET, "scores": {}, "train_sec": {}}
    t0 = time.perf_counter()

    def fit(variant, data, docs):
        cfg = M.ModelConfig(variant=variant)
        t = time.perf_counter()
        params, _ = train(cfg, tc, vocab, docs, dev)
        state["train_sec"][f"{variant}/{data}"] = time.perf_counter() - t
        M.save_checkpoint(root / f"{variant}_{data}.ckpt", cfg, params, vocab)
        state["scores"][f"{variant}/{data}"] = _score(cfg, params, vocab, test)
        return cfg, params

    teacher = fit("at_teacher", "raw", tr)
    t = time.perf_counter()
    kd = D.distill_corpus(teacher, vocab, tr)
    state["distill_sec"] = time.perf_counter() - t
    state["kd_truncated"] = sum(1 for d in kd if d.extra.get("truncated"))
    state["kd_changed_docs"] = sum(a.tgt_sentences != b.tgt_sentences for a, b in zip(kd, tr))
    fit("at_teacher", "kd", kd)
    for v in NAT:
        fit(v, "raw", tr)
        fit(v, "kd", kd)
    state["runtime_sec"] = time.perf_counter() - t0
    (root / "state.json").write_text(json.dumps(state, indent=1))
    return state


@pytest.fixture(scope="session")
def zoo():
    key = json.dumps(BUDGET, sort_keys=True)
    if os.environ.get("DOCNAT_FRESH") == "1" and CACHE.exists():
        shutil.rmtree(CACHE)
    state_file = CACHE / "state.json"
    cached = state_file.exists() and json.dumps(json.loads(state_file.read_text())["budget"], sort_keys=True) == key
    if not cached:
        if CACHE.exists():
            shutil.rmtree(CACHE)
        CACHE.mkdir(parents=True)
        with threadpool_limits(limits=1):
            _build_zoo(CACHE)
    state = json.loads(state_file.read_text())
    state["cached"] = cached

    def load(name):
        return M.load_checkpoint(CACHE / f"{name}.ckpt")

    state["load"] = load
    return state


def test_c7_quality_trend(criterion, zoo):
    s = zoo["scores"]
    a = s["gtrans_glat_ctc/raw"] - s["glat_ctc/raw"]
    kd_ok = {v: s[f"{v}/kd"] >= s[f"{v}/raw"] for v in NAT}
    c = s["at_teacher/raw"] >= s["at_teacher/kd"] - 1.0
    rt = zoo["runtime_sec"] / 60
    ok = a >= 2.0 and all(kd_ok.values()) and c and rt < 60
    table = ", ".join(f"{k}={v:.2f}" for k, v in sorted(s.items()))
    criterion(7, ok, f"(a) gtrans_glat_ctc - glat_ctc = {a:+.2f} (need >= 2); "
                     f"(b) KD >= raw failing for {[v for v, x in kd_ok.items() if not x]}; "
                     f"(c) teacher raw - KD = {s['at_teacher/raw'] - s['at_teacher/kd']:+.2f}; "
                     f"runtime {rt:.1f} min{' (cached)' if zoo['cached'] else ''}; d-BLEU: {table}")
    assert a >= 2.0, "G-Trans+GLAT+CTC does not lead GLAT+CTC by 2 d-BLEU"
    assert all(kd_ok.values()), f"KD below raw for {[v for v, x in kd_ok.items() if not x]}"
    assert c and rt < 60


def test_c8_speed_trend(criterion, zoo, tmp_path):
    models = {}
    for name in ("at_teacher", "gtrans_glat_ctc", "glat_ctc"):
        cfg, params, vocab = zoo["load"](f"{name}_raw")
        models[name] = (cfg, params, vocab)
    docs = D.gen_corpus(D.SynthConfig(n_sentences=64), 10, offset=4_000_000)
    segs = E.bucket_segments(docs, ["sent", 64, 256, 512])
    with threadpool_limits(limits=1):
        rep = E.bench_speed(models, "at_teacher", segs, batch_sizes=[1, 2, 4, 8], reps=5, warmup=1)
    rep.write_csv(tmp_path / "speed.csv")
    E.speed_svg(rep, tmp_path / "speed.svg", "at_teacher")
    checks = {}
    for m in ("gtrans_glat_ctc", "glat_ctc"):
        s256 = rep.get(m, 256, 1)["speedup"]
        s64, s512 = rep.get(m, 64, 1)["speedup"], rep.get(m, 512, 1)["speedup"]
        b1, b8 = rep.get(m, 512, 1)["speedup"], rep.get(m, 512, 8)["speedup"]
        ex = all(r["speedup_ex"] >= r["speedup"] for r in rep.rows if r["model"] == m)
        checks[m] = (s256 >= 2.0 and s512 > s64 and b8 < b1 and ex,
                     f"{m}: 256={s256:.1f}x, 64={s64:.1f}x, 512={s512:.1f}x, batch8@512={b8:.1f}x, ex>=incl={ex}")
    ok = all(c for c, _ in checks.values())
    criterion(8, ok, "; ".join(d for _, d in checks.values()))
    assert ok


def _bucket_precisions(cfg, params, vocab, segs):
    hyps, refs = [], []
    for i in range(0, len(segs), 16):
        for s, tr in zip(segs[i:i + 16], translate_batch(cfg, params, vocab, segs[i:i + 16])):
            hyps.append(tr.tokens)
            refs.append([t for x in s.tgt for t in x])
    return E.bleu(hyps, refs).precisions


def test_c9_degradation_shape(criterion, zoo):
    # documents sized to each bucket, so every segment opens with its own selector
    # and the buckets differ in length only
    segs = {}
    for b, k, n in ((64, 6, 200), (256, 28, 40)):
        docs = D.gen_corpus(D.SynthConfig(n_sentences=k), n, offset=3_000_000)
        segs[b] = [s for s in E.bucket_segments(docs, [b])[b] if s.sent_range[0] == 0]
    res = {}
    for name in ("glat", "gtrans_glat"):
        cfg, params, vocab = zoo["load"](f"{name}_raw")
        res[name] = {b: _bucket_precisions(cfg, params, vocab, segs[b]) for b in (64, 256)}
    drop = {m: [res[m][64][n] - res[m][256][n] for n in (2, 3)] for m in res}
    glat_lower = all(res["glat"][256][n] < res["glat"][64][n] for n in (2, 3))
    smaller = all(drop["gtrans_glat"][i] < drop["glat"][i] for i in range(2))
    ok = glat_lower and smaller
    fmt = lambda m: "/".join(f"{100 * res[m][b][n]:.1f}" for b in (64, 256) for n in (2, 3))  # noqa: E731
    criterion(9, ok, f"BLEU-3/4 at 64 then 256: glat {fmt('glat')}, gtrans_glat {fmt('gtrans_glat')}; "
                     f"drops glat {drop['glat'][0]:.3f}/{drop['glat'][1]:.3f}, "
                     f"gtrans {drop['gtrans_glat'][0]:.3f}/{drop['gtrans_glat'][1]:.3f} "
                     f"({len(segs[64])} and {len(segs[256])} segments)")
    assert ok


def test_c10_context_ablation(criterion, zoo):
    sc = D.SynthConfig()
    docs = D.gen_corpus(sc, 200, 2_000_000)
    cfg, params, vocab = zoo["load"]("gtrans_glat_ctc_raw")
    res = E.context_ablation(cfg, params, vocab, docs, synth=sc)
    src = res["no_source_context"]["delta_ambiguous_acc"]
    tgt = res["no_target_context"]["delta_ambiguous_acc"]
    ok = src < tgt
    criterion(10, ok, f"ambiguous accuracy full={res['full']['ambiguous_acc']:.3f}, "
                      f"delta no-source={src:+.3f}, delta no-target={tgt:+.3f}")
    assert ok
