"""Command line: gen-data, train, distill, translate, evaluate, bench, report.

Exit codes: 0 success, 1 usage or configuration error, 2 data or metric error,
3 numeric failure.

Config files are flat ``key = value`` lines grouped under ``[synth]``,
``[model]``, ``[train]`` and ``[run]`` headers; ``#`` starts a comment.  The
same keys can be overridden with ``--set section.key=value``.

[synth]  vocab_size n_sentences min_len max_len rho cohesion seed
[model]  layers heads d_model d_ff global_layers max_sentence_len max_target_len
         ctc_upsample dag_lambda max_vertices seed
[train]  lr warmup steps batch_tokens seed w_len glance_start glance_end
         eval_every dev_docs max_len clip_norm beta1 beta2 adam_eps
[run]    n_train n_dev n_test workers
"""
from __future__ import annotations

import argparse
import concurrent.futures as cf
import csv
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

from . import data as D
from . import model as M
from .decode import translate_batch
from .eval import (MetricError, SpeedReport, bench_speed, bucket_segments, d_bleu, repetition_ratio, s_bleu,
                   speed_svg)
from .train import NumericError, TrainConfig, train

log = logging.getLogger("docnat")

RUN_DEFAULTS = {"n_train": 2000, "n_dev": 200, "n_test": 200, "workers": 1}
SECTIONS = {
    "synth": D.SynthConfig,
    "model": M.ModelConfig,
    "train": TrainConfig,
    "run": None,
}
_NOT_CONFIGURABLE = {"model": {"variant", "vocab_size"}}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


def _defaults(section: str) -> dict:
    if section == "run":
        return dict(RUN_DEFAULTS)
    return {f.name: f.default for f in dataclasses.fields(SECTIONS[section])
            if f.name not in _NOT_CONFIGURABLE.get(section, ())}


def _coerce(section, key, value: str):
    base = _defaults(section)
    if key not in base:
        raise UsageError(f"unknown config key {section}.{key}")
    t = type(base[key])
    try:
        return t(float(value)) if t is int else t(value)
    except ValueError:
        raise UsageError(f"bad value for {section}.{key}: {value!r}") from None


def parse_config_text(text: str) -> dict:
    out: dict[str, dict] = {s: {} for s in SECTIONS}
    section = None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise UsageError(f"config line {n}: unknown section [{section}]")
            continue
        if "=" not in line or section is None:
            raise UsageError(f"config line {n}: expected key = value inside a section")
        k, v = (x.strip() for x in line.split("=", 1))
        out[section][k] = _coerce(section, k, v)
    return out


def resolve_config(path: str | None, overrides: list[str]) -> dict:
    cfg = {s: _defaults(s) for s in SECTIONS}
    if path:
        for s, kv in parse_config_text(Path(path).read_text()).items():
            cfg[s].update(kv)
    for o in overrides or []:
        if "=" not in o or "." not in o.split("=", 1)[0]:
            raise UsageError(f"--set expects section.key=value, got {o!r}")
        k, v = o.split("=", 1)
        s, k = k.split(".", 1)
        if s not in SECTIONS:
            raise UsageError(f"unknown config section {s!r}")
        cfg[s][k] = _coerce(s, k, v)
    return cfg


def dump_config(cfg: dict, extra: dict | None = None) -> str:
    lines = []
    for s in SECTIONS:
        lines.append(f"[{s}]")
        lines += [f"{k} = {v}" for k, v in cfg[s].items()]
        lines.append("")
    if extra:
        lines.append("# command")
        lines += [f"# {k} = {v}" for k, v in extra.items()]
    return "\n".join(lines) + "\n"


def _check_out(path: Path, force: bool):
    if path.exists() and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _setup_threads(n: int):
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(a, cfg):
    out = Path(a.out)
    _check_out(out / "train.jsonl", a.force)
    out.mkdir(parents=True, exist_ok=True)
    sc = D.SynthConfig(**cfg["synth"])
    sc.validate()
    r = cfg["run"]
    splits = {"train": (r["n_train"], 0), "dev": (r["n_dev"], 1_000_000), "test": (r["n_test"], 2_000_000)}
    man = {f"synth.{k}": v for k, v in dataclasses.asdict(sc).items()}
    man["oracle_seed"] = sc.seed
    man["n_ambiguous"] = D.n_ambiguous(sc)
    for name, (n, off) in splits.items():
        docs = D.gen_corpus(sc, n, offset=off)
        D.write_corpus(out / f"{name}.jsonl", docs)
        man[f"{name}.docs"] = n
        man[f"{name}.sha256"] = _sha256(out / f"{name}.jsonl")
    (out / "vocab.txt").write_text("\n".join(D.synth_vocab(sc).itos) + "\n")
    (out / "manifest.txt").write_text("".join(f"{k} = {v}\n" for k, v in man.items()))
    (out / "config.resolved").write_text(dump_config(cfg, {"command": "gen-data"}))
    print(f"wrote {sum(n for n, _ in splits.values())} documents to {out}")


def read_vocab(path) -> D.Vocab:
    toks = Path(path).read_text(encoding="utf-8").split("\n")
    v = D.Vocab()
    for t in toks[len(D.SPECIALS):]:
        if t:
            v.add(t)
    return v


def _corpus_vocab(corpus: Path, docs) -> D.Vocab:
    p = corpus / "vocab.txt"
    return read_vocab(p) if p.exists() else D.Vocab.from_docs(docs)


def cmd_train(a, cfg):
    out = Path(a.out)
    _check_out(out, a.force)
    corpus = Path(a.corpus)
    tr = D.read_corpus(a.train_file or corpus / "train.jsonl")
    dev = D.read_corpus(corpus / "dev.jsonl") if (corpus / "dev.jsonl").exists() else []
    vocab = _corpus_vocab(corpus, tr + dev)
    mc = M.ModelConfig(variant=a.variant, vocab_size=len(vocab), **cfg["model"])
    tc = TrainConfig(**cfg["train"])
    out.parent.mkdir(parents=True, exist_ok=True)
    Path(str(out) + ".config").write_text(dump_config(cfg, {"command": "train", "variant": a.variant}))
    _, hist = train(mc, tc, vocab, tr, dev, ckpt_path=out, log_file=str(out) + ".log")
    print(f"saved {out}; last: {hist[-1] if hist else {}}")


def _translate_chunk(args):
    ckpt, segs, mode = args
    cfg, params, vocab = M.load_checkpoint(ckpt)
    return _translate_segments(cfg, params, vocab, segs, mode)


def _translate_segments(cfg, params, vocab, segs, mode, batch_size=16):
    out = []
    for i in range(0, len(segs), batch_size):
        chunk = segs[i:i + batch_size]
        try:
            out.extend(translate_batch(cfg, params, vocab, chunk, dag_mode=mode))
        except Exception as e:  # keep going, one segment at a time
            log.warning("batch %d failed (%s); retrying per segment", i // batch_size, e)
            for s in chunk:
                try:
                    out.extend(translate_batch(cfg, params, vocab, [s], dag_mode=mode))
                except Exception as e2:
                    from .decode import Translation

                    out.append(Translation([[] for _ in s.src], [], mode=cfg.variant, diagnostics=[str(e2)]))
    return out


def _pool_translate(ckpt, segs, mode, workers):
    if workers <= 1:
        cfg, params, vocab = M.load_checkpoint(ckpt)
        return _translate_segments(cfg, params, vocab, segs, mode)
    size = -(-len(segs) // workers)
    chunks = [(str(ckpt), segs[i:i + size], mode) for i in range(0, len(segs), size)]
    with cf.ProcessPoolExecutor(workers) as ex:
        return [t for part in ex.map(_translate_chunk, chunks) for t in part]


def cmd_distill(a, cfg):
    out = Path(a.out)
    _check_out(out / "train.jsonl", a.force)
    corpus = Path(a.corpus)
    tcfg, params, vocab = M.load_checkpoint(a.teacher)
    if tcfg.variant != "at_teacher":
        raise UsageError("distill needs an at_teacher checkpoint")
    docs = D.read_corpus(corpus / "train.jsonl")
    out.mkdir(parents=True, exist_ok=True)
    workers = cfg["run"]["workers"]
    if workers <= 1:
        kd = D.distill_corpus((tcfg, params), vocab, docs, max_len=cfg["train"]["max_len"])
    else:
        segs = D.segment_documents(docs, cfg["train"]["max_len"])
        outs = _pool_translate(a.teacher, segs, "lookahead", workers)
        kd = _reassemble(docs, segs, outs)
    D.write_corpus(out / "train.jsonl", kd)
    for name in ("dev.jsonl", "test.jsonl", "vocab.txt", "manifest.txt"):
        if (corpus / name).exists():
            (out / name).write_bytes((corpus / name).read_bytes())
    n_trunc = sum(1 for d in kd if d.extra.get("truncated"))
    (out / "config.resolved").write_text(dump_config(cfg, {"command": "distill", "teacher": a.teacher}))
    print(f"distilled {len(kd)} documents ({n_trunc} truncated) into {out}")


def _reassemble(docs, segs, outs):
    by_doc: dict[str, list] = {}
    for seg, tr in zip(segs, outs):
        by_doc.setdefault(seg.doc_id, []).append(tr)
    res = []
    for d in docs:
        trs = by_doc[d.id]
        sents = [" ".join(s) for tr in trs for s in tr.sentences]
        extra = {"truncated": True} if any(t.truncated for t in trs) else {}
        res.append(D.DocumentPair(d.id, list(d.src_sentences), sents, extra))
    return res


def cmd_translate(a, cfg):
    out = Path(a.out)
    _check_out(out, a.force)
    mcfg, _, _ = M.load_checkpoint(a.ckpt)
    docs = D.read_corpus(a.input)
    segs = D.segment_documents(docs, cfg["train"]["max_len"])
    outs = _pool_translate(a.ckpt, segs, a.mode, cfg["run"]["workers"])
    by_doc: dict[str, list] = {}
    for seg, tr in zip(segs, outs):
        by_doc.setdefault(seg.doc_id, []).append(tr)
    with open(out, "w", encoding="utf-8", newline="\n") as f:
        for d in docs:
            trs = by_doc.get(d.id, [])
            rec = {"id": d.id, "src": d.src_sentences, "tgt": [" ".join(s) for t in trs for s in t.sentences]}
            diag = [x for t in trs for x in t.diagnostics]
            if diag:
                rec["diagnostics"] = diag
            if a.timed:
                rec["time"] = sum(t.wall_time for t in trs)
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")
    Path(str(out) + ".config").write_text(dump_config(cfg, {"command": "translate", "ckpt": a.ckpt,
                                                             "variant": mcfg.variant, "mode": a.mode}))
    print(f"translated {len(docs)} documents into {out}")


def cmd_evaluate(a, cfg):
    hyp = D.read_corpus(a.hyp)  # translate output shares the corpus record shape
    ref = D.read_corpus(a.ref)
    hyp_by = {d.id: d for d in hyp}
    missing = [d.id for d in ref if d.id not in hyp_by]
    if missing:
        raise MetricError(f"hypotheses missing for documents {missing[:20]}")
    H = [[s.split() for s in hyp_by[d.id].tgt_sentences] for d in ref]
    R = [[s.split() for s in d.tgt_sentences] for d in ref]
    rep = s_bleu(H, R) if a.granularity == "sent" else d_bleu(H, R)
    flat = [[t for s in h for t in s] for h in H]
    res = {"granularity": a.granularity, **rep.as_dict(),
           "rep1": repetition_ratio(flat, 1), "rep2": repetition_ratio(flat, 2)}
    if a.label:
        res["model"] = a.label
    if a.data:
        res["data"] = a.data
    for k, v in res.items():
        print(f"{k}\t{v:.4f}" if isinstance(v, float) else f"{k}\t{v}")
    if a.out:
        out = Path(a.out)
        _check_out(out, a.force)
        out.write_text(json.dumps(res, indent=1, sort_keys=True) + "\n")
        Path(str(out) + ".config").write_text(dump_config(cfg, {"command": "evaluate", "hyp": a.hyp, "ref": a.ref}))


def cmd_bench(a, cfg):
    out = Path(a.out)
    _check_out(out / "speed.csv", a.force)
    models, teacher = {}, None
    for p in a.ckpt:
        mc, params, vocab = M.load_checkpoint(p)
        name = mc.variant if mc.variant not in models else f"{mc.variant}:{Path(p).stem}"
        models[name] = (mc, params, vocab)
        if mc.variant == "at_teacher" and teacher is None:
            teacher = name
    if teacher is None:
        raise UsageError("bench needs an at_teacher checkpoint as the reference")
    sizes = {n: m[0].size_signature() for n, m in models.items()}
    if len(set(sizes.values())) > 1:
        raise UsageError(f"refusing unfair comparison, model sizes differ: {sizes}")
    docs = D.read_corpus(a.corpus)
    buckets = [b if b == "sent" else int(b) for b in a.buckets.split(",")]
    segs = bucket_segments(docs, buckets)
    batch_sizes = [int(b) for b in a.batch_sizes.split(",")]
    with _setup_threads(a.threads):
        rep = bench_speed(models, teacher, segs, batch_sizes, reps=a.reps)
    out.mkdir(parents=True, exist_ok=True)
    rep.write_csv(out / "speed.csv")
    speed_svg(rep, out / "speed.svg", teacher=None if len(models) == 1 else teacher)
    (out / "config.resolved").write_text(dump_config(cfg, {"command": "bench", "ckpts": ",".join(a.ckpt),
                                                           "threads": a.threads}))
    print(f"wrote {out / 'speed.csv'} and {out / 'speed.svg'} ({len(rep.rows)} rows)")


def read_speed_csv(path) -> SpeedReport:
    rows = []
    with open(path) as f:
        for r in csv.DictReader(f):
            r["batch_size"] = int(r["batch_size"])
            for k in ("sec_per_segment", "init_sec", "speedup", "speedup_ex"):
                r[k] = float(r[k])
            r["reps"] = int(r["reps"])
            rows.append(r)
    return SpeedReport(rows)


def build_report(run_dir: Path) -> str:
    """Markdown table: one row per model, raw and KD metric columns, speedup."""
    evals = []
    for p in sorted(run_dir.rglob("*.json")):
        try:
            rec = json.loads(p.read_text())
        except (json.JSONDecodeError, UnicodeDecodeError):
            continue
        if isinstance(rec, dict) and "model" in rec and "bleu" in rec:
            evals.append(rec)
    speed = {}
    for p in sorted(run_dir.rglob("speed.csv")):
        rep = read_speed_csv(p)
        for r in rep.rows:
            if r["batch_size"] == 1:
                speed[r["model"]] = r["speedup"]  # last bucket in file order wins
    models = list(dict.fromkeys([e["model"] for e in evals] + list(speed)))
    cell = {}
    for e in evals:
        key = "d" if e["granularity"] == "doc" else "s"
        cell[(e["model"], e.get("data", "raw"), key)] = e["bleu"]
    head = "| model | raw s-BLEU | raw d-BLEU | KD s-BLEU | KD d-BLEU | speedup |"
    lines = [head, "|" + "---|" * 6]
    fmt = lambda v: "absent" if v is None else f"{v:.2f}"  # noqa: E731
    for m in sorted(models, key=lambda x: (x not in M.VARIANTS, M.VARIANTS.index(x) if x in M.VARIANTS else 0, x)):
        vals = [cell.get((m, d, k)) for d in ("raw", "kd") for k in ("s", "d")]
        sp = speed.get(m)
        lines.append(f"| {m} | " + " | ".join(fmt(v) for v in vals) + f" | {'absent' if sp is None else f'{sp:.2f}x'} |")
    return "\n".join(lines) + "\n"


def cmd_report(a, cfg):
    run = Path(a.run_dir)
    if not run.is_dir():
        raise D.DataError(f"{run} is not a directory")
    text = build_report(run)
    out = Path(a.out) if a.out else run / "report.md"
    out.write_text(text)
    print(text, end="")


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="docnat", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="key=value config file with [synth]/[model]/[train]/[run] sections")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="config override")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")

    sp = sub.add_parser("gen-data", help="generate train/dev/test synthetic corpora")
    common(sp)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("train", help="train one model variant")
    common(sp)
    sp.add_argument("--corpus", required=True, help="directory with train/dev .jsonl and vocab.txt")
    sp.add_argument("--train-file", help="override the training file (e.g. a distilled corpus)")
    sp.add_argument("--variant", required=True, choices=M.VARIANTS)
    sp.add_argument("--out", required=True, help="checkpoint path")

    sp = sub.add_parser("distill", help="replace training targets with teacher translations")
    common(sp)
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("translate", help="translate a corpus file")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--timed", action="store_true", help="add per-document wall time")
    sp.add_argument("--mode", default="lookahead", choices=("lookahead", "greedy"), help="DAG decoding")

    sp = sub.add_parser("evaluate", help="BLEU and repetition ratios of a translation file")
    common(sp)
    sp.add_argument("--hyp", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--granularity", choices=("sent", "doc"), default="doc")
    sp.add_argument("--label", help="model name recorded in --out")
    sp.add_argument("--data", choices=("raw", "kd"), help="training data recorded in --out")
    sp.add_argument("--out", help="write the report as JSON")

    sp = sub.add_parser("bench", help="wall-clock speed over length buckets and batch sizes")
    common(sp)
    sp.add_argument("--ckpt", action="append", required=True, help="repeat per model; one must be at_teacher")
    sp.add_argument("--corpus", required=True, help="corpus file to draw segments from")
    sp.add_argument("--buckets", default="sent,64,128,256,512")
    sp.add_argument("--batch-sizes", default="1,2,4,8")
    sp.add_argument("--reps", type=int, default=5)
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("report", help="markdown summary of a run directory")
    common(sp)
    sp.add_argument("--run-dir", required=True)
    sp.add_argument("--out")
    return p


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "distill": cmd_distill, "translate": cmd_translate,
    "evaluate": cmd_evaluate, "bench": cmd_bench, "report": cmd_report,
}


def main(argv=None) -> int:
    p = build_parser()
    try:
        a = p.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    t0 = time.perf_counter()
    try:
        cfg = resolve_config(a.config, a.set)
        COMMANDS[a.cmd](a, cfg)
    except (UsageError, D.ConfigurationError, M.ConfigurationError, M.CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (D.DataError, MetricError, M.SegmentationError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    log.info("%s finished in %.1fs", a.cmd, time.perf_counter() - t0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
