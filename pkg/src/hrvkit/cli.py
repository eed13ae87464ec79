"""``hrv`` command line: build, inspect and apply head relevance vectors.

Exit codes: 0 success, 2 invalid flags or configuration, 3 data or
format error, 4 hook-contract error.
"""

from __future__ import annotations

import argparse
import importlib
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import analysis
from .adapter import (build_raw_from_traces, build_raw_online, read_trace, trace_from_run,
                      write_trace)
from .core import (LERHF, MORHF, HeadId, build_key_bank, dumps_hrv, dumps_raw, head_order,
                   loads_hrv, loads_raw, normalize_hrv, rescaling_vector)
from .errors import DataError, HookContractError, HRVError, PreconditionError
from .steering import (WEAKEN_FACTOR, p2p_hrv_maps, replace_steps, rescale_hook,
                       positional_alignment)
from .toy import PlantSpec, ToyConfig, ToyEngine, as_words, concept_prompts, plant_concept_head, toy_prompts
from .vocab import ConceptVocabulary, Word, default_vocabulary

log = logging.getLogger("hrvkit")


class UsageError(PreconditionError):
    pass


# --------------------------------------------------------------------------
# shared helpers
# --------------------------------------------------------------------------


def _read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None


def _write(path, data, binary=False):
    if path in (None, "-"):
        if binary:
            sys.stdout.buffer.write(data)
        else:
            sys.stdout.write(data)
        return
    try:
        if binary:
            Path(path).write_bytes(data)
        else:
            Path(path).write_text(data, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from None


def load_vocab(args) -> ConceptVocabulary:
    vocab = ConceptVocabulary.load(args.vocab) if args.vocab else default_vocabulary()
    for spec in getattr(args, "add_concept", None) or []:
        name, sep, words = spec.partition("=")
        if not sep or not words:
            raise UsageError(f"--add-concept expects NAME=word,word (got {spec!r})")
        vocab = vocab.extended(name.strip(), [w for w in words.split(",") if w.strip()])
    return vocab


def parse_plants(specs, gain) -> PlantSpec:
    heads = {}
    for spec in specs or []:
        concept, sep, hs = spec.rpartition("=")
        if not sep or not concept:
            raise UsageError(f"--plant expects CONCEPT=L.H,L.H (got {spec!r})")
        ids = []
        for tok in hs.split(","):
            layer, dot, head = tok.strip().partition(".")
            if not dot or not layer.isdigit() or not head.isdigit():
                raise UsageError(f"--plant: bad head {tok!r}, expected LAYER.HEAD")
            ids.append(HeadId(int(layer), int(head)))
        heads.setdefault(concept, []).extend(ids)
    return PlantSpec.disjoint(heads, gain)


def make_engine(args, vocab):
    if args.engine == "toy":
        cfg = ToyConfig.load(args.config) if args.config else ToyConfig()
        eng = ToyEngine(cfg, vocab)
        if args.plant:
            eng = plant_concept_head(eng, parse_plants(args.plant, args.gain))
        return eng
    mod, sep, attr = args.engine.partition(":")
    if not sep:
        raise UsageError(f"--engine must be 'toy' or MODULE:FACTORY, got {args.engine!r}")
    try:
        factory = getattr(importlib.import_module(mod), attr)
    except (ImportError, AttributeError) as exc:
        raise UsageError(f"--engine {args.engine}: cannot load plugin ({exc})") from None
    return factory(config=args.config, vocab=vocab)


def make_scorer(args, engine, concept):
    if args.scorer == "planted":
        if not hasattr(engine, "score_planted"):
            raise UsageError("--scorer planted needs the toy engine")
        return lambda run: engine.score_planted(run, concept)
    mod, sep, attr = args.scorer.partition(":")
    if not sep:
        raise UsageError(f"--scorer must be 'planted' or MODULE:FUNC, got {args.scorer!r}")
    try:
        fn = getattr(importlib.import_module(mod), attr)
    except (ImportError, AttributeError) as exc:
        raise UsageError(f"--scorer {args.scorer}: cannot load ({exc})") from None
    return lambda run: fn(run, concept)


def read_prompts(path) -> list[list[Word]]:
    out = []
    for line in _read_text(path).splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t") if "\t" in line else line.split()
        out.append([Word.parse(p) for p in parts if p.strip()])
    if not out:
        raise DataError(f"{path}: no prompts")
    return out


def provenance(args, vocab=None, **extra) -> str:
    items = [f"seed={getattr(args, 'seed', None)}", f"engine={getattr(args, 'engine', 'none')}"]
    if vocab is not None:
        items.append(f"vocab-fingerprint={vocab.fingerprint()}")
    items += [f"{k}={v}" for k, v in extra.items()]
    return " ".join(items)


def load_hrv(path):
    return loads_hrv(_read_text(path), str(path))


def _trace_paths(specs):
    paths = []
    for s in specs:
        p = Path(s)
        if p.is_dir():
            paths.extend(sorted(p.glob("*.atrace")))
        else:
            paths.append(p)
    if not paths:
        raise DataError("no trace files found")
    return paths


def load_traces(specs):
    out = []
    for p in _trace_paths(specs):
        try:
            data = p.read_bytes()
        except OSError as exc:
            raise DataError(f"cannot read {p}: {exc}") from None
        try:
            out.append(read_trace(data))
        except DataError as exc:
            raise type(exc)(f"{p}: {exc}") from None
    return out


def _parse_ks(text, H):
    if text is None:
        return analysis.default_ks(H)
    if text == "all":
        return list(range(H + 1))
    try:
        ks = sorted({int(k) for k in text.split(",")})
    except ValueError:
        raise UsageError(f"--ks expects comma-separated integers, got {text!r}") from None
    if ks[0] < 0 or ks[-1] > H:
        raise UsageError(f"--ks values must lie in [0, {H}]")
    return ks


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_build(args):
    if args.trace:
        traces = load_traces(args.trace)
        raw = build_raw_from_traces(traces)
    else:
        if args.seed is None:
            raise UsageError("build: --seed is required for online builds")
        vocab = load_vocab(args)
        engine = make_engine(args, vocab)
        if args.prompts:
            prompts = read_prompts(args.prompts)
        else:
            prompts = toy_prompts(vocab, args.n_prompts, args.seed, getattr(engine.config, "L", 8))
        if hasattr(engine, "encode_text"):
            for i, pr in enumerate(prompts):
                try:
                    engine.encode_text(pr)
                except DataError as exc:
                    src = args.prompts or "generated prompts"
                    raise DataError(f"{src}: prompt {i + 1}: {exc}") from None
        bank = build_key_bank(vocab, engine, engine)
        on_run = None
        if args.write_traces:
            tdir = Path(args.write_traces)
            tdir.mkdir(parents=True, exist_ok=True)
            heads = engine.enumerate_heads()

            def on_run(i, run, sseed):
                _write(tdir / f"run{i:05d}.atrace", write_trace(run, bank, sseed, heads), binary=True)
        raw = build_raw_online(engine, vocab, prompts, args.seed, bank=bank, on_run=on_run)
        log.info("# %s", provenance(args, vocab, prompts=len(prompts)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        hrv = normalize_hrv(raw)
    for name in hrv.zero_rows:
        log.warning("concept %r was never selected; its HRV row is zero", name)
    _write(args.out, dumps_hrv(hrv))
    if args.per_timestep:
        _write(args.per_timestep, dumps_raw(raw))
    return 0


def cmd_order(args):
    hrv = load_hrv(args.hrv)
    perm = head_order(hrv, args.concept, args.direction)
    row = hrv.row(args.concept)
    rows = [(rank + 1, h + 1, float(row[h])) for rank, h in enumerate(perm)]
    _write(args.out, analysis.to_tsv(["rank", "head", "value"], rows,
                                     f"hrv={args.hrv} concept={args.concept} direction={args.direction}"))
    return 0


def _need_seed(args):
    if args.seed is None:
        raise UsageError(f"{args.command}: --seed is required for generation")


def _curve_prompts(args, vocab, concept):
    return read_prompts(args.prompts) if args.prompts else concept_prompts(vocab, concept)


def cmd_weaken(args):
    _need_seed(args)
    vocab = load_vocab(args)
    engine = make_engine(args, vocab)
    hrv = load_hrv(args.hrv)
    ks = _parse_ks(args.ks, hrv.H)
    curve = analysis.weakening_curve(engine, hrv, args.concept, args.direction, ks,
                                     make_scorer(args, engine, args.concept),
                                     _curve_prompts(args, vocab, args.concept), args.seed,
                                     factor=args.factor)
    rows = list(zip(curve.ks, curve.scores))
    _write(args.out, analysis.to_tsv(["k", "score"], rows,
                                     provenance(args, vocab, concept=args.concept,
                                                direction=args.direction, factor=args.factor)))
    return 0


def cmd_area(args):
    _need_seed(args)
    vocab = load_vocab(args)
    engine = make_engine(args, vocab)
    hrv = load_hrv(args.hrv)
    ks = _parse_ks(args.ks, hrv.H)
    seeds = list(range(1, args.random_orders + 1))
    concepts = args.concept or hrv.names
    header = ["concept", "hrv"] + [f"random-{s}" for s in seeds] + (["random-mean"] if seeds else [])
    rows = []
    for c in concepts:
        res = analysis.ordering_areas(engine, hrv, c, make_scorer(args, engine, c),
                                      _curve_prompts(args, vocab, c), args.seed, ks, seeds)
        rand = [res[f"random-{s}"] for s in seeds]
        rows.append([c, res["hrv"]] + rand + ([float(np.mean(rand))] if rand else []))
    _write(args.out, analysis.to_tsv(header, rows, provenance(args, vocab, ks=",".join(map(str, ks)))))
    return 0


def cmd_steer(args):
    _need_seed(args)
    vocab = load_vocab(args)
    engine = make_engine(args, vocab)
    hrv = load_hrv(args.hrv)
    if args.mode == "adjust" and not args.undesired:
        raise UsageError("steer --mode adjust needs --undesired")
    if args.mode == "strengthen" and args.undesired:
        raise UsageError("steer --mode strengthen takes no --undesired")
    r = rescaling_vector(hrv, args.desired, args.undesired)
    heads = [d.id for d in engine.enumerate_heads()]
    prompt = as_words(args.prompt)
    enc = engine.encode_text(prompt)
    spans = [enc.span_of(tok) for tok in args.token]
    base = engine.generate_with_hooks(prompt, args.seed)
    steered = engine.generate_with_hooks(prompt, args.seed, transform=rescale_hook(heads, spans, r))
    rows = []
    if hasattr(engine, "score_planted"):
        for c in [args.desired] + ([args.undesired] if args.undesired else []):
            rows.append([c, engine.score_planted(base, c), engine.score_planted(steered, c)])
    _write(args.out, analysis.to_tsv(["concept", "baseline", "steered"], rows,
                                     provenance(args, vocab, mode=args.mode, token=",".join(args.token))))
    if args.dump_latent:
        _write(args.dump_latent, analysis.to_tsv([f"f{i}" for i in range(steered.final.shape[1])],
                                                 steered.final.tolist()))
    return 0


def cmd_edit(args):
    _need_seed(args)
    vocab = load_vocab(args)
    engine = make_engine(args, vocab)
    src, tgt = as_words(args.source_prompt), as_words(args.target_prompt)
    es, et = engine.encode_text(src), engine.encode_text(tgt)
    L = et.embeddings.shape[0]
    align = positional_alignment(src, tgt, es.spans, et.spans, L)
    edited = et.span_of(args.edited_token)
    if args.concept:
        if not args.hrv:
            raise UsageError("edit --concept needs --hrv")
        r = rescaling_vector(load_hrv(args.hrv), args.concept).r
    else:
        r = np.ones(len(engine.enumerate_heads()))
    sa_rate = args.sa_rate if args.sa_rate is not None else (0.9 if args.concept else 0.4)
    n_ca = replace_steps(args.tau_c, engine.T)
    n_sa = replace_steps(sa_rate, engine.T)

    def combine(h, t, ms, mt):
        return p2p_hrv_maps(ms, mt, t, n_ca, edited, float(r[h]), align)

    srun, trun = engine.generate_edit(src, tgt, args.seed, combine, n_sa)
    rows = []
    if hasattr(engine, "score_planted"):
        for c in ([args.concept] if args.concept else []):
            rows.append([c, engine.score_planted(srun, c), engine.score_planted(trun, c)])
    drift = float(np.abs(trun.final - srun.final).mean())
    _write(args.out, analysis.to_tsv(["concept", "source", "edited"], rows,
                                     provenance(args, vocab, tau_c=args.tau_c, sa_rate=sa_rate,
                                                latent_drift=drift)))
    if args.dump_latent:
        _write(args.dump_latent, analysis.to_tsv([f"f{i}" for i in range(trun.final.shape[1])],
                                                 trun.final.tolist()))
    return 0


def cmd_stats(args):
    traces = load_traces(args.trace)
    st = analysis.scale_stats([(tr.captures, tr.bank, tr.T, tr.sampler_seed) for tr in traces])
    heads = traces[0].heads
    rows = [(str(d.id), float(m), float(s)) for d, m, s in zip(heads, st.mean, st.std)]
    _write(args.out, analysis.to_tsv(["head", "mean", "std"], rows,
                                     f"traces={len(traces)} samples={st.samples} "
                                     f"max-min-ratio={st.max_min_ratio!r}"))
    return 0


def cmd_timesteps(args):
    if args.raw:
        raw = loads_raw(_read_text(args.raw), args.raw)
    elif args.trace:
        raw = build_raw_from_traces(load_traces(args.trace))
    else:
        raise UsageError("timesteps needs --raw or --trace")
    concept_vecs, step_vecs = analysis.timestep_vectors(raw, normalize=not args.counts)
    cc, keep_c = analysis.cosine_matrix(concept_vecs)
    tc, keep_t = analysis.cosine_matrix(step_vecs)
    H = raw.H
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from None
    prov = f"N={raw.N} T={raw.T} H={H} U={raw.updates} normalized={not args.counts}"
    hdr = ["vector"] + [f"h{h + 1}" for h in range(H)]
    _write(out / "concept_vectors.tsv",
           analysis.to_tsv(hdr, [[n] + list(v) for n, v in zip(raw.names, concept_vecs)], prov))
    _write(out / "timestep_vectors.tsv",
           analysis.to_tsv(hdr, [[f"t{t}"] + list(v) for t, v in enumerate(step_vecs)], prov))
    cn = [raw.names[i] for i in keep_c]
    _write(out / "concept_cosine.tsv",
           analysis.to_tsv(["concept"] + cn, [[n] + list(r) for n, r in zip(cn, cc)], prov))
    tn = [f"t{i}" for i in keep_t]
    _write(out / "timestep_cosine.tsv",
           analysis.to_tsv(["timestep"] + tn, [[n] + list(r) for n, r in zip(tn, tc)], prov))
    return 0


def cmd_info(args):
    hrv = load_hrv(args.hrv)
    lines = [f"file\t{args.hrv}", f"N\t{hrv.N}", f"H\t{hrv.H}",
             f"zero_rows\t{','.join(hrv.zero_rows) or '-'}", "concept\tl1\ttop_heads"]
    for name, row in zip(hrv.names, hrv.values):
        top = head_order(hrv, name, MORHF)[: args.top]
        lines.append(f"{name}\t{float(np.abs(row).sum())!r}\t{','.join(str(h + 1) for h in top)}")
    _write(args.out, "\n".join(lines) + "\n")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _engine_flags(p, seed=True):
    p.add_argument("--engine", default="toy", help="'toy' or MODULE:FACTORY")
    p.add_argument("--config", help="toy engine key=value config file")
    p.add_argument("--vocab", help="concept vocabulary TSV (default: shipped 34 concepts)")
    p.add_argument("--add-concept", action="append", metavar="NAME=W1,W2",
                   help="append a concept to the vocabulary")
    p.add_argument("--plant", action="append", metavar="CONCEPT=L.H,L.H",
                   help="plant toy heads for a concept")
    p.add_argument("--gain", type=float, default=10.0, help="planting gain")
    if seed:
        p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hrv", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="construct HRVs online or from traces")
    _engine_flags(p)
    p.add_argument("--prompts", help="prompt file, one prompt per line")
    p.add_argument("--n-prompts", type=int, default=50, help="seeded toy prompts when --prompts is absent")
    p.add_argument("--trace", action="append", help="ATRACE/1 file or directory (repeatable)")
    p.add_argument("--write-traces", metavar="DIR", help="also store one trace per run")
    p.add_argument("--per-timestep", metavar="FILE", help="dump the raw N x T x H count tensor")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("order", help="head permutation for a concept")
    p.add_argument("--hrv", required=True)
    p.add_argument("--concept", required=True)
    p.add_argument("--direction", choices=[MORHF, LERHF], default=MORHF)
    p.add_argument("--out")
    p.set_defaults(func=cmd_order)

    for name, fn, hlp in (("weaken", cmd_weaken, "ordered-weakening curve"),
                          ("area", cmd_area, "LeRHF-MoRHF areas vs random orders")):
        p = sub.add_parser(name, help=hlp)
        _engine_flags(p)
        p.add_argument("--hrv", required=True)
        p.add_argument("--prompts")
        p.add_argument("--ks", help="comma-separated weakening counts, or 'all'")
        p.add_argument("--scorer", default="planted", help="'planted' or MODULE:FUNC")
        p.add_argument("--out")
        if name == "weaken":
            p.add_argument("--concept", required=True)
            p.add_argument("--direction", choices=[MORHF, LERHF], default=MORHF)
            p.add_argument("--factor", type=float, default=WEAKEN_FACTOR)
        else:
            p.add_argument("--concept", action="append")
            p.add_argument("--random-orders", type=int, default=3)
        p.set_defaults(func=fn)

    p = sub.add_parser("steer", help="concept strengthening / adjusting on one prompt")
    _engine_flags(p)
    p.add_argument("--hrv", required=True)
    p.add_argument("--mode", choices=["strengthen", "adjust"], required=True)
    p.add_argument("--desired", required=True)
    p.add_argument("--undesired")
    p.add_argument("--token", action="append", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--dump-latent")
    p.add_argument("--out")
    p.set_defaults(func=cmd_steer)

    p = sub.add_parser("edit", help="P2P / P2P-HRV edit between two prompts")
    _engine_flags(p)
    p.add_argument("--source-prompt", required=True)
    p.add_argument("--target-prompt", required=True)
    p.add_argument("--edited-token", required=True)
    p.add_argument("--hrv")
    p.add_argument("--concept", help="strengthen this concept on the edited token")
    p.add_argument("--tau-c", type=float, default=0.6)
    p.add_argument("--sa-rate", type=float, default=None,
                   help="default 0.9 with --concept, 0.4 without")
    p.add_argument("--dump-latent")
    p.add_argument("--out")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("stats", help="per-head logit scale statistics from traces")
    p.add_argument("--trace", action="append", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("timesteps", help="per-timestep vectors and cosine matrices")
    p.add_argument("--raw")
    p.add_argument("--trace", action="append")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--counts", action="store_true",
                   help="average raw counts instead of per-timestep normalized HRVs")
    p.set_defaults(func=cmd_timesteps)

    p = sub.add_parser("info", help="summarize an HRV/1 file")
    p.add_argument("--hrv", required=True)
    p.add_argument("--top", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_info)
    return ap


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except HookContractError as exc:
        print(f"hrv: {exc}", file=sys.stderr)
        return 4
    except DataError as exc:
        print(f"hrv: {exc}", file=sys.stderr)
        return 3
    except (PreconditionError, HRVError) as exc:
        print(f"hrv {args.command}: {exc}", file=sys.stderr)
        return 2


def main(argv=None):
    sys.exit(run(argv))
