"""Boundary between HRV math and a diffusion pipeline.

An adapter enumerates its cross-attention heads, projects text
embeddings into per-head keys, and runs generations with an optional
CA-map transform and query capture. Runs can be written to ATRACE/1
traces and HRVs rebuilt from them without the model.
"""

from __future__ import annotations

import abc
import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import (CAMap, HeadId, KeyBank, RawHRVTensor, accumulate_captures, build_key_bank,
                   tree_merge)
from .errors import (DataError, PreconditionError, TraceChecksumError, TraceError,
                     TraceTruncatedError, TraceVersionError)
from .vocab import ConceptVocabulary, Word

Transform = Callable[[HeadId, int, CAMap], CAMap]

TRACE_TAG = "ATRACE/1"


@dataclass(frozen=True)
class HeadDesc:
    id: HeadId
    feature_dim: int
    projection_dim: int
    spatial_side: int

    def __post_init__(self):
        if min(self.feature_dim, self.projection_dim, self.spatial_side) <= 0:
            raise PreconditionError(f"head {self.id}: dimensions must be positive")


@dataclass
class GenerationRun:
    prompt: list[Word]
    seed: int
    T: int
    trajectory: list[np.ndarray]
    captures: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    @property
    def final(self) -> np.ndarray:
        return self.trajectory[-1]

    def same_as(self, other: "GenerationRun") -> bool:
        """Bitwise equality of prompt, seed, trajectory and captures."""
        return (self.prompt == other.prompt and self.seed == other.seed and self.T == other.T
                and len(self.trajectory) == len(other.trajectory)
                and all(np.array_equal(a, b) for a, b in zip(self.trajectory, other.trajectory))
                and self.captures.keys() == other.captures.keys()
                and all(np.array_equal(self.captures[k], other.captures[k]) for k in self.captures))


class AttentionAdapter(abc.ABC):
    """What a pipeline must provide for HRV construction and steering."""

    T: int

    @abc.abstractmethod
    def enumerate_heads(self) -> list[HeadDesc]:
        ...

    @abc.abstractmethod
    def encode_text(self, words: Sequence[Word | str]):
        """Token embeddings plus ``semantic_mask`` for a word list."""

    @abc.abstractmethod
    def project_keys(self, head: HeadId, rows: np.ndarray) -> np.ndarray:
        ...

    @abc.abstractmethod
    def generate_with_hooks(self, prompt: Sequence[Word | str], seed: int,
                            transform: Optional[Transform] = None,
                            capture: bool = False) -> GenerationRun:
        """Run T steps; ``transform`` and query capture apply to every (t, head).

        Pipelines with classifier-free guidance should capture and
        transform the conditional pass.
        """


def check_transform_output(out, shape, t, head):
    from .errors import HookContractError

    values = out.values if isinstance(out, CAMap) else None
    if values is None:
        raise HookContractError(t, head, f"expected a CAMap, got {type(out).__name__}")
    if values.shape != shape:
        raise HookContractError(t, head, f"map shape {values.shape}, expected {shape}")
    return values


def sd_v1_layout() -> list[HeadDesc]:
    """Cross-attention head layout of Stable Diffusion v1 (16 layers x 8 heads).

    Layers are ordered down blocks, mid block, up blocks; head width is
    channels / 8 at each resolution of a 64x64 latent.
    """
    res = [64, 64, 32, 32, 16, 16, 8, 16, 16, 16, 32, 32, 32, 64, 64, 64]
    width = {64: 40, 32: 80, 16: 160, 8: 160}
    return [HeadDesc(HeadId(layer, h), width[r], width[r], r)
            for layer, r in enumerate(res) for h in range(8)]


def derive_seed(base: int, *keys: int) -> int:
    ss = np.random.SeedSequence(entropy=int(base), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def prompt_seeds(seed: int, i: int) -> tuple[int, int]:
    """(generation seed, sampler seed) for prompt number ``i`` of a seeded build."""
    return derive_seed(seed, i, 0), derive_seed(seed, i, 1)


# --------------------------------------------------------------------------
# HRV builds
# --------------------------------------------------------------------------


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("HRV_THREADS", "1")))
    except ValueError:
        return 1


def build_raw_online(adapter: AttentionAdapter, vocab: ConceptVocabulary, prompts, seed: int,
                     bank: Optional[KeyBank] = None, workers: Optional[int] = None,
                     on_run: Optional[Callable[[int, GenerationRun, int], None]] = None
                     ) -> RawHRVTensor:
    """Generate every prompt with query capture and accumulate argmax votes.

    Workers get private tensors which are tree-merged, so the result does
    not depend on the worker count.
    """
    if bank is None:
        bank = build_key_bank(vocab, adapter, adapter)
    prompts = list(prompts)
    if not prompts:
        raise PreconditionError("no prompts")
    workers = workers or _threads()

    def one(i):
        gseed, sseed = prompt_seeds(seed, i)
        run = adapter.generate_with_hooks(prompts[i], gseed, capture=True)
        raw = accumulate_captures(run.captures, bank, run.T, sseed)
        if on_run is not None:
            on_run(i, run, sseed)
        return raw

    if workers == 1:
        raw = RawHRVTensor.zeros(vocab.names, adapter.T, bank.H)
        for i in range(len(prompts)):
            gseed, sseed = prompt_seeds(seed, i)
            run = adapter.generate_with_hooks(prompts[i], gseed, capture=True)
            accumulate_captures(run.captures, bank, run.T, sseed, raw)
            if on_run is not None:
                on_run(i, run, sseed)
        return raw
    with ThreadPoolExecutor(max_workers=workers) as ex:
        parts = list(ex.map(one, range(len(prompts))))
    return tree_merge(parts)


def build_raw_from_traces(traces: Sequence["Trace"]) -> RawHRVTensor:
    if not traces:
        raise PreconditionError("no traces")
    first = traces[0]
    raw = RawHRVTensor.zeros(first.bank.vocab.names, first.T, first.bank.H)
    for tr in traces:
        if tr.bank.vocab.fingerprint() != first.bank.vocab.fingerprint() or tr.T != first.T:
            raise DataError("traces come from different vocabularies or timestep counts")
        accumulate_captures(tr.captures, tr.bank, tr.T, tr.sampler_seed, raw)
    return raw


# --------------------------------------------------------------------------
# ATRACE/1
# --------------------------------------------------------------------------


@dataclass
class Trace:
    seed: int
    T: int
    sampler_seed: int
    prompt: list[Word]
    heads: list[HeadDesc]
    bank: KeyBank
    captures: dict[tuple[int, int], np.ndarray]

    @property
    def H(self) -> int:
        return len(self.heads)

    def __eq__(self, other):
        if not isinstance(other, Trace):
            return NotImplemented
        return (self.seed == other.seed and self.T == other.T
                and self.sampler_seed == other.sampler_seed and self.prompt == other.prompt
                and self.heads == other.heads and self.bank == other.bank
                and self.captures.keys() == other.captures.keys()
                and all(np.array_equal(self.captures[k], other.captures[k]) for k in self.captures))


def _hexrow(row) -> str:
    return " ".join(float(v).hex() for v in row)


def _checksum(body: bytes) -> str:
    return hashlib.blake2b(body, digest_size=8).hexdigest()


def write_trace(run: GenerationRun, bank: KeyBank, sampler_seed: int,
                heads: Sequence[HeadDesc]) -> bytes:
    """Serialize a captured run plus its key bank; all values as hex floats."""
    heads = list(heads)
    H = len(heads)
    missing = [(t, h) for t in range(run.T) for h in range(H) if (t, h) not in run.captures]
    if missing:
        raise DataError(f"run has no query captures for {len(missing)} (t, h) cells, e.g. {missing[0]}")
    out = [TRACE_TAG,
           f"seed={run.seed}",
           f"T={run.T}",
           f"sampler_seed={sampler_seed}",
           f"vocab={bank.vocab.fingerprint()}",
           "prompt=" + "\t".join(str(w) for w in run.prompt),
           f"heads={H}"]
    for d in heads:
        out.append(f"head {d.id.layer} {d.id.head} {d.feature_dim} {d.projection_dim} {d.spatial_side}")
    out.append(f"concepts={len(bank.vocab)}")
    for c in bank.vocab:
        out.append("concept\t" + c.name + "\t" + ",".join(str(w) for w in c.words))
    out.append("KEYS")
    words = bank.vocab.all_words()
    for h in range(H):
        for w in words:
            rows = bank.rows(h, w)
            out.append(f"key\t{h}\t{w.n_tokens}\t{w.text}")
            out.extend(_hexrow(r) for r in rows)
    out.append("QUERIES")
    for t in range(run.T):
        for h in range(H):
            Q = run.captures[(t, h)]
            out.append(f"q {t} {h} {Q.shape[0]}")
            out.extend(_hexrow(r) for r in Q)
    out.append("END")
    body = ("\n".join(out) + "\n").encode("utf-8")
    return body + f"checksum={_checksum(body)}\n".encode("ascii")


class _Lines:
    def __init__(self, lines):
        self.lines = lines
        self.i = 0

    def next(self) -> str:
        if self.i >= len(self.lines):
            raise TraceTruncatedError("trace ended unexpectedly")
        ln = self.lines[self.i]
        self.i += 1
        return ln

    def field(self, key):
        ln = self.next()
        k, sep, v = ln.partition("=")
        if not sep or k != key:
            raise TraceError(f"line {self.i}: expected '{key}=...', got {ln[:40]!r}")
        return v

    def floats(self, n, where):
        rows = []
        for _ in range(n):
            try:
                rows.append([float.fromhex(v) for v in self.next().split()])
            except ValueError:
                raise TraceError(f"line {self.i}: malformed value in {where}") from None
        return np.array(rows, dtype=np.float64)


def read_trace(data: bytes) -> Trace:
    """Inverse of :func:`write_trace`; verifies version, completeness and checksum."""
    first = data.split(b"\n", 1)[0]
    if first.rstrip(b"\r") != TRACE_TAG.encode():
        raise TraceVersionError(f"not an {TRACE_TAG} trace (first line {first[:20]!r})")
    cut = data.rfind(b"\nchecksum=")
    if cut < 0 or not data.endswith(b"\n"):
        raise TraceTruncatedError("trace has no trailing checksum")
    body, tail = data[: cut + 1], data[cut + 1:].decode("ascii", "replace").strip()
    if _checksum(body) != tail.partition("=")[2]:
        raise TraceChecksumError("trace checksum mismatch")
    try:
        text = body.decode("utf-8")
    except UnicodeDecodeError:
        raise TraceError("trace is not valid UTF-8") from None
    p = _Lines(text.split("\n")[:-1])
    p.next()
    try:
        seed = int(p.field("seed"))
        T = int(p.field("T"))
        sampler_seed = int(p.field("sampler_seed"))
        fingerprint = p.field("vocab")
        pv = p.field("prompt")
        prompt = [Word.parse(w) for w in pv.split("\t")] if pv else []
        H = int(p.field("heads"))
        heads = []
        for _ in range(H):
            parts = p.next().split()
            if parts[0] != "head" or len(parts) != 6:
                raise TraceError(f"line {p.i}: bad head descriptor")
            layer, head, F, d, R = map(int, parts[1:])
            heads.append(HeadDesc(HeadId(layer, head), F, d, R))
        nc = int(p.field("concepts"))
        entries = []
        for _ in range(nc):
            tag, name, ws = p.next().split("\t")
            if tag != "concept":
                raise TraceError(f"line {p.i}: expected concept entry")
            entries.append((name, [Word.parse(w) for w in ws.split(",")]))
    except (ValueError, IndexError) as exc:
        raise TraceError(f"malformed trace header near line {p.i}: {exc}") from None
    vocab = ConceptVocabulary(entries)
    if vocab.fingerprint() != fingerprint:
        raise TraceError("vocabulary fingerprint does not match stored concepts")
    if p.next() != "KEYS":
        raise TraceError(f"line {p.i}: expected KEYS section")
    words = vocab.all_words()
    keys = []
    for h in range(H):
        per = {}
        for w in words:
            parts = p.next().split("\t")
            if len(parts) != 4 or parts[0] != "key" or int(parts[1]) != h:
                raise TraceError(f"line {p.i}: bad key entry")
            kw = Word(parts[3], int(parts[2]))
            if kw != w:
                raise TraceError(f"line {p.i}: key for {kw} where {w} was expected")
            per[w] = p.floats(w.n_tokens, f"keys of {w.text!r}")
        keys.append(per)
    F = heads[0].feature_dim if heads else 0
    bank = KeyBank(vocab, [d.id for d in heads], [float(d.projection_dim) for d in heads], F, keys)
    if p.next() != "QUERIES":
        raise TraceError(f"line {p.i}: expected QUERIES section")
    captures = {}
    for t in range(T):
        for h in range(H):
            parts = p.next().split()
            if len(parts) != 4 or parts[0] != "q" or int(parts[1]) != t or int(parts[2]) != h:
                raise TraceError(f"line {p.i}: bad query header")
            captures[(t, h)] = p.floats(int(parts[3]), f"queries t={t} h={h}")
    if p.next() != "END":
        raise TraceError(f"line {p.i}: expected END")
    bank.validate()
    return Trace(seed, T, sampler_seed, prompt, heads, bank, captures)


def trace_from_run(run: GenerationRun, bank: KeyBank, sampler_seed: int,
                   heads: Sequence[HeadDesc]) -> Trace:
    return Trace(run.seed, run.T, sampler_seed, list(run.prompt), list(heads), bank,
                 dict(run.captures))
