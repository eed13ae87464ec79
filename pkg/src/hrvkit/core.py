"""HRV construction math: cross-attention maps, key banks, argmax accounting,
normalization, rescaling vectors and head orderings.

Nothing here touches a model. Query captures and key banks come in as
plain arrays; counts stay integer until :func:`normalize_hrv`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import total_ordering
from typing import Mapping, Optional, Sequence

import numpy as np

from . import kernels
from .errors import DataError, PreconditionError, UnknownConceptError
from .vocab import ConceptVocabulary, Word

MORHF = "morhf"
LERHF = "lerhf"


@total_ordering
@dataclass(frozen=True)
class HeadId:
    layer: int
    head: int

    def __post_init__(self):
        if self.layer < 0 or self.head < 0:
            raise PreconditionError(f"negative head id {self.layer}.{self.head}")

    def __lt__(self, other):
        return (self.layer, self.head) < (other.layer, other.head)

    def __str__(self):
        return f"L{self.layer}H{self.head}"


@dataclass
class CAMap:
    values: np.ndarray
    row_stochastic: bool = False

    @property
    def shape(self):
        return self.values.shape

    def copy(self) -> "CAMap":
        return CAMap(self.values.copy(), self.row_stochastic)


def softmax_ca_map(Q, K, d) -> CAMap:
    """Row-wise softmax of ``Q K^T / sqrt(d)``."""
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    if Q.ndim != 2 or K.ndim != 2:
        raise PreconditionError("Q and K must be 2-D")
    if Q.shape[0] == 0 or K.shape[0] == 0 or Q.shape[1] == 0:
        raise PreconditionError("Q and K must be non-empty")
    if Q.shape[1] != K.shape[1]:
        raise PreconditionError(f"feature mismatch: Q has {Q.shape[1]}, K has {K.shape[1]}")
    if not d > 0:
        raise PreconditionError("projection dimension d must be positive")
    logits = Q @ K.T / np.sqrt(d)
    logits -= logits.max(axis=1, keepdims=True)
    m = np.exp(logits)
    m /= m.sum(axis=1, keepdims=True)
    return CAMap(m, True)


# --------------------------------------------------------------------------
# key banks and candidate keys
# --------------------------------------------------------------------------


@dataclass
class KeyBank:
    """Semantic-token key rows for every (head, vocabulary word)."""

    vocab: ConceptVocabulary
    heads: list[HeadId]
    proj_dims: list[float]
    feature_dim: int
    keys: list[dict[Word, np.ndarray]]

    @property
    def H(self) -> int:
        return len(self.heads)

    def rows(self, h: int, word: Word) -> np.ndarray:
        try:
            return self.keys[h][word]
        except (IndexError, KeyError):
            raise DataError(f"key bank has no entry for word {word.text!r} at head {h}") from None

    def validate(self):
        for h, per_word in enumerate(self.keys):
            for w in self.vocab.all_words():
                r = self.rows(h, w)
                if r.shape != (w.n_tokens, self.feature_dim):
                    raise DataError(
                        f"word {w.text!r} at head {self.heads[h]}: rows {r.shape}, "
                        f"expected ({w.n_tokens}, {self.feature_dim})")

    def __eq__(self, other):
        if not isinstance(other, KeyBank):
            return NotImplemented
        if (self.vocab != other.vocab or self.heads != other.heads
                or self.proj_dims != other.proj_dims or self.feature_dim != other.feature_dim):
            return False
        return all(
            a.keys() == b.keys() and all(np.array_equal(a[w], b[w]) for w in a)
            for a, b in zip(self.keys, other.keys))


def build_key_bank(vocab: ConceptVocabulary, adapter, encoder) -> KeyBank:
    """Encode every vocabulary word alone, keep only its semantic-token rows,
    and push them through each head's key projection.

    ``adapter`` provides ``enumerate_heads()`` and ``project_keys(head_id, rows)``;
    ``encoder`` provides ``encode_text(words)`` returning an object with
    ``embeddings`` and ``semantic_mask``.
    """
    descs = adapter.enumerate_heads()
    words = vocab.all_words()
    semantic = {}
    for w in words:
        enc = encoder.encode_text([w])
        rows = np.asarray(enc.embeddings)[np.asarray(enc.semantic_mask, dtype=bool)]
        semantic[w] = rows
    keys = []
    for desc in descs:
        per = {}
        for w in words:
            rows = semantic[w]
            if rows.shape[0] < w.n_tokens:
                raise DataError(
                    f"word {w.text!r} encodes to {rows.shape[0]} semantic tokens at head "
                    f"{desc.id}, declared {w.n_tokens}")
            per[w] = np.ascontiguousarray(adapter.project_keys(desc.id, rows[: w.n_tokens]),
                                          dtype=np.float64)
        keys.append(per)
    feat = descs[0].feature_dim if descs else 0
    bank = KeyBank(vocab, [d.id for d in descs], [float(d.projection_dim) for d in descs], feat, keys)
    bank.validate()
    return bank


@dataclass
class CandidateKeys:
    matrix: np.ndarray
    segments: list[tuple[int, int]]
    words: list[Word] = field(default_factory=list)

    @property
    def bounds(self) -> np.ndarray:
        return np.array([s for s, _ in self.segments] + [self.segments[-1][1]], dtype=np.int64)


def make_sampler(seed: int) -> np.random.Generator:
    """Serializable concept-word sampler: its whole state is ``seed``."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def assemble_candidate_keys(bank: KeyBank, h: int, rng: np.random.Generator) -> CandidateKeys:
    """Sample one word per concept (uniformly, vocabulary order) and stack their key rows."""
    counts = np.array([len(c.words) for c in bank.vocab], dtype=np.int64)
    picks = rng.integers(0, counts)
    blocks, segments, words = [], [], []
    start = 0
    for c, i in zip(bank.vocab, picks):
        w = c.words[int(i)]
        r = bank.rows(h, w)
        blocks.append(r)
        segments.append((start, start + r.shape[0]))
        words.append(w)
        start += r.shape[0]
    return CandidateKeys(np.concatenate(blocks, axis=0), segments, words)


def select_concept(ca_map: CAMap, segments: Sequence[tuple[int, int]]) -> int:
    """Collapse each concept's token columns by mean, average over space, argmax.

    Ties go to the lowest concept index.
    """
    m = np.asarray(ca_map.values if isinstance(ca_map, CAMap) else ca_map)
    strengths = []
    for lo, hi in segments:
        if hi <= lo:
            raise PreconditionError(f"empty segment [{lo}, {hi})")
        if hi > m.shape[1]:
            raise PreconditionError(f"segment [{lo}, {hi}) exceeds {m.shape[1]} map columns")
        strengths.append(m[:, lo:hi].mean(axis=1).mean())
    return int(np.argmax(strengths))


# --------------------------------------------------------------------------
# raw counts and HRV matrices
# --------------------------------------------------------------------------


@dataclass
class RawHRVTensor:
    names: list[str]
    counts: np.ndarray
    updates: int = 0

    @classmethod
    def zeros(cls, names: Sequence[str], T: int, H: int) -> "RawHRVTensor":
        return cls(list(names), np.zeros((len(names), T, H), dtype=np.int64), 0)

    @property
    def shape(self):
        return self.counts.shape

    @property
    def N(self):
        return self.counts.shape[0]

    @property
    def T(self):
        return self.counts.shape[1]

    @property
    def H(self):
        return self.counts.shape[2]

    def __eq__(self, other):
        return (isinstance(other, RawHRVTensor) and self.names == other.names
                and self.updates == other.updates and np.array_equal(self.counts, other.counts))

    def check_conservation(self) -> bool:
        return bool(np.all(self.counts.sum(axis=0) == self.updates))


def hrv_update(raw: RawHRVTensor, h: int, t: int, n: int) -> RawHRVTensor:
    """Add one vote for concept ``n`` at (timestep ``t``, head ``h``), in place."""
    N, T, H = raw.counts.shape
    if not (0 <= n < N and 0 <= t < T and 0 <= h < H):
        raise PreconditionError(f"update index (n={n}, t={t}, h={h}) outside {raw.counts.shape}")
    raw.counts[n, t, h] += 1
    return raw


def merge_raw(a: RawHRVTensor, b: RawHRVTensor) -> RawHRVTensor:
    if a.counts.shape != b.counts.shape or a.names != b.names:
        raise PreconditionError(f"cannot merge {a.counts.shape} with {b.counts.shape}")
    return RawHRVTensor(list(a.names), a.counts + b.counts, a.updates + b.updates)


def tree_merge(parts: Sequence[RawHRVTensor]) -> RawHRVTensor:
    parts = list(parts)
    if not parts:
        raise PreconditionError("nothing to merge")
    while len(parts) > 1:
        nxt = [merge_raw(parts[i], parts[i + 1]) for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


def accumulate_captures(captures: Mapping[tuple[int, int], np.ndarray], bank: KeyBank, T: int,
                        sampler_seed: int, raw: Optional[RawHRVTensor] = None) -> RawHRVTensor:
    """One full sweep over (t, h) for a single generation run.

    Word sampling walks t ascending, then h in enumeration order, so an
    online build and a replay from a stored trace see the same draws.
    """
    if raw is None:
        raw = RawHRVTensor.zeros(bank.vocab.names, T, bank.H)
    if raw.shape != (len(bank.vocab), T, bank.H):
        raise PreconditionError(f"raw tensor {raw.shape} does not match bank/T")
    rng = make_sampler(sampler_seed)
    scales = [1.0 / np.sqrt(d) for d in bank.proj_dims]
    for t in range(T):
        for h in range(bank.H):
            try:
                Q = captures[(t, h)]
            except KeyError:
                raise DataError(f"missing query capture at t={t}, h={h}") from None
            cand = assemble_candidate_keys(bank, h, rng)
            n = kernels.fused_select(Q, cand.matrix, cand.bounds, scales[h])
            raw.counts[n, t, h] += 1
    raw.updates += 1
    return raw


@dataclass
class HRVMatrix:
    names: list[str]
    values: np.ndarray
    zero_rows: list[str] = field(default_factory=list)

    @property
    def H(self) -> int:
        return self.values.shape[1]

    @property
    def N(self) -> int:
        return self.values.shape[0]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise UnknownConceptError(name, self.names) from None

    def row(self, name: str) -> np.ndarray:
        return self.values[self.index(name)]

    def __eq__(self, other):
        return (isinstance(other, HRVMatrix) and self.names == other.names
                and np.array_equal(self.values, other.values))


def normalize_hrv(raw: RawHRVTensor) -> HRVMatrix:
    """Sum over timesteps, then scale every non-zero concept row to L1 norm H."""
    totals = raw.counts.sum(axis=1).astype(np.float64)
    H = raw.H
    norms = totals.sum(axis=1)
    values = np.zeros_like(totals)
    zero = []
    for n, name in enumerate(raw.names):
        if norms[n] == 0:
            zero.append(name)
            continue
        values[n] = totals[n] * (H / norms[n])
    if zero:
        warnings.warn(f"concepts never selected (zero HRV rows): {', '.join(zero)}", stacklevel=2)
    return HRVMatrix(list(raw.names), values, zero)


@dataclass(frozen=True)
class RescalingVector:
    r: np.ndarray
    desired: str
    undesired: Optional[str] = None

    @property
    def mode(self) -> str:
        return "strengthen" if self.undesired is None else "adjust"

    def __len__(self):
        return len(self.r)

    def __getitem__(self, h):
        return self.r[h]


def rescaling_vector(hrv: HRVMatrix, desired: str, undesired: Optional[str] = None) -> RescalingVector:
    """Strengthening uses the desired row as-is; adjusting uses 2*desired - undesired."""
    d = hrv.row(desired)
    if undesired is None:
        r = d.copy()
    else:
        r = 2.0 * d - hrv.row(undesired)
    if not np.all(np.isfinite(r)):
        raise DataError("rescaling vector has non-finite entries")
    return RescalingVector(r, desired, undesired)


def head_order(hrv: HRVMatrix, concept: str, direction: str) -> list[int]:
    """Flattened head indices, most relevant first (MoRHF) or least relevant first (LeRHF).

    Equal values keep ascending head order in both directions.
    """
    row = hrv.row(concept)
    idx = np.arange(len(row))
    direction = direction.lower()
    if direction == MORHF:
        order = np.lexsort((idx, -row))
    elif direction == LERHF:
        order = np.lexsort((idx, row))
    else:
        raise PreconditionError(f"direction must be {MORHF!r} or {LERHF!r}, got {direction!r}")
    return [int(i) for i in order]


# --------------------------------------------------------------------------
# HRV/1 and RAWHRV/1 text formats
# --------------------------------------------------------------------------


def dumps_hrv(hrv: HRVMatrix) -> str:
    lines = ["HRV/1", f"N={hrv.N} H={hrv.H}"]
    for name, row in zip(hrv.names, hrv.values):
        if "\t" in name or "\n" in name:
            raise PreconditionError(f"concept name {name!r} contains TAB or newline")
        lines.append(name + "\t" + " ".join(float(v).hex() for v in row))
    return "\n".join(lines) + "\n"


def _parse_dims(line: str, keys: Sequence[str], where: str) -> dict[str, int]:
    try:
        parts = dict(p.split("=", 1) for p in line.split())
        return {k: int(parts[k]) for k in keys}
    except (ValueError, KeyError):
        raise DataError(f"{where}: bad dimension line {line!r}") from None


def loads_hrv(text: str, source: str = "<string>") -> HRVMatrix:
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    if not lines or lines[0].strip() != "HRV/1":
        raise DataError(f"{source}: not an HRV/1 file")
    if len(lines) < 2:
        raise DataError(f"{source}: missing dimension line")
    dims = _parse_dims(lines[1], ("N", "H"), source)
    body = [ln for ln in lines[2:] if ln.strip()]
    if len(body) != dims["N"]:
        raise DataError(f"{source}: expected {dims['N']} rows, found {len(body)}")
    names, rows = [], []
    for i, ln in enumerate(body):
        if "\t" not in ln:
            raise DataError(f"{source}: row {i + 1} has no TAB separator")
        name, vals = ln.split("\t", 1)
        try:
            row = [float.fromhex(v) for v in vals.split()]
        except ValueError:
            raise DataError(f"{source}: row {i + 1} has a malformed value") from None
        if len(row) != dims["H"]:
            raise DataError(f"{source}: row {i + 1} has {len(row)} values, expected {dims['H']}")
        names.append(name)
        rows.append(row)
    values = np.array(rows, dtype=np.float64).reshape(dims["N"], dims["H"])
    zero = [n for n, r in zip(names, values) if not r.any()]
    return HRVMatrix(names, values, zero)


def dumps_raw(raw: RawHRVTensor) -> str:
    lines = ["RAWHRV/1", f"N={raw.N} T={raw.T} H={raw.H} U={raw.updates}"]
    for n, name in enumerate(raw.names):
        for t in range(raw.T):
            lines.append(f"{name}\t{t}\t" + " ".join(str(int(v)) for v in raw.counts[n, t]))
    return "\n".join(lines) + "\n"


def loads_raw(text: str, source: str = "<string>") -> RawHRVTensor:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines or lines[0] != "RAWHRV/1":
        raise DataError(f"{source}: not a RAWHRV/1 file")
    dims = _parse_dims(lines[1], ("N", "T", "H", "U"), source)
    N, T, H = dims["N"], dims["T"], dims["H"]
    if len(lines) - 2 != N * T:
        raise DataError(f"{source}: expected {N * T} rows")
    counts = np.zeros((N, T, H), dtype=np.int64)
    names = []
    for i, ln in enumerate(lines[2:]):
        try:
            name, t, vals = ln.split("\t")
            row = [int(v) for v in vals.split()]
        except ValueError:
            raise DataError(f"{source}: malformed row {i + 3}") from None
        n = i // T
        if int(t) != i % T or len(row) != H:
            raise DataError(f"{source}: row {i + 3} out of order or wrong width")
        if i % T == 0:
            names.append(name)
        counts[n, int(t)] = row
    return RawHRVTensor(names, counts, dims["U"])
