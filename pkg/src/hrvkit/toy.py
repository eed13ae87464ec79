"""Deterministic miniature cross-attention generator.

No noise schedule and no learned denoiser: a latent of R^2 positions
by F features is nudged by the head-averaged, value-weighted output of
every cross-attention head for T steps. Heads can be "planted" so that
their keys align with one concept, which gives ground truth for HRV
recovery and weakening experiments.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .adapter import (AttentionAdapter, GenerationRun, HeadDesc, Transform,
                      check_transform_output)
from .core import CAMap, HeadId, softmax_ca_map
from .errors import DataError, PreconditionError, UnknownConceptError
from .steering import TokenSpan
from .vocab import ConceptVocabulary, Word

SOT = "<|startoftext|>"
EOT = "<|endoftext|>"

FILLER_WORDS = ["a", "photo", "of", "the", "with", "scene", "picture", "view", "in", "an"]


@dataclass(frozen=True)
class ToyConfig:
    F: int = 16
    L: int = 8
    R: int = 4
    layers: int = 3
    heads_per_layer: int = 4
    T: int = 5
    eta: float = 0.1
    master_seed: int = 0
    query_bias: float = 0.5
    value_noise: float = 0.3

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name != "master_seed" and not v > 0:
                raise PreconditionError(f"ToyConfig.{f.name} must be positive, got {v}")
        if self.L < 3:
            raise PreconditionError("ToyConfig.L must leave room for start/end tokens")

    @property
    def H(self) -> int:
        return self.layers * self.heads_per_layer

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text: str, source: str = "<string>") -> "ToyConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            key = key.strip()
            if not sep or key not in types:
                raise DataError(f"{source}:{lineno}: unknown or malformed entry {line!r}")
            try:
                kw[key] = float(val) if types[key] in (float, "float") else int(val)
            except ValueError:
                raise DataError(f"{source}:{lineno}: bad value for {key}") from None
        try:
            return cls(**kw)
        except PreconditionError as exc:
            raise DataError(f"{source}: {exc}") from None

    @classmethod
    def load(cls, path) -> "ToyConfig":
        try:
            return cls.from_text(Path(path).read_text(encoding="utf-8"), str(path))
        except OSError as exc:
            raise DataError(f"cannot read config {path}: {exc}") from None


@dataclass(frozen=True)
class PlantSpec:
    assignments: tuple[tuple[HeadId, str, float], ...]

    def __post_init__(self):
        heads = [a[0] for a in self.assignments]
        if len(set(heads)) != len(heads):
            raise PreconditionError("a head can be planted for only one concept")

    @classmethod
    def disjoint(cls, heads_by_concept: dict[str, Sequence[HeadId]], gain: float = 10.0):
        return cls(tuple((h, c, gain) for c, hs in heads_by_concept.items() for h in hs))


@dataclass
class TextEncoding:
    words: list[Word]
    embeddings: np.ndarray
    semantic_mask: np.ndarray
    spans: list[TokenSpan]

    def span_of(self, text: str) -> TokenSpan:
        for w, s in zip(self.words, self.spans):
            if w.text == text:
                return s
        raise PreconditionError(f"token {text!r} not in prompt {' '.join(w.text for w in self.words)!r}")


def _text_seed(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


@lru_cache(maxsize=65536)
def _token_embedding(text: str, F: int) -> np.ndarray:
    v = np.random.default_rng(_text_seed(text)).standard_normal(F)
    v /= np.linalg.norm(v)
    v.setflags(write=False)
    return v


def token_texts(word: Word) -> list[str]:
    if word.n_tokens == 1:
        return [word.text]
    return [f"{word.text}#{k}" for k in range(word.n_tokens)]


def as_words(prompt) -> list[Word]:
    if isinstance(prompt, str):
        prompt = prompt.split()
    return [w if isinstance(w, Word) else Word.parse(w) for w in prompt]


class ToyEngine(AttentionAdapter):
    """Adapter implementation with F=16, R=4, 3x4 heads and T=5 by default."""

    def __init__(self, config: Optional[ToyConfig] = None,
                 vocab: Optional[ConceptVocabulary] = None):
        self.config = config or ToyConfig()
        self.vocab = vocab
        cfg = self.config
        self.T = cfg.T
        self._heads = [HeadDesc(HeadId(l, h), cfg.F, cfg.F, cfg.R)
                       for l in range(cfg.layers) for h in range(cfg.heads_per_layer)]
        self.Wq, self.Wk, self.Wv, self.bias = [], [], [], []
        F = cfg.F
        for d in self._heads:
            rng = np.random.default_rng([cfg.master_seed, d.id.layer, d.id.head])
            self.Wq.append(rng.standard_normal((F, F)) / np.sqrt(F))
            self.Wk.append(rng.standard_normal((F, F)) / np.sqrt(F))
            self.Wv.append(np.eye(F) + cfg.value_noise * rng.standard_normal((F, F)) / np.sqrt(F))
            b = rng.standard_normal(F)
            self.bias.append(cfg.query_bias * b / np.linalg.norm(b))
        self.planted: dict[HeadId, str] = {}

    # -- adapter contract -------------------------------------------------

    def enumerate_heads(self) -> list[HeadDesc]:
        return list(self._heads)

    @property
    def head_ids(self) -> list[HeadId]:
        return [d.id for d in self._heads]

    def flat(self, head: HeadId) -> int:
        cfg = self.config
        if not (0 <= head.layer < cfg.layers and 0 <= head.head < cfg.heads_per_layer):
            raise PreconditionError(f"no head {head} in a {cfg.layers}x{cfg.heads_per_layer} engine")
        return head.layer * cfg.heads_per_layer + head.head

    def encode_text(self, words) -> TextEncoding:
        """Context-free toy text encoder: slot 0 start, semantic tokens, end-token fill."""
        cfg = self.config
        words = as_words(words)
        texts, spans = [], []
        for w in words:
            start = 1 + len(texts)
            texts.extend(token_texts(w))
            spans.append(TokenSpan(start, 1 + len(texts), w.text))
        if len(texts) > cfg.L - 2:
            raise DataError(f"prompt has {len(texts)} semantic tokens, at most {cfg.L - 2} fit")
        emb = np.empty((cfg.L, cfg.F))
        emb[0] = _token_embedding(SOT, cfg.F)
        for i, tx in enumerate(texts):
            emb[1 + i] = _token_embedding(tx, cfg.F)
        emb[1 + len(texts):] = _token_embedding(EOT, cfg.F)
        mask = np.zeros(cfg.L, dtype=bool)
        mask[1:1 + len(texts)] = True
        return TextEncoding(words, emb, mask, spans)

    def project_keys(self, head: HeadId, rows) -> np.ndarray:
        return np.asarray(rows) @ self.Wk[self.flat(head)]

    def initial_latent(self, seed: int) -> np.ndarray:
        cfg = self.config
        return np.random.default_rng(int(seed)).standard_normal((cfg.R * cfg.R, cfg.F))

    def queries(self, z, h: int) -> np.ndarray:
        return z @ self.Wq[h] + self.bias[h]

    def prompt_kv(self, enc: TextEncoding):
        return ([enc.embeddings @ Wk for Wk in self.Wk], [enc.embeddings @ Wv for Wv in self.Wv])

    def head_maps(self, z, enc: TextEncoding, kv=None) -> list[CAMap]:
        K, _ = kv or self.prompt_kv(enc)
        d = self.config.F
        return [softmax_ca_map(self.queries(z, h), K[h], d) for h in range(len(self._heads))]

    def generate_with_hooks(self, prompt, seed: int, transform: Optional[Transform] = None,
                            capture: bool = False,
                            guidance: Optional[Callable] = None) -> GenerationRun:
        """Run T latent updates.

        ``transform(head_id, t, map)`` sees each head's row-stochastic map
        before value weighting. ``guidance(t, z, engine, enc)`` may replace
        the latent before step ``t`` (used by A&E-HRV).
        """
        enc = self.encode_text(prompt)
        if not enc.words:
            raise PreconditionError("prompt must be non-empty")
        cfg = self.config
        K, V = self.prompt_kv(enc)
        H = len(self._heads)
        z = self.initial_latent(seed)
        traj = [z]
        caps = {}
        for t in range(cfg.T):
            if guidance is not None:
                z = np.asarray(guidance(t, z, self, enc), dtype=np.float64)
                if z.shape != traj[0].shape:
                    raise PreconditionError("guidance returned a latent of the wrong shape")
            upd = np.zeros_like(z)
            for h in range(H):
                Q = self.queries(z, h)
                if capture:
                    caps[(t, h)] = Q
                m = softmax_ca_map(Q, K[h], cfg.F)
                if transform is not None:
                    vals = check_transform_output(transform(self._heads[h].id, t, m),
                                                  m.values.shape, t, self._heads[h].id)
                else:
                    vals = m.values
                upd += vals @ V[h]
            z = z + cfg.eta * (upd / H)
            traj.append(z)
        return GenerationRun(enc.words, int(seed), cfg.T, traj, caps)

    def generate_edit(self, source, target, seed: int,
                      combine: Callable[[int, int, CAMap, CAMap], CAMap],
                      sa_steps: int = 0) -> tuple[GenerationRun, GenerationRun]:
        """Source and target branches from one initial latent.

        ``combine(h, t, m_src, m_tgt)`` yields the map the target branch
        uses. For the first ``sa_steps`` steps the target's queries are
        computed from the source latent, the toy stand-in for
        self-attention injection.
        """
        cfg = self.config
        es, et = self.encode_text(source), self.encode_text(target)
        Ks, Vs = self.prompt_kv(es)
        Kt, Vt = self.prompt_kv(et)
        H = len(self._heads)
        zs = zt = self.initial_latent(seed)
        trs, trt = [zs], [zt]
        for t in range(cfg.T):
            us, ut = np.zeros_like(zs), np.zeros_like(zt)
            qsrc = zs if t < sa_steps else zt
            for h in range(H):
                ms = softmax_ca_map(self.queries(zs, h), Ks[h], cfg.F)
                mt = softmax_ca_map(self.queries(qsrc, h), Kt[h], cfg.F)
                vals = check_transform_output(combine(h, t, ms, mt), mt.values.shape, t,
                                              self._heads[h].id)
                us += ms.values @ Vs[h]
                ut += vals @ Vt[h]
            zs = zs + cfg.eta * (us / H)
            zt = zt + cfg.eta * (ut / H)
            trs.append(zs)
            trt.append(zt)
        return (GenerationRun(es.words, int(seed), cfg.T, trs),
                GenerationRun(et.words, int(seed), cfg.T, trt))

    # -- concept ground truth --------------------------------------------

    def _vocab(self) -> ConceptVocabulary:
        if self.vocab is None:
            raise PreconditionError("engine has no vocabulary")
        return self.vocab

    def concept_direction(self, concept: str) -> np.ndarray:
        """Unit mean of the concept's word (sub-)token embeddings."""
        c = self._vocab().concept(concept)
        rows = [_token_embedding(tx, self.config.F) for w in c.words for tx in token_texts(w)]
        u = np.mean(rows, axis=0)
        return u / np.linalg.norm(u)

    def score_planted(self, run: GenerationRun, concept: str) -> float:
        """Mean over spatial positions of <final latent, concept direction>."""
        u = self.concept_direction(concept)
        return float((run.final @ u).mean())


def plant_concept_head(engine: ToyEngine, spec: PlantSpec) -> ToyEngine:
    """Copy of ``engine`` whose planted heads key concept words along their query bias.

    The key projection gains ``alpha * outer(u_c, b_h / |b_h|)``, so a token
    embedding ``e`` picks up ``alpha * <e, u_c>`` along the head's query
    bias direction. Unplanted heads keep their parameters.
    """
    out = copy.copy(engine)
    out.Wk = list(engine.Wk)
    out.planted = dict(engine.planted)
    for head, concept, gain in spec.assignments:
        h = engine.flat(head)
        try:
            u = engine.concept_direction(concept)
        except UnknownConceptError:
            raise
        if gain == 0:
            continue
        b = engine.bias[h] / np.linalg.norm(engine.bias[h])
        out.Wk[h] = engine.Wk[h] + gain * np.outer(u, b)
        out.planted[head] = concept
    return out


def toy_prompts(vocab: ConceptVocabulary, n: int, seed: int, L: int = 8) -> list[list[Word]]:
    """Seeded filler-plus-concept-word prompts for HRV builds."""
    rng = np.random.default_rng(int(seed))
    budget = L - 2
    prompts = []
    for _ in range(n):
        words = [Word(FILLER_WORDS[int(i)]) for i in rng.choice(len(FILLER_WORDS), size=2, replace=False)]
        for _ in range(int(rng.integers(1, 3))):
            c = vocab.concepts[int(rng.integers(len(vocab)))]
            w = c.words[int(rng.integers(len(c.words)))]
            if sum(x.n_tokens for x in words) + w.n_tokens <= budget:
                words.append(w)
        prompts.append(words)
    return prompts


def concept_prompts(vocab: ConceptVocabulary, concept: str, templates=("a photo of {}", "the {}")):
    """Prompts mentioning each word of one concept, for weakening curves."""
    c = vocab.concept(concept)
    out = []
    for tpl in templates:
        pre, _, post = tpl.partition("{}")
        for w in c.words:
            out.append([Word(x) for x in pre.split()] + [w] + [Word(x) for x in post.split()])
    return out
