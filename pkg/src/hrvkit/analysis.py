"""Experiment runners and metrics over HRVs: ordered-weakening curves,
LeRHF-MoRHF areas, per-timestep vectors, cosine matrices and per-head
logit-scale statistics.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels
from .adapter import derive_seed
from .core import (LERHF, MORHF, HRVMatrix, KeyBank, RawHRVTensor, assemble_candidate_keys,
                   head_order, make_sampler)
from .errors import HRVError, PreconditionError
from .steering import WEAKEN_FACTOR, WeakenPlan, weakening_hook

RANDOM_ORDER_SEEDS = (1, 2, 3)


@dataclass
class WeakeningCurve:
    ks: list[int]
    scores: list[float]
    direction: str
    concept: str

    def __post_init__(self):
        if len(self.ks) != len(self.scores):
            raise PreconditionError("ks and scores differ in length")


class ScorerError(HRVError):
    pass


def default_ks(H: int, points: int = 13) -> list[int]:
    """Evenly spaced weakening counts, always including 0 and H."""
    return sorted({int(round(x)) for x in np.linspace(0, H, min(points, H + 1))})


def random_order(H: int, seed: int) -> list[int]:
    return [int(i) for i in np.random.default_rng(seed).permutation(H)]


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("HRV_THREADS", "1")))
    except ValueError:
        return 1


def weakening_curve(adapter, hrv: Optional[HRVMatrix], concept: str, direction: str,
                    ks: Sequence[int], scorer: Callable, prompts, seed: int,
                    order: Optional[Sequence[int]] = None,
                    factor: float = WEAKEN_FACTOR) -> WeakeningCurve:
    """Mean score over ``prompts`` after weakening the first k heads of an order.

    The order comes from ``head_order(hrv, concept, direction)`` unless an
    explicit MoRHF-style ``order`` is given, in which case LeRHF uses its
    reverse.
    """
    ks = [int(k) for k in ks]
    if ks != sorted(ks):
        raise PreconditionError("ks must be ascending")
    heads = [d.id for d in adapter.enumerate_heads()]
    H = len(heads)
    if order is None:
        perm = head_order(hrv, concept, direction)
    else:
        perm = list(order) if direction == MORHF else list(order)[::-1]
    if len(perm) != H:
        raise PreconditionError(f"order covers {len(perm)} heads, adapter has {H}")
    prompts = list(prompts)
    encs = [adapter.encode_text(p) for p in prompts]

    def cell(job):
        k, i = job
        plan = WeakenPlan(tuple(perm), k, factor)
        gseed = derive_seed(seed, i)
        run = adapter.generate_with_hooks(prompts[i], gseed,
                                          transform=weakening_hook(heads, encs[i].semantic_mask, plan))
        try:
            return float(scorer(run))
        except Exception as exc:
            raise ScorerError(f"scorer failed on prompt {i} at k={k}: {exc}") from exc

    jobs = [(k, i) for k in ks for i in range(len(prompts))]
    workers = _workers()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            vals = list(ex.map(cell, jobs))
    else:
        vals = [cell(j) for j in jobs]
    n = len(prompts)
    scores = [float(np.mean(vals[j * n:(j + 1) * n])) for j in range(len(ks))]
    return WeakeningCurve(ks, scores, direction, concept)


def area_between(curve_le: WeakeningCurve, curve_mo: WeakeningCurve, H: Optional[int] = None) -> float:
    """Trapezoid area of (LeRHF - MoRHF) over k rescaled to [0, 1], times 100."""
    if list(curve_le.ks) != list(curve_mo.ks):
        raise PreconditionError("curves were evaluated on different k grids")
    ks = np.asarray(curve_le.ks, dtype=np.float64)
    if H is None:
        H = ks[-1]
    x = ks / H
    y = np.asarray(curve_le.scores) - np.asarray(curve_mo.scores)
    return float(100.0 * np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


def ordering_areas(adapter, hrv: HRVMatrix, concept: str, scorer, prompts, seed: int,
                   ks: Optional[Sequence[int]] = None,
                   random_seeds: Sequence[int] = RANDOM_ORDER_SEEDS) -> dict[str, float]:
    """HRV-ordered area next to areas for seeded random orders."""
    H = hrv.H
    ks = default_ks(H) if ks is None else ks
    out = {}
    mo = weakening_curve(adapter, hrv, concept, MORHF, ks, scorer, prompts, seed)
    le = weakening_curve(adapter, hrv, concept, LERHF, ks, scorer, prompts, seed)
    out["hrv"] = area_between(le, mo, H)
    for s in random_seeds:
        perm = random_order(H, s)
        mo = weakening_curve(adapter, None, concept, MORHF, ks, scorer, prompts, seed, order=perm)
        le = weakening_curve(adapter, None, concept, LERHF, ks, scorer, prompts, seed, order=perm)
        out[f"random-{s}"] = area_between(le, mo, H)
    return out


def per_timestep_hrvs(raw: RawHRVTensor) -> np.ndarray:
    """N x T x H tensor where every non-zero (concept, timestep) row has L1 norm H."""
    c = raw.counts.astype(np.float64)
    norms = c.sum(axis=2, keepdims=True)
    out = np.zeros_like(c)
    np.divide(c * raw.H, norms, out=out, where=norms > 0)
    return out


def timestep_vectors(raw: RawHRVTensor, normalize: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """(N x H mean over timesteps, T x H mean over concepts).

    On raw counts every timestep vector is the constant U/N, because each
    (t, h) cell gets exactly U votes. ``normalize=True`` first turns each
    (concept, timestep) slice into its own HRV, which is what makes
    timestep vectors comparable to each other.
    """
    c = per_timestep_hrvs(raw) if normalize else raw.counts.astype(np.float64)
    return c.mean(axis=1), c.mean(axis=0)


def cosine_matrix(vectors) -> tuple[np.ndarray, list[int]]:
    """Pairwise cosine similarities of the non-zero vectors.

    Returns the matrix and the indices of the vectors it covers; zero
    vectors are left out.
    """
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2:
        raise PreconditionError("expected a list of equal-length vectors")
    norms = np.linalg.norm(v, axis=1)
    keep = [i for i in range(len(v)) if norms[i] > 0]
    if not keep:
        raise PreconditionError("all vectors are zero")
    u = v[keep] / norms[keep, None]
    m = u @ u.T
    m = (m + m.T) / 2.0
    return m, keep


@dataclass
class ScaleStats:
    mean: np.ndarray
    std: np.ndarray
    samples: int

    @property
    def max_min_ratio(self) -> float:
        return float(self.mean.max() / self.mean.min())


def logit_scale(Q, K, d) -> float:
    """Mean absolute entry of the pre-softmax logits ``Q K^T / sqrt(d)``."""
    return kernels.logit_abs_mean(Q, K, 1.0 / np.sqrt(d))


def scale_stats(runs: Sequence[tuple[dict, KeyBank, int, int]]) -> ScaleStats:
    """Per-head mean and std of the logit scale over all (run, t).

    Each run is ``(captures, bank, T, sampler_seed)``; candidate keys are
    re-sampled with the same walk as HRV accumulation.
    """
    if not runs:
        raise PreconditionError("no captures")
    per_head = None
    for captures, bank, T, sseed in runs:
        if per_head is None:
            per_head = [[] for _ in range(bank.H)]
        rng = make_sampler(sseed)
        for t in range(T):
            for h in range(bank.H):
                cand = assemble_candidate_keys(bank, h, rng)
                per_head[h].append(logit_scale(captures[(t, h)], cand.matrix, bank.proj_dims[h]))
    a = np.array(per_head)
    return ScaleStats(a.mean(axis=1), a.std(axis=1), a.shape[1])


def to_tsv(header: Sequence[str], rows, provenance: Optional[str] = None) -> str:
    lines = []
    if provenance:
        lines.append("# " + provenance)
    lines.append("\t".join(header))
    for r in rows:
        lines.append("\t".join(repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)
                               for x in r))
    return "\n".join(lines) + "\n"
