"""CA-map interventions: token rescaling, ordered weakening, P2P-HRV map
assembly and the A&E-HRV neglect loss.

Transforms never renormalize. Factors such as -2 leave the simplex, and
the maps are used as given for value weighting.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import CAMap, HeadId, RescalingVector
from .errors import AlignmentError, PreconditionError

WEAKEN_FACTOR = -2.0


@dataclass(frozen=True)
class TokenSpan:
    start: int
    stop: int
    label: str = ""

    def __post_init__(self):
        if self.start < 0 or self.stop <= self.start:
            raise PreconditionError(f"empty or negative token span [{self.start}, {self.stop})")

    @property
    def slots(self) -> range:
        return range(self.start, self.stop)


@dataclass(frozen=True)
class WeakenPlan:
    order: tuple[int, ...]
    k: int
    factor: float = WEAKEN_FACTOR

    def __post_init__(self):
        if not 0 <= self.k <= len(self.order):
            raise PreconditionError(f"k={self.k} outside [0, {len(self.order)}]")
        if sorted(self.order) != list(range(len(self.order))):
            raise PreconditionError("weakening order must be a permutation of head indices")

    @property
    def selected(self) -> frozenset:
        return frozenset(self.order[: self.k])


def _check_spans(spans, ncols):
    for s in spans:
        if s.stop > ncols:
            raise PreconditionError(f"span [{s.start}, {s.stop}) outside {ncols} map columns")


def apply_token_rescale(ca_map: CAMap, spans: Sequence[TokenSpan], r_h: float) -> CAMap:
    """Multiply the span columns by ``r_h``; every other column is untouched."""
    _check_spans(spans, ca_map.values.shape[1])
    if r_h == 1.0:
        return ca_map
    out = ca_map.values.copy()
    for s in spans:
        out[:, s.start:s.stop] *= r_h
    return CAMap(out, False)


def apply_ordered_weakening(ca_map: CAMap, semantic_mask, plan: WeakenPlan, h: int) -> CAMap:
    if h not in plan.selected:
        return ca_map
    mask = np.asarray(semantic_mask, dtype=bool)
    if mask.shape[0] != ca_map.values.shape[1]:
        raise PreconditionError("semantic mask length does not match map columns")
    out = ca_map.values.copy()
    out[:, mask] *= plan.factor
    return CAMap(out, ca_map.row_stochastic and plan.factor == 1.0)


def _flat_index(heads: Sequence[HeadId]):
    return {hid: i for i, hid in enumerate(heads)}


def rescale_hook(heads: Sequence[HeadId], spans: Sequence[TokenSpan], r: RescalingVector):
    """Transform callback applying ``r[h]`` to the target spans at every timestep."""
    flat = _flat_index(heads)
    if len(r) != len(flat):
        raise PreconditionError(f"rescaling vector has {len(r)} entries for {len(flat)} heads")

    def hook(head, t, ca_map):
        return apply_token_rescale(ca_map, spans, float(r[flat[head]]))
    return hook


def weakening_hook(heads: Sequence[HeadId], semantic_mask, plan: WeakenPlan):
    flat = _flat_index(heads)

    def hook(head, t, ca_map):
        return apply_ordered_weakening(ca_map, semantic_mask, plan, flat[head])
    return hook


# --------------------------------------------------------------------------
# P2P-HRV
# --------------------------------------------------------------------------


def replace_steps(tau_c: float, T: int) -> int:
    """Number of leading timesteps with CA replacement, from a fraction of T."""
    if not 0.0 <= tau_c <= 1.0:
        raise PreconditionError(f"tau_c must be a fraction in [0, 1], got {tau_c}")
    return int(round(tau_c * T))


def positional_alignment(source_words, target_words, source_spans, target_spans,
                         ncols: int) -> np.ndarray:
    """Target column -> source column for equal-shape prompts.

    Prompts must have the same number of words and each aligned word pair
    the same sub-token count; anything else is rejected.
    """
    if len(source_words) != len(target_words):
        raise AlignmentError(
            f"prompts differ in length: {len(source_words)} vs {len(target_words)} words")
    for a, b in zip(source_spans, target_spans):
        if (a.stop - a.start) != (b.stop - b.start):
            raise AlignmentError(f"word {a.label!r} and {b.label!r} differ in sub-token count")
    return np.arange(ncols)


def p2p_hrv_maps(m_src: CAMap, m_tgt: CAMap, t: int, n_replace: int, edited: TokenSpan,
                 r_h: float = 1.0, alignment: Optional[np.ndarray] = None) -> CAMap:
    """Assemble the map used for the target branch at (t, h).

    ``t`` is 0-based, so replacement covers ``t < n_replace``. During
    replacement the edited token keeps the target's own column, scaled by
    ``r_h``, and every other column comes from the aligned source column.
    Afterwards the target map is returned unchanged.
    """
    src = m_src.values
    tgt = m_tgt.values
    if src.shape[0] != tgt.shape[0]:
        raise AlignmentError("source and target maps have different spatial sizes")
    if alignment is None:
        if src.shape[1] != tgt.shape[1]:
            raise AlignmentError("maps differ in token count and no alignment was given")
        alignment = np.arange(tgt.shape[1])
    alignment = np.asarray(alignment)
    if alignment.shape != (tgt.shape[1],) or alignment.min() < 0 or alignment.max() >= src.shape[1]:
        raise AlignmentError("alignment must map every target column to a source column")
    _check_spans([edited], tgt.shape[1])
    if t >= n_replace:
        return m_tgt
    out = src[:, alignment].copy()
    out[:, edited.start:edited.stop] = r_h * tgt[:, edited.start:edited.stop]
    return CAMap(out, False)


def p2p_case(t: int, n_replace: int, column: int, edited: TokenSpan) -> int:
    """Which branch of the P2P-HRV rule covers one (t, column) cell (1, 2 or 3)."""
    if t >= n_replace:
        return 3
    return 1 if edited.start <= column < edited.stop else 2


# --------------------------------------------------------------------------
# A&E-HRV
# --------------------------------------------------------------------------


def ae_hrv_loss(maps: Sequence[CAMap], target_spans: Sequence[TokenSpan],
                r: Optional[RescalingVector | Sequence[float]] = None) -> tuple[float, int]:
    """Neglect loss over per-head maps at one timestep.

    Target spans are rescaled per head by ``r``, heads are averaged, each
    span is collapsed to the mean of its columns and scored by its
    spatial maximum. Loss is the worst ``1 - strength``; the second value
    is the index of that most-neglected span.
    """
    if not target_spans:
        raise PreconditionError("A&E needs at least one target span")
    if not maps:
        raise PreconditionError("no attention maps")
    ncols = maps[0].values.shape[1]
    _check_spans(target_spans, ncols)
    if r is not None and len(r) != len(maps):
        raise PreconditionError(f"rescaling vector has {len(r)} entries for {len(maps)} heads")
    acc = np.zeros_like(maps[0].values)
    for h, m in enumerate(maps):
        v = m.values
        if r is not None:
            v = apply_token_rescale(m, target_spans, float(r[h])).values
        acc = acc + v
    acc /= len(maps)
    losses = [1.0 - float(acc[:, s.start:s.stop].mean(axis=1).max()) for s in target_spans]
    worst = int(np.argmax(losses))
    return losses[worst], worst


def ae_hrv_guidance(target_spans: Sequence[TokenSpan], r=None, step_size: float = 20.0,
                    steps: Optional[int] = None, eps: float = 1e-3):
    """Latent update used before each denoising step of an A&E-HRV run.

    The gradient of :func:`ae_hrv_loss` with respect to the latent is
    taken by central finite differences. ``steps`` limits guidance to the
    first timesteps (all of them when ``None``).
    """
    def guide(t, z, engine, enc):
        if steps is not None and t >= steps:
            return z

        z = np.array(z, dtype=np.float64)

        def loss_at(zz):
            return ae_hrv_loss(engine.head_maps(zz, enc), target_spans, r)[0]

        grad = np.zeros_like(z)
        flat = z.reshape(-1)
        g = grad.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = loss_at(z)
            flat[i] = old - eps
            down = loss_at(z)
            flat[i] = old
            g[i] = (up - down) / (2 * eps)
        return z - step_size * grad
    return guide
