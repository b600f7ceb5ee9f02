"""Fringe pattern synthesis and phase recovery.

A scan projects ``N`` phase-shifted cosine column patterns

    I_n(u) = 0.5 + 0.5 cos(2 pi n_s u / w + 2 pi n / N),   n = 0..N-1

plus ``ceil(log2 n_s) + 1`` binary patterns holding a reflected gray code of
the *half*-period index. The extra half-period bit makes the code
complementary: coarse-order bit edges sit either at wrapped-phase zero or at
the wrap boundary, so each pixel can consult whichever estimate is far from
its own boundary and single-pixel misalignment between the binary and cosine
captures cannot corrupt the fringe order.

Sign convention: wrapped phase is recovered as
``atan2(-sum I_n sin(2 pi n/N), sum I_n cos(2 pi n/N))`` so that the value
*increases* with projector column and absolute phase is
``wrapped + 2 pi K`` with fringe order ``K``.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .errors import InvalidConfig, ShapeMismatch
from .util import DTYPE, TWO_PI, as_f64, wrap_angle

# how far (in projector pixels) an encoded demand spreads into unwritten
# neighbors; covers the footprint of one camera pixel on a denser projector
_DILATE_STEPS = 3


def gray_encode(j):
    """Reflected gray code of non-negative integer array ``j``."""
    j = np.asarray(j)
    return j ^ (j >> 1)


def gray_decode(g):
    """Inverse of :func:`gray_encode` for arrays of code words."""
    out = np.asarray(g).astype(np.int64).copy()
    shift = 1
    # prefix XOR from the MSB via shift doubling; 64-bit fold covers all words
    while shift < 64:
        out ^= out >> shift
        shift <<= 1
    return out


def _gray_decode_bits(bits: np.ndarray) -> np.ndarray:
    """Decode stacked gray-code bit planes (B, ...) MSB-first to integers."""
    out = np.zeros(bits.shape[1:], dtype=np.int64)
    acc = np.zeros_like(out)
    for b in range(bits.shape[0]):
        acc ^= bits[b].astype(np.int64)
        out = (out << 1) | acc
    return out


def gray_bit_count(fringe_count: int) -> int:
    """Number of binary patterns needed for ``fringe_count`` fringe periods."""
    if fringe_count < 1:
        raise InvalidConfig(f"fringe_count must be >= 1, got {fringe_count}")
    if fringe_count == 1:
        return 1
    return int(math.ceil(math.log2(fringe_count))) + 1


@dataclass
class FringePatternSet:
    """Projector pattern stack: cosine shifts plus gray-code planes.

    Attributes
    ----------
    steps : int
        Number of phase-shift patterns ``N`` (>= 3).
    fringe_count : int
        Cosine periods across the pattern width, ``n_s``.
    width, height : int
        Projector resolution in pixels.
    shift_patterns : (N, H, W) tensor in [0, 1]
    gray_patterns : (G, H, W) tensor with values {0, 1}
    """

    steps: int
    fringe_count: int
    width: int
    height: int
    shift_patterns: torch.Tensor
    gray_patterns: torch.Tensor

    def __post_init__(self):
        if self.steps < 3:
            raise InvalidConfig(f"need at least 3 phase steps, got {self.steps}")
        if self.fringe_count < 1:
            raise InvalidConfig("fringe_count must be >= 1")
        exp_g = gray_bit_count(self.fringe_count)
        if tuple(self.shift_patterns.shape) != (self.steps, self.height, self.width):
            raise ShapeMismatch(
                f"shift pattern stack is {tuple(self.shift_patterns.shape)}, expected "
                f"{(self.steps, self.height, self.width)}"
            )
        if tuple(self.gray_patterns.shape) != (exp_g, self.height, self.width):
            raise ShapeMismatch(
                f"gray pattern stack is {tuple(self.gray_patterns.shape)}, expected "
                f"{(exp_g, self.height, self.width)}"
            )

    def check_invariants(self) -> None:
        sp = self.shift_patterns
        if float(sp.min()) < 0.0 or float(sp.max()) > 1.0:
            raise InvalidConfig("shift pattern intensities leave [0, 1]")
        gp = self.gray_patterns
        if not bool(((gp == 0.0) | (gp == 1.0)).all()):
            raise InvalidConfig("gray patterns must be binary")

    def stacked(self) -> torch.Tensor:
        """All patterns as one (N+G, H, W) tensor, shifts first."""
        return torch.cat([self.shift_patterns, self.gray_patterns], dim=0)


def generate_patterns(steps: int, fringe_count: int, width: int, height: int) -> FringePatternSet:
    """Build the canonical pattern set for a scan.

    Parameters
    ----------
    steps : int
        Phase-shift count ``N >= 3``.
    fringe_count : int
        Periods across the width; must divide ``width``.
    width, height : int
        Projector resolution.

    Returns
    -------
    FringePatternSet
        Cosine stack ``0.5 + 0.5 cos(2 pi n_s u / w + 2 pi n / N)`` and the
        complementary gray code of the half-period index
        ``floor(2 n_s u / w)``, MSB first.
    """
    if steps < 3:
        raise InvalidConfig(f"need at least 3 phase steps, got {steps}")
    if width < 1 or height < 1:
        raise InvalidConfig("pattern dimensions must be positive")
    if width % fringe_count != 0:
        raise InvalidConfig(
            f"width {width} is not divisible by fringe_count {fringe_count}"
        )
    u = np.arange(width, dtype=np.float64)
    theta = TWO_PI * fringe_count * u / width
    rows = []
    for n in range(steps):
        rows.append(0.5 + 0.5 * np.cos(theta + TWO_PI * n / steps))
    shift = np.stack(rows, axis=0)[:, None, :].repeat(height, axis=1)

    nbits = gray_bit_count(fringe_count)
    half_order = (2 * fringe_count * np.arange(width, dtype=np.int64)) // width
    code = gray_encode(half_order)
    planes = []
    for b in range(nbits - 1, -1, -1):
        planes.append(((code >> b) & 1).astype(np.float64))
    gray = np.stack(planes, axis=0)[:, None, :].repeat(height, axis=1)

    return FringePatternSet(
        steps=steps,
        fringe_count=fringe_count,
        width=width,
        height=height,
        shift_patterns=torch.from_numpy(shift),
        gray_patterns=torch.from_numpy(gray),
    )


@dataclass
class PhaseMap:
    """A per-pixel phase image with validity mask.

    ``kind`` is ``"wrapped"`` (values in (-pi, pi]) or ``"absolute"`` (values
    in [0, 2 pi n_s)). ``modulation`` holds the fringe contrast used for
    masking when the map came from captures. ``decode_failures`` counts pixels
    masked out by gray-code/phase disagreement during unwrapping.
    """

    values: torch.Tensor
    kind: str
    mask: torch.Tensor
    fringe_count: int
    modulation: Optional[torch.Tensor] = None
    decode_failures: int = 0

    def __post_init__(self):
        if self.kind not in ("wrapped", "absolute"):
            raise InvalidConfig(f"unknown phase kind {self.kind!r}")
        if self.values.shape != self.mask.shape:
            raise ShapeMismatch(
                f"phase {tuple(self.values.shape)} vs mask {tuple(self.mask.shape)}"
            )
        if self.fringe_count < 1:
            raise InvalidConfig("fringe_count must be >= 1")

    @property
    def shape(self):
        return tuple(self.values.shape)

    def check_invariants(self) -> None:
        vals = self.values[self.mask]
        if vals.numel() == 0:
            return
        if not bool(torch.isfinite(vals).all()):
            raise InvalidConfig("masked-in phase values must be finite")
        lo = float(vals.min())
        hi = float(vals.max())
        if self.kind == "wrapped":
            if lo <= -math.pi - 1e-9 or hi > math.pi + 1e-9:
                raise InvalidConfig(f"wrapped phase outside (-pi, pi]: [{lo}, {hi}]")
        else:
            if lo < -1e-9 or hi >= TWO_PI * self.fringe_count:
                raise InvalidConfig(
                    f"absolute phase outside [0, 2 pi n_s): [{lo}, {hi}]"
                )

    def clone(self) -> "PhaseMap":
        return PhaseMap(
            values=self.values.clone(),
            kind=self.kind,
            mask=self.mask.clone(),
            fringe_count=self.fringe_count,
            modulation=None if self.modulation is None else self.modulation.clone(),
            decode_failures=self.decode_failures,
        )


def wrapped_phase(captures: torch.Tensor, fringe_count: int,
                  mask_threshold: float = 0.01) -> PhaseMap:
    """Recover wrapped phase and modulation from phase-shift captures.

    Parameters
    ----------
    captures : (N, H, W) tensor
        Images of the N shifted cosine patterns; N >= 3. Gradients propagate
        into the phase values.
    fringe_count : int
        Fringe periods of the projected pattern (metadata for the map).
    mask_threshold : float
        Pixels with modulation below this are masked out (low fringe
        contrast: background, shadow, saturation).

    Returns
    -------
    PhaseMap
        ``kind="wrapped"`` with modulation ``(2/N) * |(cos, sin) sum|``.
    """
    caps = as_f64(captures)
    if caps.ndim != 3:
        raise ShapeMismatch(f"captures must be (N, H, W), got {tuple(caps.shape)}")
    n = caps.shape[0]
    if n < 3:
        raise InvalidConfig(f"need at least 3 captures, got {n}")
    angles = TWO_PI * torch.arange(n, dtype=DTYPE) / n
    sin_w = torch.sin(angles)[:, None, None]
    cos_w = torch.cos(angles)[:, None, None]
    sin_sum = (caps * sin_w).sum(dim=0)
    cos_sum = (caps * cos_w).sum(dim=0)
    # minus sign: makes recovered phase increase with projector column for
    # patterns generated as cos(theta + 2 pi n / N)
    values = torch.atan2(-sin_sum, cos_sum)
    modulation = (2.0 / n) * torch.sqrt(sin_sum ** 2 + cos_sum ** 2)
    mask = (modulation >= mask_threshold) & torch.isfinite(values)
    return PhaseMap(
        values=values,
        kind="wrapped",
        mask=mask.detach(),
        fringe_count=fringe_count,
        modulation=modulation,
    )


def unwrap_phase(wrapped: PhaseMap, gray_captures: torch.Tensor,
                 reference: Optional[torch.Tensor] = None) -> PhaseMap:
    """Resolve fringe order from gray-code captures and lift phase to absolute.

    Each binary capture is thresholded against ``reference`` (per-pixel mean
    of the cosine captures; defaults to a flat 0.5 for synthetic decodes),
    the half-period index is gray-decoded, and two complementary order
    estimates arbitrate on the wrapped phase: the half-shifted estimate wins
    where ``|phi_w| < pi/2``, the direct estimate (with a wrap correction for
    negative phase) elsewhere. Pixels whose two estimates disagree by two or
    more orders are counted in ``decode_failures`` and masked out.

    Returns
    -------
    PhaseMap
        ``kind="absolute"``; differentiable with respect to the wrapped
        values (the order field is integer and detached).
    """
    if wrapped.kind != "wrapped":
        raise InvalidConfig("unwrap_phase expects a wrapped-phase map")
    caps = as_f64(gray_captures)
    nbits = gray_bit_count(wrapped.fringe_count)
    if caps.ndim != 3 or caps.shape[0] != nbits:
        raise ShapeMismatch(
            f"expected ({nbits}, H, W) gray captures, got {tuple(caps.shape)}"
        )
    if tuple(caps.shape[1:]) != wrapped.shape:
        raise ShapeMismatch("gray captures do not match the phase map size")
    if reference is None:
        ref = torch.full_like(caps[0], 0.5)
    else:
        ref = as_f64(reference)
    bits = (caps > ref).detach().cpu().numpy()
    half_order = _gray_decode_bits(bits)
    ns = wrapped.fringe_count
    bad_word = half_order >= 2 * ns
    order_direct = np.right_shift(half_order, 1)
    order_shifted = (half_order + 1) >> 1

    phi = wrapped.values
    k_direct = torch.from_numpy(order_direct)
    k_shift = torch.from_numpy(order_shifted)
    neg = (phi < 0).detach()
    k_direct_adj = k_direct + neg.to(k_direct.dtype)
    interior = (phi.abs() < math.pi / 2).detach()
    order = torch.where(interior, k_shift, k_direct_adj)

    disagree = (k_shift - k_direct_adj).abs() >= 2
    fail = (disagree | torch.from_numpy(bad_word)) & wrapped.mask
    n_fail = int(fail.sum())
    mask = wrapped.mask & ~fail

    values = phi + TWO_PI * order.to(DTYPE)
    top = TWO_PI * ns
    values = torch.clamp(values, min=0.0, max=float(np.nextafter(top, 0.0)))
    values = torch.where(mask, values, torch.zeros_like(values))
    return PhaseMap(
        values=values,
        kind="absolute",
        mask=mask,
        fringe_count=ns,
        modulation=wrapped.modulation,
        decode_failures=n_fail,
    )


def phase_to_column(phase, width: int, fringe_count: int):
    """Convert absolute phase to projector column coordinates.

    Parameters
    ----------
    phase : tensor or PhaseMap
        Absolute phase values.
    width : int
        Projector width in pixels.
    fringe_count : int

    Returns
    -------
    (u_real, u_rounded)
        Real-valued column ``w * phi / (2 pi n_s)`` clamped into [0, w)
        (differentiable), and its nearest integer column clamped to
        [0, w-1] (int64).
    """
    vals = phase.values if isinstance(phase, PhaseMap) else as_f64(phase)
    if width < 1 or fringe_count < 1:
        raise InvalidConfig("width and fringe_count must be positive")
    u = vals * (width / (TWO_PI * fringe_count))
    u = torch.clamp(u, min=0.0, max=float(np.nextafter(float(width), 0.0)))
    u_round = torch.clamp(torch.round(u), 0, width - 1).to(torch.int64)
    return u, u_round


def encode_adversarial_patterns(phi_adv: PhaseMap, base: FringePatternSet,
                                correspondence: torch.Tensor):
    """Re-index projector patterns so a scan decodes an adversarial phase.

    For every valid camera pixel the clean scan established a projector pixel
    ``(u_p, v_p)`` (``correspondence``). The adversarial absolute phase at
    that camera pixel selects a source column ``u' = round(w phi / 2 pi n_s)``
    and the physical projector pixel is rewritten to show the base pattern's
    intensity at ``u'``: ``I_n(u_p, v_p) <- I_n(u', v_p)``. Gray patterns are
    left untouched; the complementary code absorbs sub-half-period column
    moves, which is why callers must keep ``|u' - u_p| <= w / n_s``.

    Parameters
    ----------
    phi_adv : PhaseMap
        Absolute adversarial phase on the camera grid.
    base : FringePatternSet
        Clean patterns to re-index.
    correspondence : (H, W, 2) int64 tensor
        Per-camera-pixel rounded projector ``(u_p, v_p)``; negative entries
        mark pixels with no correspondence.

    Returns
    -------
    (FringePatternSet, int)
        The rewritten pattern set and the number of projector pixels that
        received conflicting demands (ties broken by camera raster order,
        last writer wins).
    """
    if phi_adv.kind != "absolute":
        raise InvalidConfig("encoding requires an absolute phase map")
    corr = correspondence
    if corr.shape != (*phi_adv.shape, 2):
        raise ShapeMismatch(
            f"correspondence is {tuple(corr.shape)}, expected {(*phi_adv.shape, 2)}"
        )
    w = base.width
    ns = base.fringe_count
    _, u_target = phase_to_column(phi_adv, w, ns)

    corr_np = corr.detach().cpu().numpy()
    valid = phi_adv.mask.detach().cpu().numpy() & (corr_np[..., 0] >= 0) & (corr_np[..., 1] >= 0)
    up = corr_np[..., 0][valid].astype(np.int64)
    vp = corr_np[..., 1][valid].astype(np.int64)
    tgt = u_target.detach().cpu().numpy()[valid].astype(np.int64)
    if up.size and (up.max() >= w or vp.max() >= base.height):
        raise InvalidConfig("correspondence indexes outside the projector grid")

    period = w / ns
    shift_mag = np.abs(tgt - up)
    if shift_mag.size and shift_mag.max() > period:
        raise InvalidConfig(
            f"adversarial phase moves a column by {int(shift_mag.max())} px, "
            f"more than one fringe period ({period:.1f} px)"
        )

    flat = vp * w + up
    # last camera-raster writer wins; conflicts = targets demanded >= 2
    # distinct source columns
    order = np.arange(flat.size, dtype=np.int64)
    sort_idx = np.lexsort((order, flat))
    flat_s = flat[sort_idx]
    tgt_s = tgt[sort_idx]
    if flat.size:
        last_of_group = np.ones(flat.size, dtype=bool)
        last_of_group[:-1] = flat_s[1:] != flat_s[:-1]
        write_flat = flat_s[last_of_group]
        write_tgt = tgt_s[last_of_group]
        differs = np.zeros(flat.size, dtype=bool)
        if flat.size > 1:
            differs[1:] = (flat_s[1:] == flat_s[:-1]) & (tgt_s[1:] != tgt_s[:-1])
        # a group counts once no matter how many distinct values it saw
        conflict_groups = np.unique(flat_s[differs])
        conflicts = int(conflict_groups.size)
    else:
        write_flat = flat
        write_tgt = tgt
        conflicts = 0

    # Column-shift map on the projector grid; a sentinel marks pixels no
    # camera pixel wrote. The camera grid can be coarser than the projector
    # grid, so each written pixel's shift is dilated into neighboring
    # unwritten pixels; otherwise bilinear capture would mix the shift with
    # the untouched base pattern and deliver only a fraction of the requested
    # column move. Dilating the shift (not the absolute source column) keeps
    # local cosine ramps intact and makes a zero shift an exact no-op.
    sentinel = np.iinfo(np.int64).min
    demand = np.full(base.height * w, sentinel, dtype=np.int64)
    demand[write_flat] = write_tgt - write_flat % w
    demand = demand.reshape(base.height, w)
    for _ in range(_DILATE_STEPS):
        unfilled = demand == sentinel
        if not unfilled.any():
            break
        for du, dv in ((0, -1), (0, 1), (-1, 0), (1, 0)):
            src = np.roll(demand, (dv, du), axis=(0, 1))
            if dv > 0:
                src[:dv] = sentinel
            elif dv < 0:
                src[dv:] = sentinel
            if du > 0:
                src[:, :du] = sentinel
            elif du < 0:
                src[:, du:] = sentinel
            take = unfilled & (src != sentinel)
            demand[take] = src[take]
            unfilled = demand == sentinel

    shift_np = base.shift_patterns.detach().cpu().numpy().copy()
    rows, cols = np.nonzero((demand != sentinel) & (demand != 0))
    src_cols = np.clip(cols + demand[rows, cols], 0, w - 1)
    shift_np[:, rows, cols] = shift_np[:, rows, src_cols]
    out = FringePatternSet(
        steps=base.steps,
        fringe_count=ns,
        width=w,
        height=base.height,
        shift_patterns=torch.from_numpy(shift_np),
        gray_patterns=base.gray_patterns.clone(),
    )
    return out, conflicts
