"""Scene synthesis and photometric capture model.

Scenes are camera-aligned height fields (depth per camera pixel, mm) with
albedo and unit normals. Captures follow a Lambertian model with two
illuminants: the fringe projector and an optional attacker light source that
is co-located with the camera (so its per-pixel intensity field is addressed
in camera pixels), plus a flat ambient term:

    I = albedo * (g_pat * pattern * (n . s_proj) + g_ext * x * (n . s_att))
        + albedo * ambient  [+ sensor noise, clamp to [0, 1]]

The attacker channel can pass through a saturating response curve
``g(u) = (tanh(gamma (2u - 1)) + 1) / 2`` modeling an uncalibrated projector;
the fringe projector itself is assumed radiometrically linearized.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .errors import FitDiverged, InvalidConfig, ShapeMismatch
from .geometry import ProjectionMatrix
from .util import DTYPE, as_f64, rng_for


@dataclass
class SceneSurface:
    """Height field scene on a camera pixel grid.

    Attributes
    ----------
    height : (H, W) tensor
        Depth along the camera axis, millimeters (camera-frame z).
    albedo : (H, W) tensor in [0, 1]
    normals : (H, W, 3) tensor
        Unit surface normals in the camera frame, z component negative
        (facing the camera).
    """

    height: torch.Tensor
    albedo: torch.Tensor
    normals: torch.Tensor

    def __post_init__(self):
        if self.height.ndim != 2:
            raise ShapeMismatch(f"height must be (H, W), got {tuple(self.height.shape)}")
        if self.albedo.shape != self.height.shape:
            raise ShapeMismatch("albedo grid does not match height grid")
        if self.normals.shape != (*self.height.shape, 3):
            raise ShapeMismatch("normals grid must be (H, W, 3)")

    @property
    def shape(self):
        return tuple(self.height.shape)

    def check_invariants(self) -> None:
        if not bool(torch.isfinite(self.height).all()):
            raise InvalidConfig("height field contains non-finite values")
        if float(self.albedo.min()) < 0.0 or float(self.albedo.max()) > 1.0:
            raise InvalidConfig("albedo must lie in [0, 1]")
        norms = torch.linalg.norm(self.normals, dim=-1)
        if float((norms - 1.0).abs().max()) > 1e-9:
            raise InvalidConfig("normals must be unit length")
        if float(self.normals[..., 2].max()) >= 0.0:
            raise InvalidConfig("normals must face the camera (negative z)")


def grid_positions(height: torch.Tensor, camera: ProjectionMatrix) -> torch.Tensor:
    """Back-project a height field to (H, W, 3) camera-frame positions."""
    h, w = height.shape
    K = camera.intrinsics
    v, u = torch.meshgrid(
        torch.arange(h, dtype=DTYPE), torch.arange(w, dtype=DTYPE), indexing="ij"
    )
    dx = (u - K[0, 2]) / K[0, 0]
    dy = (v - K[1, 2]) / K[1, 1]
    return torch.stack([height * dx, height * dy, height], dim=-1)


def normals_from_height(height: torch.Tensor, camera: ProjectionMatrix) -> torch.Tensor:
    """Unit camera-facing normals by central differences of the height field.

    The surface point for pixel (u, v) is ``z(u,v) * K^-1 (u, v, 1)``;
    tangents along u and v come from central differences (one-sided at the
    borders) and the normal is their cross product, oriented toward the
    camera. Defining stored normals this way keeps them exactly consistent
    with the discrete height field.
    """
    X = grid_positions(as_f64(height), camera)

    def diff(t, dim):
        d = torch.empty_like(t)
        sl = [slice(None)] * t.ndim
        lo = [slice(None)] * t.ndim
        hi = [slice(None)] * t.ndim
        sl[dim] = slice(1, -1)
        lo[dim] = slice(0, -2)
        hi[dim] = slice(2, None)
        d[tuple(sl)] = (t[tuple(hi)] - t[tuple(lo)]) * 0.5
        first = [slice(None)] * t.ndim
        second = [slice(None)] * t.ndim
        first[dim] = 0
        second[dim] = 1
        d[tuple(first)] = t[tuple(second)] - t[tuple(first)]
        first[dim] = -1
        second[dim] = -2
        d[tuple(first)] = t[tuple(first)] - t[tuple(second)]
        return d

    t_u = diff(X, 1)
    t_v = diff(X, 0)
    n = -torch.linalg.cross(t_u, t_v)
    return n / torch.linalg.norm(n, dim=-1, keepdim=True)


# --- face synthesis ---------------------------------------------------------

# (name, x mm, y mm, sigma_x, sigma_y, amplitude mm); +amplitude bulges toward
# the camera, negative recesses. Relief is deliberately pronounced so the
# synthetic identities stay separable at desk-scale resolution.
_FACE_FEATURES = (
    ("nose", 0.0, 12.0, 9.0, 20.0, 22.0),
    ("brow", 0.0, -34.0, 36.0, 9.0, 7.0),
    ("cheek_l", -33.0, 14.0, 17.0, 15.0, 7.5),
    ("cheek_r", 33.0, 14.0, 17.0, 15.0, 7.5),
    ("chin", 0.0, 64.0, 19.0, 15.0, 9.0),
    ("mouth", 0.0, 42.0, 15.0, 7.0, -4.0),
    ("socket_l", -23.0, -16.0, 10.0, 8.0, -5.0),
    ("socket_r", 23.0, -16.0, 10.0, 8.0, -5.0),
)


@dataclass
class FaceParams:
    """Controls for the procedural face generator.

    Geometry is laid out in millimeters on the fronto-parallel plane at
    ``standoff`` and projected through ``camera``; amplitudes are depth
    relief toward the camera. ``identity_spread`` scales per-identity
    parameter jitter, ``expression_spread`` scales the smaller per-capture
    jitter. Zero spreads and zero ``dome`` with ``feature_scale=0`` produce
    an exactly flat plane (normals (0, 0, -1) everywhere).
    """

    camera: ProjectionMatrix
    grid_shape: Optional[tuple] = None
    standoff: float = 1500.0
    half_axes: tuple = (80.0, 104.0)
    dome: float = 26.0
    feature_scale: float = 1.0
    identity_spread: float = 1.0
    expression_spread: float = 0.2
    albedo_face: tuple = (0.45, 0.85)
    albedo_background: float = 0.015
    background_offset: float = 120.0
    edge_steepness: float = 6.0

    def __post_init__(self):
        if self.standoff <= 0:
            raise InvalidConfig("standoff must be positive")
        if self.half_axes[0] <= 0 or self.half_axes[1] <= 0:
            raise InvalidConfig("face half axes must be positive")


def synth_face(seed: int, params: FaceParams, expression_seed: Optional[int] = None) -> SceneSurface:
    """Generate a deterministic synthetic face scene.

    Parameters
    ----------
    seed : int
        Identity seed; fixes facial geometry and albedo texture. Identical
        seeds give bit-identical scenes.
    params : FaceParams
    expression_seed : int, optional
        When given, adds a smaller second jitter on top of the identity so
        one identity yields several distinct capture instances.

    Returns
    -------
    SceneSurface
    """
    cam = params.camera
    if params.grid_shape is not None:
        h, w = params.grid_shape
    else:
        h = int(round(2 * float(cam.intrinsics[1, 2])))
        w = int(round(2 * float(cam.intrinsics[0, 2])))
    if h < 8 or w < 8:
        raise InvalidConfig("camera principal point implies a degenerate grid")
    rng = rng_for("face", seed)

    v, u = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    K = cam.intrinsics.numpy()
    s = params.standoff
    x = (u - K[0, 2]) * s / K[0, 0]
    y = (v - K[1, 2]) * s / K[1, 1]

    spread = params.identity_spread
    ax = params.half_axes[0] * (1.0 + 0.12 * spread * rng.uniform(-1, 1))
    ay = params.half_axes[1] * (1.0 + 0.12 * spread * rng.uniform(-1, 1))
    dome_amp = params.dome * (1.0 + 0.40 * spread * rng.uniform(-1, 1))

    feats = []
    for name, fx0, fy0, sx, sy, amp in _FACE_FEATURES:
        fx1 = fx0 + 7.0 * spread * rng.uniform(-1, 1)
        fy1 = fy0 + 7.0 * spread * rng.uniform(-1, 1)
        sx1 = sx * (1.0 + 0.35 * spread * rng.uniform(-1, 1))
        sy1 = sy * (1.0 + 0.35 * spread * rng.uniform(-1, 1))
        amp1 = amp * (1.0 + 0.60 * spread * rng.uniform(-1, 1))
        feats.append([fx1, fy1, sx1, sy1, amp1])

    # low-frequency identity warp: stable per identity, untouched by
    # expressions, so identities stay separable under expression jitter
    warps = []
    for _ in range(3):
        warps.append([
            rng.uniform(-0.6, 0.6) * ax,
            rng.uniform(-0.6, 0.6) * ay,
            rng.uniform(28.0, 60.0),
            6.0 * spread * rng.uniform(-1, 1),
        ])

    # albedo texture: a few smooth blotches over a per-identity base tone
    a_lo, a_hi = params.albedo_face
    base_tone = rng.uniform(a_lo + 0.15 * (a_hi - a_lo), a_hi - 0.15 * (a_hi - a_lo))
    blotches = []
    for _ in range(3):
        blotches.append([
            rng.uniform(-0.7, 0.7) * ax,
            rng.uniform(-0.7, 0.7) * ay,
            rng.uniform(18.0, 46.0),
            rng.uniform(-0.35, 0.35) * (a_hi - a_lo),
        ])

    if expression_seed is not None:
        erng = rng_for("expr", seed, expression_seed)
        es = params.expression_spread
        for f in feats:
            f[0] += 2.0 * es * erng.uniform(-1, 1)
            f[1] += 2.0 * es * erng.uniform(-1, 1)
            f[4] *= 1.0 + 0.20 * es * erng.uniform(-1, 1)
        dome_amp *= 1.0 + 0.05 * es * erng.uniform(-1, 1)

    rho = (np.abs(x) / ax) ** 4 + (np.abs(y) / ay) ** 4
    inside = 1.0 / (1.0 + np.exp(-params.edge_steepness * (1.0 - rho)))
    relief = dome_amp * np.exp(-0.5 * rho)
    for fx1, fy1, sx1, sy1, amp1 in feats:
        relief = relief + params.feature_scale * amp1 * np.exp(
            -0.5 * (((x - fx1) / sx1) ** 2 + ((y - fy1) / sy1) ** 2)
        )
    for wx, wy, ws, wamp in warps:
        relief = relief + params.feature_scale * wamp * np.exp(
            -0.5 * (((x - wx) / ws) ** 2 + ((y - wy) / ws) ** 2)
        )
    z_face = s - relief
    z_back = s + params.background_offset
    height = z_back + (z_face - z_back) * inside

    albedo = np.full((h, w), base_tone)
    for bx, by, bs, bamp in blotches:
        albedo = albedo + bamp * np.exp(-0.5 * (((x - bx) / bs) ** 2 + ((y - by) / bs) ** 2))
    albedo = np.clip(albedo, a_lo, a_hi)
    albedo = params.albedo_background + (albedo - params.albedo_background) * inside

    height_t = torch.from_numpy(height)
    return SceneSurface(
        height=height_t,
        albedo=torch.from_numpy(albedo),
        normals=normals_from_height(height_t, cam),
    )


def perturb_albedo(scene: SceneSurface, seed: int, rel: float = 0.05) -> SceneSurface:
    """Scene with seeded multiplicative albedo error (attacker's estimate)."""
    rng = rng_for("albedo-err", seed)
    factor = 1.0 + rel * rng.uniform(-1.0, 1.0, size=scene.shape)
    albedo = torch.clamp(scene.albedo * torch.from_numpy(factor), 0.0, 1.0)
    return SceneSurface(height=scene.height.clone(), albedo=albedo, normals=scene.normals.clone())


# --- lambertian shading -----------------------------------------------------


@dataclass
class LightField:
    """Per-pixel illumination vectors; magnitude encodes intensity.

    ``vectors`` is (S, H, W, 3): S sources, camera-frame direction from the
    surface toward each source scaled by source strength.
    """

    vectors: torch.Tensor

    def __post_init__(self):
        if self.vectors.ndim != 4 or self.vectors.shape[-1] != 3:
            raise ShapeMismatch(f"light field must be (S, H, W, 3), got {tuple(self.vectors.shape)}")

    def check_invariants(self) -> None:
        if not bool(torch.isfinite(self.vectors).all()):
            raise InvalidConfig("light vectors must be finite")


def point_source_field(scene: SceneSurface, camera: ProjectionMatrix,
                       position, strength: float = 1.0) -> torch.Tensor:
    """(H, W, 3) unit directions from each surface point to a point source,
    scaled by ``strength``. ``position`` is in the camera frame, mm."""
    X = grid_positions(scene.height, camera)
    d = as_f64(position).reshape(1, 1, 3) - X
    return strength * d / torch.linalg.norm(d, dim=-1, keepdim=True)


def lambertian_shade(scene: SceneSurface, lights: LightField,
                     clamp_negative: bool = True) -> torch.Tensor:
    """Shade a scene: ``albedo * (n . sum_of_lights)``.

    ``clamp_negative=True`` (default) zeroes back-facing contributions after
    summing sources; disable it for gradient work where the kink at zero is
    unwanted.
    """
    total = lights.vectors.sum(dim=0)
    if total.shape[:2] != scene.shape:
        raise ShapeMismatch("light field grid does not match the scene")
    dot = (scene.normals * total).sum(dim=-1)
    if clamp_negative:
        dot = torch.clamp(dot, min=0.0)
    return scene.albedo * dot


# --- gamma model ------------------------------------------------------------


@dataclass(frozen=True)
class GammaModel:
    """Saturating intensity response ``g(u) = (tanh(g(2u-1)) + 1) / 2``.

    Strictly monotone on [0, 1] for any ``gamma > 0``, fixes ``g(0.5) = 0.5``,
    and approaches a step at 0.5 as ``gamma`` grows.
    """

    gamma: float

    def __post_init__(self):
        if not (self.gamma > 0) or not math.isfinite(self.gamma):
            raise InvalidConfig(f"gamma must be positive and finite, got {self.gamma}")


def gamma_distort(u, model: GammaModel):
    """Apply the saturating response to intensities in [0, 1]."""
    t = as_f64(u)
    return (torch.tanh(model.gamma * (2.0 * t - 1.0)) + 1.0) / 2.0


def gamma_inverse(d, model: GammaModel):
    """Input intensity whose distorted output is ``d`` (pre-correction).

    ``d`` is clamped into the reachable open interval (g(0), g(1)) before
    inverting, so the result always lands in [0, 1].
    """
    t = as_f64(d)
    g = model.gamma
    eps = 1e-12
    lo = (math.tanh(-g) + 1.0) / 2.0 + eps
    hi = (math.tanh(g) + 1.0) / 2.0 - eps
    t = torch.clamp(t, lo, hi)
    return (torch.atanh(2.0 * t - 1.0) / g + 1.0) / 2.0


def fit_gamma(samples, rms_limit: float = 0.05):
    """Fit the response parameter from (input, observed) intensity pairs.

    Golden-section search on log-gamma minimizes the sum of squared
    residuals over gamma in [1e-3, 20].

    Parameters
    ----------
    samples : (n, 2) array-like
        Column 0: commanded intensity in [0, 1]; column 1: observed response.
        Needs at least 3 distinct commanded values.
    rms_limit : float
        Residual RMS above this raises :class:`FitDiverged`.

    Returns
    -------
    (GammaModel, float)
        Fitted model and residual RMS.
    """
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ShapeMismatch(f"samples must be (n, 2), got {arr.shape}")
    if np.unique(arr[:, 0]).size < 3:
        raise InvalidConfig("need at least 3 distinct input intensities")
    u = arr[:, 0]
    y = arr[:, 1]

    def sse(log_g):
        g = math.exp(log_g)
        pred = (np.tanh(g * (2.0 * u - 1.0)) + 1.0) / 2.0
        r = pred - y
        return float(r @ r)

    lo, hi = math.log(1e-3), math.log(20.0)
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = sse(c), sse(d)
    # interval shrinks by ~0.618 per step; 120 steps -> ~1e-25 width
    for _ in range(120):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = sse(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = sse(d)
    best = (a + b) / 2.0
    gamma = math.exp(best)
    rms = math.sqrt(sse(best) / u.size)
    if rms > rms_limit:
        raise FitDiverged(f"gamma fit RMS {rms:.4f} exceeds limit {rms_limit}")
    return GammaModel(gamma=gamma), rms


# --- capture rendering ------------------------------------------------------


@dataclass
class RenderParams:
    """Photometric knobs for capture simulation."""

    pattern_gain: float = 0.85
    extra_gain: float = 0.45
    ambient: float = 0.05
    clamp_shading: bool = True


@dataclass
class RenderContext:
    """Geometry precomputed once per (scene, camera, projector) triple.

    Reused across the 100-iteration attack loops; everything here is
    independent of the projected pattern and the attacker illumination.
    """

    albedo: torch.Tensor
    cos_proj: torch.Tensor
    cos_extra: torch.Tensor
    in_frustum: torch.Tensor
    proj_u: torch.Tensor
    proj_v: torch.Tensor
    idx00: torch.Tensor
    idx01: torch.Tensor
    idx10: torch.Tensor
    idx11: torch.Tensor
    w00: torch.Tensor
    w01: torch.Tensor
    w10: torch.Tensor
    w11: torch.Tensor
    proj_shape: tuple
    corr_rounded: torch.Tensor = field(default=None)


def build_render_context(scene: SceneSurface, camera: ProjectionMatrix,
                         projector: ProjectionMatrix, proj_shape,
                         attacker: Optional[ProjectionMatrix] = None) -> RenderContext:
    """Precompute projector correspondences and shading cosines.

    Parameters
    ----------
    proj_shape : (height, width) of the projector pattern grid.
    attacker : optional device for the extra illuminant; defaults to a source
        co-located with the camera (its intensity field is indexed by camera
        pixel directly).
    """
    ph, pw = proj_shape
    X = grid_positions(scene.height, camera)
    n = scene.normals

    proj_center = projector.center
    d_proj = proj_center.reshape(1, 1, 3) - X
    d_proj = d_proj / torch.linalg.norm(d_proj, dim=-1, keepdim=True)
    cos_proj = (n * d_proj).sum(dim=-1)

    if attacker is None:
        att_center = camera.center
    else:
        att_center = attacker.center
    d_att = att_center.reshape(1, 1, 3) - X
    norm_att = torch.linalg.norm(d_att, dim=-1, keepdim=True)
    # guard the co-located singular case (surface point at the source)
    norm_att = torch.clamp(norm_att, min=1e-9)
    cos_extra = (n * d_att / norm_att).sum(dim=-1)

    dev = projector.to_device_frame(X.reshape(-1, 3)).reshape(*X.shape)
    zp = dev[..., 2]
    Kp = projector.intrinsics
    safe_z = torch.where(zp > 0, zp, torch.ones_like(zp))
    up = Kp[0, 0] * dev[..., 0] / safe_z + Kp[0, 2]
    vp = Kp[1, 1] * dev[..., 1] / safe_z + Kp[1, 2]
    in_frustum = (zp > 0) & (up >= 0) & (up <= pw - 1) & (vp >= 0) & (vp <= ph - 1)

    up_c = torch.clamp(up, 0.0, pw - 1.0)
    vp_c = torch.clamp(vp, 0.0, ph - 1.0)
    u0 = torch.clamp(torch.floor(up_c), max=pw - 2.0) if pw > 1 else torch.zeros_like(up_c)
    v0 = torch.clamp(torch.floor(vp_c), max=ph - 2.0) if ph > 1 else torch.zeros_like(vp_c)
    fu = up_c - u0
    fv = vp_c - v0
    u0i = u0.to(torch.int64)
    v0i = v0.to(torch.int64)
    idx00 = v0i * pw + u0i
    idx01 = idx00 + (1 if pw > 1 else 0)
    idx10 = idx00 + (pw if ph > 1 else 0)
    idx11 = idx10 + (1 if pw > 1 else 0)

    corr = torch.stack([
        torch.clamp(torch.round(up_c), 0, pw - 1).to(torch.int64),
        torch.clamp(torch.round(vp_c), 0, ph - 1).to(torch.int64),
    ], dim=-1)
    corr = torch.where(in_frustum[..., None], corr, torch.full_like(corr, -1))

    return RenderContext(
        albedo=scene.albedo,
        cos_proj=cos_proj,
        cos_extra=cos_extra,
        in_frustum=in_frustum,
        proj_u=up_c,
        proj_v=vp_c,
        idx00=idx00.reshape(-1),
        idx01=idx01.reshape(-1),
        idx10=idx10.reshape(-1),
        idx11=idx11.reshape(-1),
        w00=((1 - fu) * (1 - fv)).reshape(-1),
        w01=(fu * (1 - fv)).reshape(-1),
        w10=((1 - fu) * fv).reshape(-1),
        w11=(fu * fv).reshape(-1),
        proj_shape=(ph, pw),
        corr_rounded=corr,
    )


def _sample_pattern(pattern: torch.Tensor, ctx: RenderContext) -> torch.Tensor:
    flat = pattern.reshape(-1)
    out = (
        flat[ctx.idx00] * ctx.w00
        + flat[ctx.idx01] * ctx.w01
        + flat[ctx.idx10] * ctx.w10
        + flat[ctx.idx11] * ctx.w11
    )
    return out.reshape(ctx.cos_proj.shape)


def render_capture(scene: SceneSurface, camera: ProjectionMatrix,
                   projector: ProjectionMatrix, pattern,
                   extra_illum: Optional[torch.Tensor] = None,
                   gamma: Optional[GammaModel] = None,
                   noise_sigma: float = 0.0, seed: int = 0,
                   params: Optional[RenderParams] = None,
                   context: Optional[RenderContext] = None):
    """Simulate camera capture(s) of projected pattern(s).

    Parameters
    ----------
    pattern : (Hp, Wp) or (P, Hp, Wp) tensor
        Projector pattern(s) in [0, 1]; sampled bilinearly at each surface
        point's projector coordinates.
    extra_illum : (H, W) tensor, optional
        Attacker intensity field in camera pixels; passes through ``gamma``
        when given and contributes via the attacker-direction cosine.
        Gradients propagate through this argument.
    noise_sigma : float
        Additive Gaussian sensor noise; seeded, drawn per pattern.
    context : RenderContext, optional
        Reuse precomputed geometry (otherwise built on the fly).

    Returns
    -------
    (images, mask)
        Images shaped like the pattern batch over the camera grid, clamped
        to [0, 1]; mask marks pixels inside the projector frustum.
    """
    p = params or RenderParams()
    pat = as_f64(pattern)
    squeeze = pat.ndim == 2
    if squeeze:
        pat = pat[None]
    ctx = context
    if ctx is None:
        ctx = build_render_context(scene, camera, projector, tuple(pat.shape[1:]))
    if tuple(pat.shape[1:]) != ctx.proj_shape:
        raise ShapeMismatch(
            f"pattern grid {tuple(pat.shape[1:])} does not match context {ctx.proj_shape}"
        )

    if extra_illum is not None:
        x = as_f64(extra_illum)
        if x.shape != ctx.cos_extra.shape:
            raise ShapeMismatch("extra_illum must match the camera grid")
        if gamma is not None:
            x = gamma_distort(x, gamma)
        extra_term = p.extra_gain * x * ctx.cos_extra
    else:
        extra_term = None

    rng = rng_for("sensor-noise", seed) if noise_sigma > 0 else None
    outs = []
    for i in range(pat.shape[0]):
        val = _sample_pattern(pat[i], ctx)
        shade = p.pattern_gain * val * ctx.cos_proj * ctx.in_frustum
        if extra_term is not None:
            shade = shade + extra_term
        if p.clamp_shading:
            shade = torch.clamp(shade, min=0.0)
        img = ctx.albedo * (shade + p.ambient)
        if rng is not None:
            img = img + noise_sigma * torch.from_numpy(
                rng.standard_normal(size=tuple(img.shape))
            )
        outs.append(torch.clamp(img, 0.0, 1.0))
    images = torch.stack(outs, dim=0)
    if squeeze:
        images = images[0]
    return images, ctx.in_frustum.clone()
