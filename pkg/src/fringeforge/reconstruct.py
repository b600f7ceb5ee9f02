"""Phase-to-geometry reconstruction and point-cloud preprocessing.

The differentiable path runs: absolute phase map -> real-valued projector
column -> per-pixel triangulation -> point cloud -> (optional) farthest point
sampling -> unit-sphere renormalization. Gradients flow from downstream
losses back to the phase values; sampling indices and masks are integer and
detached.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .errors import DegenerateCloud, InvalidConfig, InvalidK, ShapeMismatch
from .fringe import PhaseMap, phase_to_column
from .geometry import ProjectionMatrix, triangulate
from .util import DTYPE, as_f64, rng_for

try:
    from numba import njit

    _HAVE_NUMBA = True
except Exception:  # pragma: no cover - numba is a normal install here
    _HAVE_NUMBA = False


@dataclass
class PointCloud:
    """Points with optional camera-pixel provenance.

    Attributes
    ----------
    points : (n, 3) tensor, world coordinates (mm, or unitless after
        normalization).
    source_pixels : (n, 2) int64 tensor or None
        Originating camera pixel (u, v) for each point; carried through
        sampling and rigid transforms, dropped by operations that lose the
        correspondence.
    """

    points: torch.Tensor
    source_pixels: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ShapeMismatch(f"points must be (n, 3), got {tuple(self.points.shape)}")
        if self.source_pixels is not None and self.source_pixels.shape != (self.points.shape[0], 2):
            raise ShapeMismatch("source_pixels must be (n, 2) matching points")

    @property
    def count(self) -> int:
        return int(self.points.shape[0])

    def check_invariants(self) -> None:
        if not bool(torch.isfinite(self.points).all()):
            raise InvalidConfig("point cloud contains non-finite coordinates")


@dataclass
class DepthImage:
    """Per-pixel depth with validity mask."""

    values: torch.Tensor
    mask: torch.Tensor

    def __post_init__(self):
        if self.values.shape != self.mask.shape:
            raise ShapeMismatch("depth values and mask must share a shape")


@dataclass
class TransformParams:
    """Random rigid transform distribution for robustness and augmentation.

    Angles are axis-wise standard deviations in radians; translations are in
    units of the cloud's max radius (so the same params work on raw
    millimeter clouds and normalized ones). Gaussian draws, z translation
    fixed at zero.
    """

    rot_std: tuple = (np.deg2rad(5.0),) * 3
    trans_std: tuple = (0.05, 0.05)

    def __post_init__(self):
        if len(self.rot_std) != 3 or len(self.trans_std) != 2:
            raise InvalidConfig("rot_std needs 3 entries, trans_std needs 2")
        if min(self.rot_std) < 0 or min(self.trans_std) < 0:
            raise InvalidConfig("transform spreads must be non-negative")


def reconstruct_cloud(phi: PhaseMap, camera: ProjectionMatrix,
                      projector: ProjectionMatrix, pattern_width: int) -> PointCloud:
    """Triangulate every valid pixel of an absolute phase map.

    Pixels whose triangulation system is too ill-conditioned are dropped
    (they do not raise); the returned cloud carries source-pixel provenance.
    Gradients flow from the points back into ``phi.values``.
    """
    if phi.kind != "absolute":
        raise InvalidConfig("reconstruction needs an absolute phase map")
    mask = phi.mask
    idx = torch.nonzero(mask, as_tuple=False)
    if idx.shape[0] == 0:
        return PointCloud(points=torch.zeros(0, 3, dtype=DTYPE),
                          source_pixels=torch.zeros(0, 2, dtype=torch.int64))
    v = idx[:, 0].to(DTYPE)
    u = idx[:, 1].to(DTYPE)
    vals = phi.values[mask]
    u_p, _ = phase_to_column(vals, pattern_width, phi.fringe_count)
    pts, ok = triangulate(camera, projector, u, v, u_p, return_valid=True)
    keep = ok
    pixels = torch.stack([idx[:, 1], idx[:, 0]], dim=1)
    return PointCloud(points=pts[keep], source_pixels=pixels[keep])


def cloud_to_depth(cloud: PointCloud, camera: ProjectionMatrix, grid_shape) -> DepthImage:
    """Scatter a provenance-carrying cloud into a camera-frame depth image.

    Each point writes its camera-frame z at its source pixel; the write is
    an index_put so gradients flow back to the points. Requires provenance.
    """
    if cloud.source_pixels is None:
        raise InvalidConfig("cloud_to_depth needs source-pixel provenance")
    h, w = grid_shape
    dev = cloud.points @ camera.rotation.T + camera.translation
    z = dev[:, 2]
    u = cloud.source_pixels[:, 0]
    v = cloud.source_pixels[:, 1]
    inside = (u >= 0) & (u < w) & (v >= 0) & (v < h)
    values = torch.zeros(h, w, dtype=DTYPE)
    mask = torch.zeros(h, w, dtype=torch.bool)
    values = values.index_put((v[inside], u[inside]), z[inside])
    mask[v[inside], u[inside]] = True
    return DepthImage(values=values, mask=mask)


if _HAVE_NUMBA:

    @njit(cache=True)
    def _fps_core(pts, k, start):  # pragma: no cover - jitted
        n = pts.shape[0]
        chosen = np.empty(k, dtype=np.int64)
        best = np.full(n, np.inf)
        cur = start
        for i in range(k):
            chosen[i] = cur
            cx, cy, cz = pts[cur, 0], pts[cur, 1], pts[cur, 2]
            nxt = 0
            nxt_d = -1.0
            for j in range(n):
                dx = pts[j, 0] - cx
                dy = pts[j, 1] - cy
                dz = pts[j, 2] - cz
                d = dx * dx + dy * dy + dz * dz
                if d < best[j]:
                    best[j] = d
                if best[j] > nxt_d:
                    nxt_d = best[j]
                    nxt = j
            cur = nxt
        return chosen


def _fps_numpy(pts: np.ndarray, k: int, start: int) -> np.ndarray:
    n = pts.shape[0]
    chosen = np.empty(k, dtype=np.int64)
    best = np.full(n, np.inf)
    cur = start
    for i in range(k):
        chosen[i] = cur
        d = ((pts - pts[cur]) ** 2).sum(axis=1)
        np.minimum(best, d, out=best)
        cur = int(np.argmax(best))
    return chosen


def farthest_point_indices(points: torch.Tensor, k: int, seed: int = 0) -> torch.Tensor:
    """Greedy max-min sample indices (first index drawn from ``seed``).

    Ties in the max-min distance resolve to the lowest index, so results are
    exactly reproducible across the jitted and plain implementations.
    """
    n = int(points.shape[0])
    if k < 1 or k > n:
        raise InvalidK(f"cannot sample {k} points from a cloud of {n}")
    pts = points.detach().cpu().numpy().astype(np.float64)
    start = int(rng_for("fps", seed).integers(n))
    if _HAVE_NUMBA:
        idx = _fps_core(np.ascontiguousarray(pts), k, start)
    else:
        idx = _fps_numpy(pts, k, start)
    return torch.from_numpy(idx)


def farthest_point_sample(cloud: PointCloud, k: int, seed: int = 0) -> PointCloud:
    """Farthest point sampling; keeps provenance and gradient flow.

    The index selection is detached (a straight-through gather), so the
    sampled points still carry gradients from ``cloud.points``.
    """
    idx = farthest_point_indices(cloud.points, k, seed)
    src = None if cloud.source_pixels is None else cloud.source_pixels[idx]
    return PointCloud(points=cloud.points[idx], source_pixels=src)


def renormalize(cloud: PointCloud, sample_to: Optional[int] = None, seed: int = 0) -> PointCloud:
    """Center a cloud on its centroid and scale its max radius to 1.

    Optionally farthest-point-samples down to ``sample_to`` points first.
    Raises :class:`DegenerateCloud` when the cloud has (near-)zero extent.
    """
    c = cloud
    if sample_to is not None:
        c = farthest_point_sample(c, sample_to, seed)
    centroid = c.points.mean(dim=0)
    centered = c.points - centroid
    radius = torch.linalg.norm(centered, dim=1).max()
    if float(radius) < 1e-12:
        raise DegenerateCloud(f"cloud extent {float(radius):.3e} is too small to normalize")
    return PointCloud(points=centered / radius, source_pixels=c.source_pixels)


def rasterize_depth(cloud: PointCloud, camera: ProjectionMatrix, grid_shape) -> DepthImage:
    """Project a cloud into a z-buffered depth image (no provenance needed).

    Pixel coordinates are rounded (detached), so gradients flow only through
    the depth values; collisions keep the nearest point (writes are ordered
    far-to-near, deterministically).
    """
    h, w = grid_shape
    dev = cloud.points @ camera.rotation.T + camera.translation
    z = dev[:, 2]
    K = camera.intrinsics
    safe_z = torch.clamp(z.detach(), min=1e-9)
    u = torch.round(K[0, 0] * dev[:, 0].detach() / safe_z + K[0, 2]).to(torch.int64)
    v = torch.round(K[1, 1] * dev[:, 1].detach() / safe_z + K[1, 2]).to(torch.int64)
    inside = (z.detach() > 0) & (u >= 0) & (u < w) & (v >= 0) & (v < h)
    u, v, z = u[inside], v[inside], z[inside]
    if z.numel() == 0:
        return DepthImage(values=torch.zeros(h, w, dtype=DTYPE),
                          mask=torch.zeros(h, w, dtype=torch.bool))
    # keep exactly one (the nearest) point per pixel so the scatter never
    # sees duplicate indices
    flat = v * w + u
    z_order = torch.argsort(z.detach(), stable=True)
    group = z_order[torch.argsort(flat[z_order], stable=True)]
    flat_s = flat[group]
    first = torch.ones(flat_s.shape[0], dtype=torch.bool)
    first[1:] = flat_s[1:] != flat_s[:-1]
    keep = group[first]
    values = torch.zeros(h, w, dtype=DTYPE).index_put((v[keep], u[keep]), z[keep])
    mask = torch.zeros(h, w, dtype=torch.bool)
    mask[v[keep], u[keep]] = True
    return DepthImage(values=values, mask=mask)


def rotation_matrix(theta_x: float, theta_y: float, theta_z: float) -> torch.Tensor:
    """Rotation ``Rz @ Ry @ Rx`` for axis angles in radians."""
    cx, sx = np.cos(theta_x), np.sin(theta_x)
    cy, sy = np.cos(theta_y), np.sin(theta_y)
    cz, sz = np.cos(theta_z), np.sin(theta_z)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return torch.from_numpy(rz @ ry @ rx)


def apply_rigid_transform(points: torch.Tensor, angles, translation,
                          pivot=None) -> torch.Tensor:
    """Rotate about ``pivot`` (default origin) then translate.

    ``angles`` are (theta_x, theta_y, theta_z) radians; ``translation`` is a
    3-vector in the same units as the points.
    """
    R = rotation_matrix(*[float(a) for a in angles])
    t = as_f64(translation).reshape(3)
    p = as_f64(points)
    if pivot is None:
        piv = torch.zeros(3, dtype=DTYPE)
    else:
        piv = as_f64(pivot).reshape(3)
    return (p - piv) @ R.T + piv + t


def random_transform(cloud: PointCloud, params: TransformParams, seed: int) -> PointCloud:
    """Apply a seeded random rigid transform (head-pose jitter).

    Rotation is about the cloud centroid; the in-plane translation draw is
    scaled by the cloud's max radius so ``trans_std`` means the same thing
    for metric and normalized clouds. Distances between points are preserved
    exactly (rigid).
    """
    rng = rng_for("rigid", seed)
    angles = [rng.normal(0.0, s) if s > 0 else 0.0 for s in params.rot_std]
    eta = [rng.normal(0.0, s) if s > 0 else 0.0 for s in params.trans_std]
    centroid = cloud.points.mean(dim=0).detach()
    radius = float(torch.linalg.norm((cloud.points - centroid).detach(), dim=1).max())
    shift = torch.tensor([eta[0] * radius, eta[1] * radius, 0.0], dtype=DTYPE)
    pts = apply_rigid_transform(cloud.points, angles, shift, pivot=centroid)
    return PointCloud(points=pts, source_pixels=None if cloud.source_pixels is None
                      else cloud.source_pixels.clone())


def clip_phase(phi_adv: torch.Tensor, phi_ref: torch.Tensor, fringe_count: int,
               margin: float = 0.0) -> torch.Tensor:
    """Clamp adversarial phase to one fringe period around a reference.

    Working in normalized phase ``p = phi / (2 pi n_s)``, the perturbation is
    clamped elementwise to ``|p - p_ref| <= 1/n_s - margin`` and the result
    clamped to the valid normalized range [0, 1]. ``margin`` (also in
    normalized units) lets callers stay strictly inside the one-period bound;
    the default reproduces the plain clip. Idempotent, differentiable.
    """
    if fringe_count < 1:
        raise InvalidConfig("fringe_count must be >= 1")
    band = 1.0 / fringe_count - margin
    if band <= 0:
        raise InvalidConfig(f"margin {margin} leaves an empty clip band")
    two_pi_ns = 2.0 * np.pi * fringe_count
    p = as_f64(phi_adv) / two_pi_ns
    p0 = as_f64(phi_ref).detach() / two_pi_ns
    p = torch.clamp(p, p0 - band, p0 + band)
    p = torch.clamp(p, 0.0, float(np.nextafter(1.0, 0.0)))
    return p * two_pi_ns
