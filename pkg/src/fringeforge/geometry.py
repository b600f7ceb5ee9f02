"""Pinhole camera/projector geometry for a structured-light scanner.

Conventions
-----------
* World points map to device pixels through ``A = K [R | T]``: a point ``p``
  lands at homogeneous image coordinates ``A @ [p, 1]``, i.e. the device-frame
  position is ``p_dev = R @ p + T`` and the pixel is
  ``(u, v) = (fx * x/z + cx, fy * y/z + cy)``.
* Depth is the third device-frame coordinate ``z``; visible points have
  ``z > 0``.
* Intrinsics are upper triangular with positive ``fx``, ``fy`` and zero skew
  unless a caller builds one by hand.

A projector is modeled as an inverse camera with the same container: it emits
a column pattern, so only the first and third rows of its ``A`` constrain a
surface point.
"""

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import (
    BehindCamera,
    DegenerateGeometry,
    InvalidConfig,
    NonOrthonormalRotation,
    ShapeMismatch,
)
from .util import DTYPE, as_f64

# Max acceptable ratio between row-norm product and |det| of a triangulation
# system before it is declared degenerate.
CONDITION_LIMIT = 1e8

# SVD snap tolerance: rotations further than this from orthonormal are refused
# instead of silently repaired.
ROTATION_SNAP_TOL = 1e-3


@dataclass(frozen=True)
class ProjectionMatrix:
    """Calibrated pinhole device: intrinsics, pose, and their composition.

    Attributes
    ----------
    intrinsics : (3, 3) tensor
        Upper-triangular camera matrix ``K`` with positive focal lengths.
    rotation : (3, 3) tensor
        World-to-device rotation ``R`` (orthonormal, det +1).
    translation : (3,) tensor
        World-to-device translation ``T`` in millimeters.
    composed : (3, 4) tensor
        ``K @ [R | T]``, stored for direct reuse in projections.
    """

    intrinsics: torch.Tensor
    rotation: torch.Tensor
    translation: torch.Tensor
    composed: torch.Tensor = field(init=False)

    def __post_init__(self):
        K = as_f64(self.intrinsics)
        R = as_f64(self.rotation)
        T = as_f64(self.translation).reshape(-1)
        if K.shape != (3, 3) or R.shape != (3, 3) or T.shape != (3,):
            raise ShapeMismatch(
                "expected K (3,3), R (3,3), T (3,): got "
                f"{tuple(K.shape)}, {tuple(R.shape)}, {tuple(T.shape)}"
            )
        if not bool(torch.isfinite(K).all() and torch.isfinite(R).all() and torch.isfinite(T).all()):
            raise InvalidConfig("calibration contains non-finite entries")
        err = torch.linalg.norm(R.T @ R - torch.eye(3, dtype=DTYPE))
        if float(err) > 1e-9:
            raise NonOrthonormalRotation(f"R'R deviates from identity by {float(err):.3e}")
        if float(torch.linalg.det(R)) < 1.0 - 1e-9:
            raise NonOrthonormalRotation("rotation determinant is not +1")
        if float(K[0, 0]) <= 0 or float(K[1, 1]) <= 0:
            raise InvalidConfig("focal lengths must be positive")
        if float(abs(K[1, 0]) + abs(K[2, 0]) + abs(K[2, 1])) > 0 or abs(float(K[2, 2]) - 1.0) > 1e-12:
            raise InvalidConfig("intrinsics must be upper triangular with K[2,2] == 1")
        composed = K @ torch.cat([R, T.reshape(3, 1)], dim=1)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", T)
        object.__setattr__(self, "composed", composed)

    @property
    def center(self) -> torch.Tensor:
        """Device center in world coordinates: ``-R' T``."""
        return -self.rotation.T @ self.translation

    def to_device_frame(self, points: torch.Tensor) -> torch.Tensor:
        """Map world points (..., 3) into the device frame."""
        pts = as_f64(points)
        return pts @ self.rotation.T + self.translation


def make_pinhole(fx, fy, cx, cy, rotation, translation) -> ProjectionMatrix:
    """Build a :class:`ProjectionMatrix` from scalar intrinsics and a pose.

    The rotation is re-orthonormalized through an SVD snap (``R <- U V'``);
    inputs whose entries move by more than ``1e-3`` during the snap raise
    :class:`NonOrthonormalRotation` because they are not plausibly a noisy
    rotation.

    Parameters
    ----------
    fx, fy : float
        Focal lengths in pixels (must be positive).
    cx, cy : float
        Principal point in pixels.
    rotation : (3, 3) array-like
        Approximate world-to-device rotation.
    translation : (3,) array-like
        World-to-device translation, millimeters.
    """
    if fx <= 0 or fy <= 0:
        raise InvalidConfig(f"focal lengths must be positive, got fx={fx}, fy={fy}")
    R_in = as_f64(rotation)
    if R_in.shape != (3, 3):
        raise ShapeMismatch(f"rotation must be (3,3), got {tuple(R_in.shape)}")
    U, _, Vh = torch.linalg.svd(R_in)
    R = U @ Vh
    if float(torch.linalg.det(R)) < 0:
        # Flip the smallest singular direction to stay in SO(3).
        U = U.clone()
        U[:, 2] = -U[:, 2]
        R = U @ Vh
    drift = float(torch.max(torch.abs(R - R_in)))
    if drift > ROTATION_SNAP_TOL:
        raise NonOrthonormalRotation(
            f"rotation entries moved {drift:.3e} under SVD snap (limit {ROTATION_SNAP_TOL})"
        )
    K = torch.tensor(
        [[float(fx), 0.0, float(cx)], [0.0, float(fy), float(cy)], [0.0, 0.0, 1.0]],
        dtype=DTYPE,
    )
    return ProjectionMatrix(intrinsics=K, rotation=R, translation=as_f64(translation))


def project_point(device: ProjectionMatrix, point):
    """Project world point(s) through a calibrated device.

    Parameters
    ----------
    device : ProjectionMatrix
    point : (3,) or (..., 3) array-like

    Returns
    -------
    (u, v, depth)
        Pixel coordinates and device-frame depth, each shaped like the input
        batch. Scalars are returned for a single point.

    Raises
    ------
    BehindCamera
        If a single input point has depth <= 0. Batched calls do not raise;
        callers must mask on the returned depth.
    """
    pts = as_f64(point)
    single = pts.ndim == 1
    dev = device.to_device_frame(pts)
    z = dev[..., 2]
    if single and float(z) <= 0.0:
        raise BehindCamera(f"point has device-frame depth {float(z):.6g}")
    K = device.intrinsics
    u = K[0, 0] * dev[..., 0] / z + K[0, 2]
    v = K[1, 1] * dev[..., 1] / z + K[1, 2]
    if single:
        return float(u), float(v), float(z)
    return u, v, z


def _det3(m):
    """Determinant of (..., 3, 3) via cofactor expansion (autograd-friendly)."""
    a, b, c = m[..., 0, 0], m[..., 0, 1], m[..., 0, 2]
    d, e, f = m[..., 1, 0], m[..., 1, 1], m[..., 1, 2]
    g, h, i = m[..., 2, 0], m[..., 2, 1], m[..., 2, 2]
    return a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)


def triangulate(camera: ProjectionMatrix, projector: ProjectionMatrix,
                u_c, v_c, u_p, return_valid: bool = False):
    """Intersect a camera pixel ray with a projector column plane.

    Solves the 3x3 linear system built from the camera rows
    ``(a0 - u_c a2) p = -(b0 - u_c b2)``, ``(a1 - v_c a2) p = ...`` and the
    projector column constraint, by Cramer's rule so the solve stays
    differentiable and batch-friendly. ``u_p`` may be real-valued.

    Parameters
    ----------
    u_c, v_c, u_p : scalars or broadcastable tensors
        Camera pixel and projector column. Gradients flow through all three.
    return_valid : bool
        If True, returns ``(points, valid)`` where ``valid`` masks pixels
        whose system was too ill-conditioned, instead of raising.

    Returns
    -------
    (..., 3) tensor of world points, or ``(points, valid)``.

    Raises
    ------
    DegenerateGeometry
        If any requested pixel yields a condition proxy above ``1e8`` and
        ``return_valid`` is False.
    """
    uc = as_f64(u_c)
    vc = as_f64(v_c)
    up = as_f64(u_p)
    uc, vc, up = torch.broadcast_tensors(uc, vc, up)
    Ac = camera.composed
    Ap = projector.composed
    # rows: each is (..., 4)
    r0 = Ac[0] - uc[..., None] * Ac[2]
    r1 = Ac[1] - vc[..., None] * Ac[2]
    r2 = Ap[0] - up[..., None] * Ap[2]
    M = torch.stack([r0[..., :3], r1[..., :3], r2[..., :3]], dim=-2)
    b = -torch.stack([r0[..., 3], r1[..., 3], r2[..., 3]], dim=-1)
    det = _det3(M)
    row_norms = torch.linalg.norm(M, dim=-1)
    scale = row_norms[..., 0] * row_norms[..., 1] * row_norms[..., 2]
    valid = torch.abs(det) * CONDITION_LIMIT > scale
    if not return_valid and not bool(valid.all()):
        raise DegenerateGeometry(
            f"{int((~valid).sum())} triangulation system(s) exceed condition limit {CONDITION_LIMIT:.0e}"
        )
    safe_det = torch.where(valid, det, torch.ones_like(det))
    cols = []
    for i in range(3):
        Mi = M.clone()
        Mi[..., :, i] = b
        cols.append(_det3(Mi) / safe_det)
    pts = torch.stack(cols, dim=-1)
    if return_valid:
        return pts, valid
    return pts


def view_ray_direction(camera: ProjectionMatrix) -> torch.Tensor:
    """Unit world-frame direction of the camera's optical axis.

    This is the direction in which depth grows for a fixed pixel: the world
    vector mapping to device-frame ``+z``, i.e. ``R^-1 K^-1 e3`` normalized.
    With zero-skew upper-triangular ``K`` this equals the third row of ``R``.
    """
    e3 = torch.zeros(3, dtype=DTYPE)
    e3[2] = 1.0
    d = camera.rotation.T @ torch.linalg.solve(camera.intrinsics, e3)
    return d / torch.linalg.norm(d)


def constrain_gradient(grad: torch.Tensor, view_dir, camera: ProjectionMatrix) -> torch.Tensor:
    """Project per-point gradients onto displacements a scanner can realize.

    A fringe-projection scanner can only move a reconstructed point along the
    ray through its camera pixel: the pixel ``(u_c, v_c)`` is fixed by where
    the point images, and only the decoded projector column (hence depth along
    that ray) is attackable. In device coordinates that means lateral
    components are unreachable, so this applies the oblique projector
    ``P = B^-1 diag(0,0,1) B`` with ``B = K R``: map the vector into
    device-aligned coordinates, zero the two lateral rows, and map back.

    The output of ``P`` is always parallel to the camera view axis
    ``B^-1 e3``; ``P`` is idempotent but not orthogonal, so input components
    that are merely perpendicular to ``view_dir`` are not necessarily
    annihilated unless ``K`` is trivial.

    Parameters
    ----------
    grad : (..., 3) tensor
        World-frame gradient vectors.
    view_dir : (3,) array-like
        The camera's view-axis direction; must agree with ``camera`` (checked
        to 1e-6) — passing it explicitly guards against mixing calibrations.
    camera : ProjectionMatrix

    Returns
    -------
    (..., 3) tensor with lateral components removed.
    """
    g = as_f64(grad)
    if g.shape[-1] != 3:
        raise ShapeMismatch(f"gradients must have trailing dim 3, got {tuple(g.shape)}")
    axis = view_ray_direction(camera)
    vd = as_f64(view_dir).reshape(3)
    vd = vd / torch.linalg.norm(vd)
    if float(torch.linalg.norm(vd - axis)) > 1e-6:
        raise InvalidConfig("view_dir does not match the camera calibration")
    B = camera.intrinsics @ camera.rotation
    # P = B^-1 diag(0,0,1) B, built once; applied as g @ P'.
    E = torch.zeros(3, 3, dtype=DTYPE)
    E[2, 2] = 1.0
    P = torch.linalg.solve(B, E @ B)
    return g @ P.T


def look_at_rotation(position, target, up=(0.0, -1.0, 0.0)) -> torch.Tensor:
    """World-to-device rotation for a device at ``position`` looking at ``target``.

    The device +z axis points from position toward target; ``up`` seeds the
    -y (image up) direction. Returns a (3, 3) rotation usable with
    :func:`make_pinhole`.
    """
    pos = as_f64(position)
    tgt = as_f64(target)
    fwd = tgt - pos
    n = torch.linalg.norm(fwd)
    if float(n) < 1e-12:
        raise InvalidConfig("look-at target coincides with position")
    fwd = fwd / n
    upv = as_f64(up)
    right = torch.linalg.cross(fwd, upv)
    rn = torch.linalg.norm(right)
    if float(rn) < 1e-9:
        raise InvalidConfig("up direction is parallel to the view direction")
    right = right / rn
    down = torch.linalg.cross(fwd, right)
    # rows are the device axes expressed in world coordinates
    return torch.stack([right, down, fwd], dim=0)
