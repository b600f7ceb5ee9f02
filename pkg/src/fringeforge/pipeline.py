"""End-to-end scanner pipeline: rig presets, scan simulation, datasets.

A "scan" projects the full pattern set, renders captures, demodulates the
wrapped phase, unwraps with the gray-code planes, and triangulates. The
:class:`ScanResult` keeps every intermediate so attack code can reuse the
render geometry and correspondences without recomputing them.
"""

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import torch

from .errors import InvalidConfig
from .fringe import FringePatternSet, PhaseMap, generate_patterns, unwrap_phase, wrapped_phase
from .geometry import ProjectionMatrix, look_at_rotation, make_pinhole
from .photometric import (
    FaceParams,
    GammaModel,
    RenderContext,
    RenderParams,
    SceneSurface,
    build_render_context,
    render_capture,
    synth_face,
)
from .reconstruct import PointCloud, cloud_to_depth, reconstruct_cloud, renormalize
from .util import DTYPE, stable_seed


@dataclass(frozen=True)
class ScannerSetup:
    """A calibrated camera + projector rig with scan parameters."""

    camera: ProjectionMatrix
    projector: ProjectionMatrix
    cam_shape: tuple
    proj_shape: tuple
    steps: int = 12
    fringe_count: int = 16
    mask_threshold: float = 0.01
    noise_sigma: float = 0.0
    render: RenderParams = field(default_factory=RenderParams)

    def __post_init__(self):
        if self.steps < 3:
            raise InvalidConfig("scan needs at least 3 phase steps")
        if self.proj_shape[1] % self.fringe_count != 0:
            raise InvalidConfig("projector width must be divisible by fringe_count")

    @property
    def pattern_width(self) -> int:
        return self.proj_shape[1]


def desk_scanner(cam_shape=(96, 128), proj_shape=(240, 320), standoff: float = 1500.0,
                 baseline: float = 200.0, cam_focal: float = 450.0,
                 proj_focal: float = 1100.0, steps: int = 12,
                 fringe_count: int = 16, noise_sigma: float = 0.0) -> ScannerSetup:
    """Small desk-scale rig: camera straight ahead, projector toed in from
    the left so its frustum covers the face at the standoff distance."""
    ch, cw = cam_shape
    camera = make_pinhole(cam_focal, cam_focal, cw / 2.0, ch / 2.0, np.eye(3), [0.0, 0.0, 0.0])
    ph, pw = proj_shape
    pos = torch.tensor([-baseline, 0.0, 0.0], dtype=DTYPE)
    R = look_at_rotation(pos, [0.0, 0.0, standoff])
    T = -(R @ pos)
    projector = make_pinhole(proj_focal, proj_focal, pw / 2.0, ph / 2.0, R, T)
    return ScannerSetup(camera=camera, projector=projector, cam_shape=(ch, cw),
                        proj_shape=(ph, pw), steps=steps, fringe_count=fringe_count,
                        noise_sigma=noise_sigma)


def paper_scale_scanner(standoff: float = 1500.0, baseline: float = 200.0) -> ScannerSetup:
    """Full-resolution rig (1600x1200 camera and projector) for fidelity
    checks at the original scanner scale."""
    camera = make_pinhole(7200.0, 7200.0, 800.0, 600.0, np.eye(3), [0.0, 0.0, 0.0])
    pos = torch.tensor([-baseline, 0.0, 0.0], dtype=DTYPE)
    R = look_at_rotation(pos, [0.0, 0.0, standoff])
    projector = make_pinhole(7000.0, 7000.0, 800.0, 600.0, R, -(R @ pos))
    return ScannerSetup(camera=camera, projector=projector, cam_shape=(1200, 1600),
                        proj_shape=(1200, 1600), steps=12, fringe_count=32)


def face_params(setup: ScannerSetup, **overrides) -> FaceParams:
    """Face generator parameters matched to a rig's camera grid."""
    return FaceParams(camera=setup.camera, grid_shape=setup.cam_shape, **overrides)


@dataclass
class ScanResult:
    """All artifacts of one simulated scan."""

    patterns: FringePatternSet
    shift_captures: torch.Tensor
    gray_captures: torch.Tensor
    reference: torch.Tensor
    wrapped: PhaseMap
    absolute: PhaseMap
    cloud: PointCloud
    correspondence: torch.Tensor
    context: RenderContext

    @property
    def decode_failures(self) -> int:
        return self.absolute.decode_failures


def simulate_scan(scene: SceneSurface, setup: ScannerSetup,
                  patterns: Optional[FringePatternSet] = None,
                  extra_illum: Optional[torch.Tensor] = None,
                  gamma: Optional[GammaModel] = None,
                  noise_sigma: Optional[float] = None, seed: int = 0,
                  context: Optional[RenderContext] = None) -> ScanResult:
    """Run the full scan chain on a scene.

    Parameters
    ----------
    patterns : optional replacement pattern set (e.g. adversarial).
    extra_illum, gamma : attacker illumination on the camera grid and its
        response model; forwarded to every capture.
    noise_sigma : overrides the rig's sensor noise when given.
    seed : drives sensor noise only.

    Returns
    -------
    ScanResult
    """
    pats = patterns if patterns is not None else generate_patterns(
        setup.steps, setup.fringe_count, setup.proj_shape[1], setup.proj_shape[0]
    )
    if pats.fringe_count != setup.fringe_count:
        raise InvalidConfig("pattern set fringe_count does not match the rig")
    sigma = setup.noise_sigma if noise_sigma is None else noise_sigma
    ctx = context or build_render_context(scene, setup.camera, setup.projector, setup.proj_shape)
    stack = pats.stacked()
    captures, _ = render_capture(
        scene, setup.camera, setup.projector, stack,
        extra_illum=extra_illum, gamma=gamma, noise_sigma=sigma, seed=seed,
        params=setup.render, context=ctx,
    )
    shift = captures[: pats.steps]
    gray = captures[pats.steps:]
    reference = shift.mean(dim=0)
    wrapped = wrapped_phase(shift, setup.fringe_count, setup.mask_threshold)
    # pixels outside the projector frustum never saw a pattern
    wrapped.mask &= ctx.in_frustum
    absolute = unwrap_phase(wrapped, gray, reference)
    cloud = reconstruct_cloud(absolute, setup.camera, setup.projector, setup.pattern_width)
    return ScanResult(
        patterns=pats,
        shift_captures=shift,
        gray_captures=gray,
        reference=reference,
        wrapped=wrapped,
        absolute=absolute,
        cloud=cloud,
        correspondence=ctx.corr_rounded,
        context=ctx,
    )


def identity_seed(base_seed: int, index: int) -> int:
    return stable_seed("identity", base_seed, index)


def build_identity_scenes(setup: ScannerSetup, count: int, seed: int = 0,
                          params: Optional[FaceParams] = None,
                          expression: Optional[int] = None):
    """Deterministic list of (identity index, scene) pairs."""
    p = params or face_params(setup)
    out = []
    for i in range(count):
        out.append((i, synth_face(identity_seed(seed, i), p, expression_seed=expression)))
    return out


@dataclass
class ScanDataset:
    """Fixed-size classifier inputs with labels.

    ``kind`` is "cloud" (inputs (M, k, 3), unit-normalized) or "depth"
    (inputs (M, 1, S, S) normalized crops). Split masks select train/val.
    """

    inputs: torch.Tensor
    labels: torch.Tensor
    kind: str
    class_count: int
    train_mask: torch.Tensor
    val_mask: torch.Tensor

    def __post_init__(self):
        if self.kind not in ("cloud", "depth"):
            raise InvalidConfig(f"unknown dataset kind {self.kind!r}")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise InvalidConfig("inputs and labels disagree in count")


def preprocess_cloud(cloud: PointCloud, points: int, seed: int = 0) -> torch.Tensor:
    """Classifier-facing cloud preprocessing: FPS to ``points``, then center
    and scale to the unit sphere. Returns (points, 3)."""
    return renormalize(cloud, sample_to=points, seed=seed).points


def depth_crop(depth_values: torch.Tensor, mask: torch.Tensor, center,
               size: int = 64, scale: float = 60.0) -> torch.Tensor:
    """Normalized square depth crop for the image classifier.

    Crop is centered at ``center`` (u, v); depth is offset by the masked
    median and divided by ``scale`` (mm); empty pixels become 0.
    """
    cu, cv = int(round(center[0])), int(round(center[1]))
    half = size // 2
    h, w = depth_values.shape
    r0, r1 = cv - half, cv + half
    c0, c1 = cu - half, cu + half
    if r0 < 0 or c0 < 0 or r1 > h or c1 > w:
        raise InvalidConfig("depth crop window leaves the image")
    crop = depth_values[r0:r1, c0:c1]
    m = mask[r0:r1, c0:c1]
    if not bool(m.any()):
        return torch.zeros(size, size, dtype=DTYPE)
    mid = torch.median(crop.detach()[m])
    out = torch.where(m, (crop - mid) / scale, torch.zeros_like(crop))
    return out


def cloud_to_depth_input(cloud: PointCloud, setup: ScannerSetup, size: int = 64) -> torch.Tensor:
    """Provenance-based depth crop from a metric reconstruction."""
    depth = cloud_to_depth(cloud, setup.camera, setup.cam_shape)
    K = setup.camera.intrinsics
    return depth_crop(depth.values, depth.mask, (float(K[0, 2]), float(K[1, 2])), size=size)


def build_face_dataset(setup: ScannerSetup, identities: int = 40, expressions: int = 12,
                       points: int = 512, seed: int = 0, noise_sigma: float = 0.001,
                       kind: str = "cloud", depth_size: int = 64,
                       val_per_identity: int = 3,
                       params: Optional[FaceParams] = None) -> ScanDataset:
    """Scan a population of synthetic faces into a labeled dataset.

    Every (identity, expression) pair is a full simulated scan; inputs are
    the standard preprocessing of the reconstructed cloud. The last
    ``val_per_identity`` expressions of each identity form the validation
    split. Deterministic in ``seed``.
    """
    if expressions <= val_per_identity:
        raise InvalidConfig("need more expressions than validation holdouts")
    p = params or face_params(setup)
    inputs = []
    labels = []
    is_val = []
    for ident in range(identities):
        iseed = identity_seed(seed, ident)
        for expr in range(expressions):
            scene = synth_face(iseed, p, expression_seed=expr)
            scan = simulate_scan(
                scene, setup, noise_sigma=noise_sigma,
                seed=stable_seed("scan", seed, ident, expr),
            )
            if kind == "cloud":
                sample = preprocess_cloud(
                    scan.cloud, points, seed=stable_seed("fps", seed, ident, expr)
                )
            else:
                sample = cloud_to_depth_input(scan.cloud, setup, size=depth_size)[None]
            inputs.append(sample.detach())
            labels.append(ident)
            is_val.append(expr >= expressions - val_per_identity)
    inputs_t = torch.stack(inputs, dim=0)
    labels_t = torch.tensor(labels, dtype=torch.int64)
    val_t = torch.tensor(is_val, dtype=torch.bool)
    return ScanDataset(
        inputs=inputs_t,
        labels=labels_t,
        kind=kind,
        class_count=identities,
        train_mask=~val_t,
        val_mask=val_t,
    )
