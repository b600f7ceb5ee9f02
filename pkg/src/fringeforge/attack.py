"""Optical adversarial attacks against the scan-and-recognize pipeline.

Two attack families share one differentiable core:

* The pattern attack rewrites the projected fringe patterns so the scanner
  itself reconstructs an adversarial cloud. It optimizes the absolute phase
  map directly (one fringe period around the clean phase, so the gray-code
  order survives), constrains gradients to camera-axis displacements, and
  re-indexes projector columns at encode time.
* The illumination attack leaves the patterns alone and adds a second,
  camera-aligned light source whose per-pixel intensity is optimized through
  a differentiable single-fringe phase estimator, a saturating response
  model, and the same recognition chain.

Both wrap their per-weight optimization in a bisection over the sparsity
trade-off weight and verify success by re-simulating the full physical
capture chain, never by trusting the differentiable surrogate.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import (
    AllStepsFailed,
    InvalidConfig,
    NonFiniteGradient,
    NoOverlap,
    ShapeMismatch,
)
from .fringe import PhaseMap, phase_to_column, encode_adversarial_patterns
from .geometry import constrain_gradient, view_ray_direction
from .photometric import GammaModel, gamma_distort, gamma_inverse, render_capture
from .pipeline import (
    ScanResult,
    ScannerSetup,
    cloud_to_depth_input,
    depth_crop,
    simulate_scan,
)
from .recognize import ModelParams, classify, logits_loss
from .reconstruct import (
    PointCloud,
    TransformParams,
    farthest_point_indices,
    random_transform,
    rasterize_depth,
    reconstruct_cloud,
    renormalize,
)
from .util import DTYPE, TWO_PI, as_f64, rng_for, stable_seed, wrap_angle

MIN_MODEL_ACCURACY = 0.95


# --- sensitivity ------------------------------------------------------------


@dataclass
class SensitivityMap:
    """Per-pixel perturbation cost weights.

    ``center_falloff`` decays exponentially with distance from the face
    center; ``density`` is the reciprocal of the valid-pixel count in a
    square neighborhood (sparse, unstable edge regions cost more). The total
    weight is their sum.
    """

    weights: torch.Tensor
    center_falloff: torch.Tensor
    density: torch.Tensor
    face_center: tuple
    falloff_scale: float
    radius: int

    def check_invariants(self) -> None:
        if float(self.weights.min()) <= 0 or not bool(torch.isfinite(self.weights).all()):
            raise InvalidConfig("sensitivity weights must be positive and finite")
        if float(self.center_falloff.max()) > 1.0 + 1e-12 or float(self.center_falloff.min()) <= 0:
            raise InvalidConfig("center falloff must lie in (0, 1]")


def sensitivity_map(phi: PhaseMap, face_center: Optional[tuple] = None,
                    falloff_scale: Optional[float] = None, radius: int = 2) -> SensitivityMap:
    """Build the perturbation-cost map for a scanned face.

    Parameters
    ----------
    phi : absolute phase map whose mask marks valid face pixels.
    face_center : (u0, v0); defaults to the mask centroid.
    falloff_scale : exponential falloff width in pixels; defaults to a
        quarter of the image width.
    radius : neighborhood half-width for the density term.
    """
    if phi.kind != "absolute":
        raise InvalidConfig("sensitivity map expects an absolute phase map")
    h, w = phi.shape
    mask = phi.mask
    if face_center is None:
        idx = torch.nonzero(mask, as_tuple=False).to(DTYPE)
        if idx.shape[0] == 0:
            raise InvalidConfig("cannot center a sensitivity map on an empty mask")
        face_center = (float(idx[:, 1].mean()), float(idx[:, 0].mean()))
    ws = float(w) / 4.0 if falloff_scale is None else float(falloff_scale)
    if ws <= 0 or radius < 0:
        raise InvalidConfig("falloff scale must be positive and radius non-negative")

    v, u = torch.meshgrid(torch.arange(h, dtype=DTYPE), torch.arange(w, dtype=DTYPE), indexing="ij")
    dist = torch.sqrt((u - face_center[0]) ** 2 + (v - face_center[1]) ** 2)
    sen1 = torch.exp(-dist / ws)

    kernel = torch.ones(1, 1, 2 * radius + 1, 2 * radius + 1, dtype=DTYPE)
    counts = F.conv2d(mask.to(DTYPE)[None, None], kernel, padding=radius)[0, 0]
    counts = torch.clamp(torch.round(counts), min=1.0)
    sen2 = 1.0 / counts

    return SensitivityMap(
        weights=sen1 + sen2,
        center_falloff=sen1,
        density=sen2,
        face_center=face_center,
        falloff_scale=ws,
        radius=radius,
    )


# --- configuration and results ---------------------------------------------


@dataclass
class AttackConfig:
    """Shared knobs for both attack algorithms.

    ``mode`` is "dodge" (push the true class down) or "impersonate" (push
    ``target`` on top). The trade-off weight lambda is bisected in
    ``[lambda_lo, lambda_hi]``; each probe runs ``iterations`` gradient
    steps. Ablation toggles: ``direction_constraint``, ``renorm_in_loop``,
    ``tiv`` (expectation over random rigid transforms), ``sensitivity``,
    ``distance_metric`` ("l1" or plain "l2" baseline).
    """

    mode: str = "dodge"
    target: int = 0
    lambda_lo: float = 1e-5
    lambda_hi: float = 1e5
    search_steps: int = 10
    iterations: int = 100
    margin: float = 30.0
    step_size: float = 0.01
    illum_step: float = 1.0 / 255.0
    init_noise: float = 1e-5
    transform_samples: int = 4
    transforms: TransformParams = field(default_factory=TransformParams)
    lambda_rmse: float = 1.0
    sample_points: int = 512
    seed: int = 0
    direction_constraint: bool = True
    renorm_in_loop: bool = True
    tiv: bool = True
    sensitivity: bool = True
    distance_metric: str = "l1"
    column_margin_px: float = 2.0
    stop_when_saturated: int = 10
    gamma_in_loop: bool = True
    resim_noise: Optional[float] = None
    momentum: float = 0.0
    optimizer: str = "normalized"
    step_decay: float = 1.0
    smooth_sigma: float = 0.0
    phase_jitter: float = 0.0005
    delivery_sigma: float = 0.5
    max_shift_px: float = 2.5
    dropout: float = 0.01
    check_every: int = 25

    def __post_init__(self):
        if self.mode not in ("dodge", "impersonate"):
            raise InvalidConfig(f"unknown mode {self.mode!r}")
        if self.lambda_lo <= 0 or self.lambda_hi <= self.lambda_lo:
            raise InvalidConfig("lambda bounds must satisfy 0 < lo < hi")
        if self.search_steps < 1:
            raise InvalidConfig("need at least one search step")
        if self.iterations < 0:
            raise InvalidConfig("iterations must be non-negative")
        if self.step_size <= 0 or self.illum_step <= 0:
            raise InvalidConfig("step sizes must be positive")
        if self.transform_samples < 1:
            raise InvalidConfig("need at least one transform sample")
        if self.distance_metric not in ("l1", "l2"):
            raise InvalidConfig(f"unknown distance metric {self.distance_metric!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidConfig("momentum must lie in [0, 1)")
        if self.optimizer not in ("normalized", "adam"):
            raise InvalidConfig(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 < self.step_decay <= 1.0:
            raise InvalidConfig("step_decay must lie in (0, 1]")
        if self.smooth_sigma < 0:
            raise InvalidConfig("smooth_sigma must be non-negative")
        if self.phase_jitter < 0:
            raise InvalidConfig("phase_jitter must be non-negative")
        if self.delivery_sigma < 0:
            raise InvalidConfig("delivery_sigma must be non-negative")
        if self.max_shift_px <= 0:
            raise InvalidConfig("max_shift_px must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidConfig("dropout must lie in [0, 1)")
        if self.check_every < 0:
            raise InvalidConfig("check_every must be non-negative")


@dataclass
class AttackResult:
    """Outcome of one attack instance (after the lambda search)."""

    success: bool
    surrogate_success: bool
    mode: str
    label: int
    target: int
    lam: float
    logits: Optional[torch.Tensor]
    adv_cloud: Optional[PointCloud]
    patterns: object = None
    illumination: Optional[torch.Tensor] = None
    phase: Optional[PhaseMap] = None
    rmse: float = 0.0
    mean_distance: float = 0.0
    l1: float = 0.0
    distance_loss: float = 0.0
    conflicts: int = 0
    iterations_run: int = 0
    trace: list = field(default_factory=list)
    search_trace: list = field(default_factory=list)
    error: Optional[str] = None


# --- shared differentiable chain -------------------------------------------


def _clean_norm_constants(points: torch.Tensor):
    c = points.mean(dim=0).detach()
    r = torch.linalg.norm(points.detach() - c, dim=1).max()
    return c, r


def chain_logits(points: torch.Tensor, model: ModelParams, config: AttackConfig,
                 setup: ScannerSetup, chain_seed: int,
                 norm_const=None, source_pixels=None) -> torch.Tensor:
    """Recognition-chain logits for each sampled rigid transform.

    Chains transform -> farthest point sampling -> normalization ->
    classifier (or depth rasterization -> crop -> classifier), keeping the
    autograd graph into ``points``. Sampling indices and pixel rounding are
    straight-through. Returns (samples, classes).
    """
    samples = config.transform_samples if config.tiv else 1
    inputs = []
    for s in range(samples):
        pts = points
        if config.dropout > 0:
            # a rescan never reproduces the clean pixel mask exactly, so the
            # loss should not depend on any single point surviving
            rngd = rng_for("chain-dropout", chain_seed, s)
            keep = torch.from_numpy(rngd.random(pts.shape[0]) >= config.dropout)
            if int(keep.sum()) > config.sample_points:
                pts = pts[keep]
        if config.tiv:
            moved = random_transform(
                PointCloud(points=pts, source_pixels=None),
                config.transforms, stable_seed("tiv", chain_seed, s),
            )
            pts = moved.points
        if model.arch == "point":
            idx = farthest_point_indices(pts, config.sample_points,
                                         seed=stable_seed("fps", chain_seed, s))
            sub = pts[idx]
            if config.renorm_in_loop:
                c = sub.mean(dim=0)
                r = torch.linalg.norm(sub - c, dim=1).max()
            else:
                c, r = norm_const
            inputs.append((sub - c) / r)
        else:
            di = rasterize_depth(PointCloud(points=pts, source_pixels=None),
                                 setup.camera, setup.cam_shape)
            K = setup.camera.intrinsics
            crop = depth_crop(di.values, di.mask, (float(K[0, 2]), float(K[1, 2])),
                              size=model.input_size)
            inputs.append(crop[None])
    return classify(model, torch.stack(inputs, dim=0))


def tiv_adv_loss(phi_adv: PhaseMap, setup: ScannerSetup, model: ModelParams,
                 config: AttackConfig, seed: int, norm_const=None):
    """Transform-expectation adversarial loss and its phase gradient.

    Monte-Carlo mean of the margin loss over ``config.transform_samples``
    random rigid transforms of the reconstructed cloud; the returned
    gradient is with respect to the masked entries of ``phi_adv.values``
    (in phase radians). Deterministic per ``seed``.
    """
    vals = phi_adv.values.detach().clone()
    leaf = vals[phi_adv.mask].requires_grad_(True)
    full = vals.clone()
    full[phi_adv.mask] = 0.0
    full = full.index_put(tuple(torch.nonzero(phi_adv.mask, as_tuple=False).T), leaf)
    pm = PhaseMap(values=full, kind="absolute", mask=phi_adv.mask,
                  fringe_count=phi_adv.fringe_count)
    cloud = reconstruct_cloud(pm, setup.camera, setup.projector, setup.pattern_width)
    logits = chain_logits(cloud.points, model, config, setup, seed,
                          norm_const=norm_const, source_pixels=cloud.source_pixels)
    losses = logits_loss(logits, config.target, config.mode, config.margin)
    loss = losses.mean() if losses.ndim else losses
    grad, = torch.autograd.grad(loss, leaf)
    return float(loss.detach()), grad


# --- lambda bisection -------------------------------------------------------


def lambda_search(attack_fn: Callable[[float], AttackResult], config: AttackConfig) -> AttackResult:
    """Bisect the sparsity weight on a log scale.

    A successful probe raises the lower bound (ask for more sparsity), a
    failed probe lowers the upper bound. Returns the successful result with
    the smallest distance loss — with a monotone attack that is the highest
    successful lambda. Raises :class:`AllStepsFailed` if nothing succeeds.
    """
    lo = math.log(config.lambda_lo)
    hi = math.log(config.lambda_hi)
    best: Optional[AttackResult] = None
    trace = []
    for _ in range(config.search_steps):
        lam = math.exp(0.5 * (lo + hi))
        res = attack_fn(lam)
        trace.append({"lam": lam, "success": bool(res.success),
                      "distance_loss": float(res.distance_loss)})
        if res.success:
            lo = math.log(lam)
            if best is None or res.distance_loss < best.distance_loss:
                best = res
        else:
            hi = math.log(lam)
    if best is None:
        raise AllStepsFailed(
            f"no lambda in [{config.lambda_lo:g}, {config.lambda_hi:g}] produced a success"
        )
    best.search_trace = trace
    return best


# --- pattern (phase) attack -------------------------------------------------


def _phase_map_from_vector(template: PhaseMap, masked_values: torch.Tensor) -> PhaseMap:
    full = torch.zeros_like(template.values)
    full = full.index_put(tuple(torch.nonzero(template.mask, as_tuple=False).T), masked_values)
    return PhaseMap(values=full, kind="absolute", mask=template.mask,
                    fringe_count=template.fringe_count)


def _masked_smooth(field: torch.Tensor, mask: torch.Tensor, sigma: float) -> torch.Tensor:
    """Mask-normalized Gaussian blur (masked-out pixels contribute nothing)."""
    radius = max(1, int(math.ceil(2.0 * sigma)))
    x = torch.arange(-radius, radius + 1, dtype=DTYPE)
    k = torch.exp(-0.5 * (x / sigma) ** 2)
    k2 = (k[:, None] * k[None, :])[None, None]
    mf = mask.to(DTYPE)
    num = F.conv2d((field * mf)[None, None], k2, padding=radius)[0, 0]
    den = F.conv2d(mf[None, None], k2, padding=radius)[0, 0]
    return (num / torch.clamp(den, min=1e-12)) * mf


def _check_model(model: ModelParams) -> None:
    if model.val_accuracy < MIN_MODEL_ACCURACY:
        raise InvalidConfig(
            f"attack requires a validated model (accuracy {model.val_accuracy:.3f} < "
            f"{MIN_MODEL_ACCURACY})"
        )


def _resim_logits(model: ModelParams, cloud: PointCloud, setup: ScannerSetup,
                  cfg: AttackConfig, fps_seed: int) -> torch.Tensor:
    """Classify a re-simulated cloud through the victim's preprocessing."""
    if model.arch == "point":
        sub = renormalize(cloud, sample_to=cfg.sample_points, seed=fps_seed)
        return classify(model, sub.points)
    return classify(model, cloud_to_depth_input(cloud, setup, size=model.input_size)[None])


def phase_shifting_attack(scan: ScanResult, scene, setup: ScannerSetup,
                          model: ModelParams, config: AttackConfig,
                          label: int) -> AttackResult:
    """Optimize the projected patterns so the scan misclassifies.

    Runs the lambda bisection around a per-weight optimization of the
    absolute phase map: each iteration reconstructs the cloud, measures the
    transform-expectation margin loss, constrains the per-point gradient to
    camera-axis displacements, chains it back to the phase, adds the
    sensitivity-weighted distance gradient, and takes a normalized step
    clipped to stay strictly inside one fringe period. Success is judged by
    encoding the patterns and re-simulating the physical scan.

    Parameters
    ----------
    scan : clean ScanResult of ``scene`` (phase, correspondence, patterns).
    label : true identity of the scanned face.
    """
    _check_model(model)
    cfg = config if config.mode == "impersonate" else replace(config, target=label)
    phi0 = scan.absolute
    mask = phi0.mask
    ns = phi0.fringe_count
    width = setup.pattern_width
    two_pi_ns = TWO_PI * ns

    p0 = (phi0.values[mask].detach() / two_pi_ns)
    sen_vec = sensitivity_map(phi0).weights[mask] if cfg.sensitivity else torch.ones_like(p0)
    # hard ceiling: strictly inside one fringe period so the gray order is
    # preserved; practical ceiling: small enough that a single pixel cannot
    # turn into a depth outlier that dominates sampling and normalization
    band = min(1.0 / ns - cfg.column_margin_px / width, cfg.max_shift_px / width)
    if band <= 0:
        raise InvalidConfig("column margin leaves no room inside one fringe period")
    lo_b = torch.clamp(p0 - band, min=0.0)
    hi_b = torch.clamp(p0 + band, max=float(np.nextafter(1.0, 0.0)))
    view_dir = view_ray_direction(setup.camera)
    norm_const = _clean_norm_constants(scan.cloud.points)
    mask_idx = tuple(torch.nonzero(mask, as_tuple=False).T)

    def distance_value(p: torch.Tensor) -> float:
        d = (p - p0) * two_pi_ns
        if cfg.distance_metric == "l1":
            return float((sen_vec * d.abs()).sum())
        return float((d ** 2).sum())

    def resim_and_wrap(p: torch.Tensor, lam: float, trace, iters: int,
                       surrogate_success: bool) -> AttackResult:
        phi_adv = _phase_map_from_vector(phi0, p * two_pi_ns)
        patterns_adv, conflicts = encode_adversarial_patterns(
            phi_adv, scan.patterns, scan.correspondence)
        rescan = simulate_scan(scene, setup, patterns=patterns_adv,
                               seed=stable_seed("resim", cfg.seed), context=scan.context)
        logits = _resim_logits(model, rescan.cloud, setup, cfg,
                               stable_seed("resim-fps", cfg.seed))
        pred = int(logits.argmax())
        if cfg.mode == "dodge":
            success = pred != label
        else:
            success = pred == cfg.target
        rmse = float(rmse_aligned(rescan.cloud, scan.cloud))
        meand = float(mean_point_distance(rescan.cloud, scan.cloud))
        return AttackResult(
            success=success,
            surrogate_success=surrogate_success,
            mode=cfg.mode,
            label=label,
            target=cfg.target,
            lam=lam,
            logits=logits.detach(),
            adv_cloud=rescan.cloud,
            patterns=patterns_adv,
            phase=phi_adv,
            rmse=rmse,
            mean_distance=meand,
            l1=float(((p - p0).abs() * two_pi_ns).sum()),
            distance_loss=distance_value(p),
            conflicts=conflicts,
            iterations_run=iters,
            trace=trace,
        )

    def delivered_vector(pv: torch.Tensor, jitter_rng=None) -> torch.Tensor:
        """What the scanner will plausibly decode for demand ``pv``.

        The projector cannot present each camera pixel an independent column:
        bilinear capture mixes neighboring demands, which acts as a small
        spatial low-pass on the perturbation field. Optimizing through this
        operator keeps the surrogate honest about what encode + rescan can
        deliver; optional jitter models the residual delivery error.
        """
        out = pv
        if cfg.delivery_sigma > 0:
            dm = torch.zeros_like(phi0.values)
            dm = dm.index_put(mask_idx, pv - p0)
            out = p0 + _masked_smooth(dm, mask, cfg.delivery_sigma)[mask]
        if jitter_rng is not None and cfg.phase_jitter > 0:
            out = out + torch.from_numpy(
                jitter_rng.normal(0.0, cfg.phase_jitter, size=p0.shape[0]))
        return torch.clamp(out, lo_b, hi_b)

    def surrogate_pred(p: torch.Tensor) -> int:
        with torch.no_grad():
            phi_adv = _phase_map_from_vector(phi0, delivered_vector(p) * two_pi_ns)
            cloud = reconstruct_cloud(phi_adv, setup.camera, setup.projector, width)
            logits = _resim_logits(model, cloud, setup, cfg,
                                   stable_seed("surr-fps", cfg.seed))
            return int(logits.argmax())

    def surrogate_ok(p: torch.Tensor) -> bool:
        pred = surrogate_pred(p)
        return pred != label if cfg.mode == "dodge" else pred == cfg.target

    def attempt(lam: float) -> AttackResult:
        rng = rng_for("pattern-init", cfg.seed, f"{lam:.6e}")
        trace = []
        p = p0.clone()
        if cfg.iterations > 0 and cfg.init_noise > 0:
            noise = torch.from_numpy(
                rng.uniform(-1.0, 1.0, size=p.shape[0])) * (cfg.init_noise / two_pi_ns)
            p = torch.clamp(p + noise, lo_b, hi_b)
        saturated_run = 0
        iters = 0
        velocity = torch.zeros_like(p)
        adam_m = torch.zeros_like(p)
        adam_v = torch.zeros_like(p)
        for it in range(cfg.iterations):
            leaf = p.clone().requires_grad_(True)
            delivered = delivered_vector(leaf, rng_for("phase-jitter", cfg.seed, it))
            phi_t = _phase_map_from_vector(phi0, delivered * two_pi_ns)
            cloud = reconstruct_cloud(phi_t, setup.camera, setup.projector, width)
            pts_var = cloud.points.detach().requires_grad_(True)
            logits = chain_logits(pts_var, model, cfg, setup,
                                  stable_seed("iter", cfg.seed, it),
                                  norm_const=norm_const)
            losses = logits_loss(logits, cfg.target, cfg.mode, cfg.margin)
            loss_adv = losses.mean()
            if it == 0 and float(loss_adv.detach()) <= -cfg.margin + 1e-12 and cfg.mode == "dodge":
                # already misclassified with full margin: nothing to optimize
                return resim_and_wrap(p0, lam, trace, 0, surrogate_ok(p0))
            g_pts, = torch.autograd.grad(loss_adv, pts_var, allow_unused=True)
            if g_pts is None:
                g_p = torch.zeros_like(p)
            else:
                if cfg.direction_constraint:
                    g_pts = constrain_gradient(g_pts, view_dir, setup.camera)
                g_p, = torch.autograd.grad(cloud.points, leaf, grad_outputs=g_pts)
            d = (p - p0) * two_pi_ns
            if cfg.distance_metric == "l1":
                g_dist = lam * sen_vec * torch.sign(d) * two_pi_ns
            else:
                g_dist = lam * 2.0 * d * two_pi_ns
            delta = g_p + g_dist
            if not bool(torch.isfinite(delta).all()):
                raise NonFiniteGradient(f"non-finite gradient at iteration {it}")
            if cfg.smooth_sigma > 0:
                # steps are smoothed so neighboring column demands stay
                # coherent; a sharp per-pixel phase jump cannot survive the
                # projector's bilinear footprint anyway (carrier interference)
                dm = torch.zeros_like(phi0.values)
                dm[mask] = delta
                delta = _masked_smooth(dm, mask, cfg.smooth_sigma)[mask]
            alpha = cfg.step_size * cfg.step_decay ** it
            if cfg.optimizer == "adam":
                adam_m = 0.9 * adam_m + 0.1 * delta
                adam_v = 0.999 * adam_v + 0.001 * delta ** 2
                mh = adam_m / (1.0 - 0.9 ** (it + 1))
                vh = adam_v / (1.0 - 0.999 ** (it + 1))
                p = torch.clamp(p - alpha * mh / (vh.sqrt() + 1e-12),
                                lo_b, hi_b).detach()
            else:
                norm = float(torch.linalg.norm(delta))
                if cfg.momentum > 0 and norm > 1e-20:
                    # accumulate normalized gradients so a persistent direction
                    # survives the transform-sampling noise
                    velocity = cfg.momentum * velocity + delta / norm
                    delta = velocity
                    norm = float(torch.linalg.norm(delta))
                if norm > 1e-20:
                    p = torch.clamp(p - alpha * delta / norm, lo_b, hi_b).detach()
            iters = it + 1
            la = float(loss_adv.detach())
            dv = distance_value(p)
            trace.append({
                "iteration": it,
                "adv_loss": la,
                "distance_loss": dv,
                "total_loss": la + lam * dv,
                "margin": la,
                "step_norm": float(torch.linalg.norm(delta)),
            })
            if la <= -cfg.margin + 1e-9:
                saturated_run += 1
                if cfg.stop_when_saturated and saturated_run >= cfg.stop_when_saturated:
                    break
            else:
                saturated_run = 0
            if cfg.check_every and (it + 1) % cfg.check_every == 0:
                # the rescan is the ground truth; stop as soon as it agrees
                checked = resim_and_wrap(p, lam, trace, iters, surrogate_ok(p))
                if checked.success:
                    return checked
        return resim_and_wrap(p, lam, trace, iters, surrogate_ok(p))

    def guarded(lam: float) -> AttackResult:
        try:
            return attempt(lam)
        except NonFiniteGradient as exc:
            return AttackResult(
                success=False, surrogate_success=False, mode=cfg.mode, label=label,
                target=cfg.target, lam=lam, logits=None, adv_cloud=None,
                error=str(exc),
            )

    try:
        return lambda_search(guarded, cfg)
    except AllStepsFailed as exc:
        fallback = guarded(math.sqrt(cfg.lambda_lo * cfg.lambda_hi))
        fallback.error = str(exc)
        fallback.success = False
        return fallback


# --- metrics ----------------------------------------------------------------


def _match_by_pixel(adv: PointCloud, clean: PointCloud):
    if adv.source_pixels is None or clean.source_pixels is None:
        raise InvalidConfig("aligned metrics need source-pixel provenance")
    wbig = 1 << 20
    ka = (adv.source_pixels[:, 1].to(torch.int64) * wbig + adv.source_pixels[:, 0]).numpy()
    kc = (clean.source_pixels[:, 1].to(torch.int64) * wbig + clean.source_pixels[:, 0]).numpy()
    common, ia, ic = np.intersect1d(ka, kc, return_indices=True)
    if common.size == 0:
        raise NoOverlap("clouds share no source pixels")
    return torch.from_numpy(ia), torch.from_numpy(ic)


def _normalized(points: torch.Tensor) -> torch.Tensor:
    c = points.mean(dim=0)
    r = torch.linalg.norm(points - c, dim=1).max()
    return (points - c) / r


def rmse_aligned(adv: PointCloud, clean: PointCloud) -> torch.Tensor:
    """Count-scaled displacement between provenance-matched clouds.

    Both clouds are centered and unit-scaled, matched on source pixels, and
    the mean point displacement is divided once more by the matched count
    (table-comparison convention of the reconstruction-accuracy metric).
    Differentiable in the adversarial points.
    """
    ia, ic = _match_by_pixel(adv, clean)
    pa = _normalized(adv.points)[ia]
    pc = _normalized(clean.points)[ic]
    n = pa.shape[0]
    return torch.linalg.norm(pa - pc, dim=1).mean() / n


def mean_point_distance(adv: PointCloud, clean: PointCloud) -> torch.Tensor:
    """Conventional mean matched-point distance on normalized clouds."""
    ia, ic = _match_by_pixel(adv, clean)
    pa = _normalized(adv.points)[ia]
    pc = _normalized(clean.points)[ic]
    return torch.linalg.norm(pa - pc, dim=1).mean()


# --- single-fringe surrogate ------------------------------------------------


@dataclass
class CarrierParams:
    """Known carrier for quadrature demodulation of a single fringe image.

    ``phase_ref`` is the per-pixel carrier phase (from a clean calibration
    scan); ``smoothing_radius`` sets the separable Gaussian low-pass that
    isolates the baseband after mixing.
    """

    phase_ref: torch.Tensor
    smoothing_radius: int = 8
    threshold: float = 0.01
    fringe_count: int = 16

    def __post_init__(self):
        if self.phase_ref.ndim != 2:
            raise ShapeMismatch("carrier phase must be a 2-D map")
        if self.smoothing_radius < 1:
            raise InvalidConfig("smoothing radius must be >= 1")


def _gaussian_kernel(radius: int) -> torch.Tensor:
    sigma = max(radius / 2.0, 0.8)
    x = torch.arange(-radius, radius + 1, dtype=DTYPE)
    k = torch.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _lowpass(image: torch.Tensor, radius: int) -> torch.Tensor:
    k = _gaussian_kernel(radius)
    x = image[None, None]
    x = F.pad(x, (radius, radius, 0, 0), mode="reflect")
    x = F.conv2d(x, k.reshape(1, 1, 1, -1))
    x = F.pad(x, (0, 0, radius, radius), mode="reflect")
    x = F.conv2d(x, k.reshape(1, 1, -1, 1))
    return x[0, 0]


def fringe_analysis_surrogate(image: torch.Tensor, carrier: CarrierParams) -> PhaseMap:
    """Differentiable wrapped-phase estimate from one fringe image.

    Mixes the image against the known carrier, low-passes both quadratures,
    and reads the local phase offset:

        M = LP(I sin c), D = LP(I cos c), phase = wrap(c - atan2(M, D))

    (offset-free input reproduces the carrier). Modulation is twice the
    quadrature magnitude; pixels below ``carrier.threshold`` are masked.
    """
    img = as_f64(image)
    c = carrier.phase_ref
    if img.shape != c.shape:
        raise ShapeMismatch("image and carrier grids differ")
    m = _lowpass(img * torch.sin(c), carrier.smoothing_radius)
    d = _lowpass(img * torch.cos(c), carrier.smoothing_radius)
    values = wrap_angle(c - torch.atan2(m, d))
    modulation = 2.0 * torch.sqrt(m ** 2 + d ** 2)
    mask = (modulation >= carrier.threshold).detach()
    return PhaseMap(values=values, kind="wrapped", mask=mask,
                    fringe_count=carrier.fringe_count, modulation=modulation)


def rebase_to_absolute(wrapped: PhaseMap, reference_absolute: PhaseMap) -> PhaseMap:
    """Lift a wrapped estimate to absolute phase using a clean reference.

    The fringe order comes from rounding against the reference (detached);
    gradients flow through the wrapped values only.
    """
    ns = reference_absolute.fringe_count
    ref = reference_absolute.values
    k = torch.round((ref - wrapped.values) / TWO_PI).detach()
    values = wrapped.values + TWO_PI * k
    top = TWO_PI * ns
    values = torch.clamp(values, 0.0, float(np.nextafter(top, 0.0)))
    mask = wrapped.mask & reference_absolute.mask
    values = torch.where(mask, values, torch.zeros_like(values))
    return PhaseMap(values=values, kind="absolute", mask=mask, fringe_count=ns,
                    modulation=wrapped.modulation)


# --- illumination attack ----------------------------------------------------


def phase_superposition_attack(scene, setup: ScannerSetup, carrier: CarrierParams,
                               model: ModelParams, config: AttackConfig, label: int,
                               gamma: GammaModel, clean_scan: Optional[ScanResult] = None) -> AttackResult:
    """Optimize an attacker illumination field against a single-fringe scan.

    The attacker adds a camera-aligned light whose intensity field is
    optimized by sign-gradient descent through: Lambertian relighting ->
    single-fringe capture -> differentiable phase estimation -> absolute
    rebase -> reconstruction -> transform-expectation margin loss, plus a
    reconstruction-RMSE anchor and a sensitivity-weighted L1 cost (weighted
    by the searched lambda). Success is re-simulated with the saturating
    response model and sensor noise sigma = 0.005.

    With ``gamma_in_loop`` the optimization variable is the delivered
    intensity (bounded by the response's reachable range) and the returned
    illumination is pre-corrected through the inverse response, so the
    projector emits what was optimized. Without it the variable is projected
    directly and the response distorts it at re-simulation time.
    """
    _check_model(model)
    cfg = config if config.mode == "impersonate" else replace(config, target=label)
    scan = clean_scan if clean_scan is not None else simulate_scan(scene, setup, seed=cfg.seed)
    ctx = scan.context
    single = scan.patterns.shift_patterns[0]
    phi_ref = scan.absolute
    sen = sensitivity_map(phi_ref).weights if cfg.sensitivity else torch.ones(setup.cam_shape, dtype=DTYPE)
    resim_sigma = 0.005 if cfg.resim_noise is None else cfg.resim_noise

    def estimate_cloud(img: torch.Tensor) -> PointCloud:
        est = fringe_analysis_surrogate(img, carrier)
        absolute = rebase_to_absolute(est, phi_ref)
        return reconstruct_cloud(absolute, setup.camera, setup.projector, setup.pattern_width)

    with torch.no_grad():
        img0, _ = render_capture(scene, setup.camera, setup.projector, single,
                                 params=setup.render, context=ctx)
        clean_cloud = estimate_cloud(img0)
    norm_const = _clean_norm_constants(clean_cloud.points)

    def eval_with(x: torch.Tensor, noise_seed: int, sigma: float,
                  response: Optional[GammaModel]):
        # an identically zero field means the attacker projector is off, not
        # displaying black, so no black-level glow is added
        extra = x if bool(torch.any(x)) else None
        img, _ = render_capture(scene, setup.camera, setup.projector, single,
                                extra_illum=extra, gamma=response, noise_sigma=sigma,
                                seed=noise_seed, params=setup.render, context=ctx)
        cloud = estimate_cloud(img)
        logits = _resim_logits(model, cloud, setup, cfg,
                               stable_seed("ps-eval-fps", cfg.seed))
        return cloud, logits

    # Loop variable is delivered intensity when the response is modeled,
    # raw projector input otherwise; bounds follow the reachable range.
    if cfg.gamma_in_loop:
        floor = float(gamma_distort(torch.zeros(()), gamma))
        ceil = float(gamma_distort(torch.ones(()), gamma))
    else:
        floor, ceil = 0.0, 1.0

    def attempt(lam: float) -> AttackResult:
        var = torch.full(setup.cam_shape, min(floor + cfg.init_noise, ceil), dtype=DTYPE)
        trace = []
        saturated_run = 0
        iters = 0
        for it in range(cfg.iterations):
            leaf = var.clone().requires_grad_(True)
            img, _ = render_capture(
                scene, setup.camera, setup.projector, single, extra_illum=leaf,
                params=setup.render, context=ctx,
            )
            cloud = estimate_cloud(img)
            logits = chain_logits(cloud.points, model, cfg, setup,
                                  stable_seed("ps-iter", cfg.seed, it),
                                  norm_const=norm_const)
            losses = logits_loss(logits, cfg.target, cfg.mode, cfg.margin)
            loss_adv = losses.mean() if losses.ndim else losses
            rmse_t = rmse_aligned(cloud, clean_cloud)
            spars = (sen * (leaf - floor).abs()).sum()
            total = loss_adv + cfg.lambda_rmse * rmse_t + lam * spars
            g, = torch.autograd.grad(total, leaf)
            if not bool(torch.isfinite(g).all()):
                raise NonFiniteGradient(f"non-finite gradient at iteration {it}")
            var = torch.clamp(var - cfg.illum_step * torch.sign(g), floor, ceil).detach()
            iters = it + 1
            la = float(loss_adv.detach())
            trace.append({
                "iteration": it,
                "adv_loss": la,
                "rmse": float(rmse_t.detach()),
                "sparsity": float(spars.detach()),
                "total_loss": float(total.detach()),
                "margin": la,
            })
            if la <= -cfg.margin + 1e-9:
                saturated_run += 1
                if cfg.stop_when_saturated and saturated_run >= cfg.stop_when_saturated:
                    break
            else:
                saturated_run = 0

        x = gamma_inverse(var, gamma) if cfg.gamma_in_loop else var
        with torch.no_grad():
            adv_cloud, logits = eval_with(x, stable_seed("ps-resim", cfg.seed),
                                          resim_sigma, gamma)
            surr_cloud, surr_logits = eval_with(var, 0, 0.0, None)
        pred = int(logits.argmax())
        spred = int(surr_logits.argmax())
        if cfg.mode == "dodge":
            success = pred != label
            surr = spred != label
        else:
            success = pred == cfg.target
            surr = spred == cfg.target
        return AttackResult(
            success=success,
            surrogate_success=surr,
            mode=cfg.mode,
            label=label,
            target=cfg.target,
            lam=lam,
            logits=logits.detach(),
            adv_cloud=adv_cloud,
            illumination=x.detach(),
            rmse=float(rmse_aligned(adv_cloud, clean_cloud)),
            mean_distance=float(mean_point_distance(adv_cloud, clean_cloud)),
            l1=float(x.abs().sum()),
            distance_loss=float((sen * (var - floor).abs()).sum()),
            iterations_run=iters,
            trace=trace,
        )

    def guarded(lam: float) -> AttackResult:
        try:
            return attempt(lam)
        except NonFiniteGradient as exc:
            return AttackResult(
                success=False, surrogate_success=False, mode=cfg.mode, label=label,
                target=cfg.target, lam=lam, logits=None, adv_cloud=None, error=str(exc),
            )

    try:
        return lambda_search(guarded, cfg)
    except AllStepsFailed as exc:
        fallback = guarded(math.sqrt(cfg.lambda_lo * cfg.lambda_hi))
        fallback.error = str(exc)
        fallback.success = False
        return fallback
