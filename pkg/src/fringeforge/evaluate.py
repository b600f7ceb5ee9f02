"""Benchmark harness: attack sweeps, ablation grids, transfer and robustness.

Every sweep here follows the same discipline. Instances are seeded
individually from (run seed, model tag, mode, index), so results do not
depend on worker count or scheduling. A failing instance is recorded, never
allowed to abort the sweep. Every claimed success is recomputed from the
stored adversarial artifact by a second, independent re-simulation pass, and
reports keep both counts so they can be compared. Aggregation is a pure fold
over the sorted records: re-aggregating records parsed back from a
serialized report reproduces the report exactly.
"""

import hashlib
import multiprocessing as mp
import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .attack import (
    AttackConfig,
    AttackResult,
    CarrierParams,
    fringe_analysis_surrogate,
    phase_shifting_attack,
    phase_superposition_attack,
    rebase_to_absolute,
)
from .errors import InvalidConfig
from .io import canonical_json, ensure_dir, save_attack_result, write_json
from .photometric import GammaModel, render_capture, synth_face
from .pipeline import (
    ScannerSetup,
    ScanResult,
    cloud_to_depth_input,
    face_params,
    identity_seed,
    simulate_scan,
)
from .recognize import ModelParams, classify
from .reconstruct import (
    PointCloud,
    TransformParams,
    apply_rigid_transform,
    random_transform,
    reconstruct_cloud,
    renormalize,
)
from .util import configure_torch, rng_for, stable_seed, thread_count


# --- records and reports ----------------------------------------------------


@dataclass
class InstanceRecord:
    """One attack attempt plus its second-entry verification verdict.

    ``success`` is the attack's own re-simulated claim; ``verified`` is the
    harness recount from the stored artifact. The two must agree.
    ``transform_hits``/``transform_draws`` are only populated by sweeps that
    re-score the adversarial cloud under random rigid transforms.
    """

    index: int
    label: int
    mode: str
    model_tag: str
    target: int
    success: bool
    verified: bool
    surrogate_success: bool
    lam: float
    l1: float
    rmse: float
    mean_distance: float
    distance_loss: float
    iterations_run: int
    transform_hits: int = 0
    transform_draws: int = 0
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "InstanceRecord":
        return InstanceRecord(**d)


def record_sort_key(r: InstanceRecord):
    return (r.model_tag, r.mode, r.index)


def aggregate(records: Sequence[InstanceRecord]) -> dict:
    """Fold records into per-(model, mode) statistics.

    Pure function of the record multiset: records are sorted first and every
    statistic is an order-fixed fold over plain floats, so aggregating the
    same records twice (or after a serialization round trip) produces an
    identical dict. Failed and errored instances stay in the denominator.
    """
    acc: dict = {}
    for r in sorted(records, key=record_sort_key):
        g = acc.setdefault(r.model_tag, {}).setdefault(r.mode, {
            "total": 0, "successes": 0, "verified_successes": 0, "errors": 0,
            "rmse_sum": 0.0, "l1_values": [], "t_hits": 0, "t_draws": 0,
        })
        g["total"] += 1
        g["successes"] += int(r.success)
        g["verified_successes"] += int(r.verified)
        g["errors"] += int(r.error is not None)
        g["t_hits"] += r.transform_hits
        g["t_draws"] += r.transform_draws
        if r.success:
            g["rmse_sum"] += r.rmse
            g["l1_values"].append(r.l1)
    out: dict = {}
    for tag, modes in acc.items():
        out[tag] = {}
        for mode, g in modes.items():
            n, k = g["total"], g["successes"]
            out[tag][mode] = {
                "total": n,
                "successes": k,
                "verified_successes": g["verified_successes"],
                "errors": g["errors"],
                "asr": k / n if n else 0.0,
                "verified_asr": g["verified_successes"] / n if n else 0.0,
                "mean_rmse": g["rmse_sum"] / k if k else 0.0,
                "l1_mean": sum(g["l1_values"]) / k if k else 0.0,
                "l1_median": statistics.median(g["l1_values"]) if g["l1_values"] else 0.0,
                "transform_asr": g["t_hits"] / g["t_draws"] if g["t_draws"] else 0.0,
            }
    return out


@dataclass
class ExperimentReport:
    """Aggregated sweep outcome.

    ``runtime`` is wall-clock seconds and deliberately left out of
    :meth:`canonical_dict`, so two runs of the same configuration serialize
    to identical bytes; timing goes to a sidecar file instead.
    """

    seed: int
    attack: str
    flags: Dict[str, bool]
    groups: dict
    records: List[InstanceRecord]
    config: dict
    runtime: float = 0.0

    def canonical_dict(self) -> dict:
        return {
            "seed": self.seed,
            "attack": self.attack,
            "flags": self.flags,
            "groups": self.groups,
            "records": [r.to_dict() for r in sorted(self.records, key=record_sort_key)],
            "config": self.config,
        }

    def to_json(self) -> str:
        return canonical_json(self.canonical_dict())

    @staticmethod
    def from_canonical(d: dict) -> "ExperimentReport":
        return ExperimentReport(
            seed=d["seed"], attack=d["attack"], flags=d["flags"],
            groups=d["groups"],
            records=[InstanceRecord.from_dict(r) for r in d["records"]],
            config=d["config"],
        )


def render_table(report: ExperimentReport) -> str:
    """Human-readable summary table; RMSE is scaled by 10 here and only here."""
    head = (f"{'model':<12} {'mode':<12} {'ASR':>6} {'verif':>6} {'n':>4} "
            f"{'RMSE(x10)':>10} {'L1 med':>9}")
    lines = [head, "-" * len(head)]
    for tag in sorted(report.groups):
        for mode in sorted(report.groups[tag]):
            g = report.groups[tag][mode]
            lines.append(
                f"{tag:<12} {mode:<12} {g['asr']:>6.3f} {g['verified_asr']:>6.3f} "
                f"{g['total']:>4} {10.0 * g['mean_rmse']:>10.5f} {g['l1_median']:>9.3f}")
    return "\n".join(lines)


def config_hash(config: AttackConfig) -> str:
    payload = canonical_json(asdict(config)).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()[:16]


def run_dir(root, seed: int, config: AttackConfig) -> str:
    """Artifact directory addressed by run seed and config content hash."""
    return os.path.join(str(root), f"run-{seed}-{config_hash(config)}")


def write_report(dir_path, report: ExperimentReport) -> str:
    """Write report.json (canonical bytes), a rendered table, and timing.

    Only ``timing.json`` may differ between identical runs; comparisons for
    reproducibility should target ``report.json`` and ``table.txt``.
    """
    d = ensure_dir(dir_path)
    with open(os.path.join(d, "report.json"), "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    with open(os.path.join(d, "table.txt"), "w", encoding="utf-8") as fh:
        fh.write(render_table(report))
        fh.write("\n")
    write_json(os.path.join(d, "timing.json"), {"runtime_seconds": report.runtime})
    return d


# --- shared evaluation helpers ----------------------------------------------


def goal_met(pred: int, mode: str, label: int, target: int) -> bool:
    return pred != label if mode == "dodge" else pred == target


def victim_logits(model: ModelParams, cloud: PointCloud, setup: ScannerSetup,
                  sample_points: int, fps_seed: int) -> torch.Tensor:
    """Victim-side classification of a metric cloud (arch dispatch)."""
    if model.arch == "point":
        sub = renormalize(cloud, sample_to=sample_points, seed=fps_seed)
        return classify(model, sub.points)
    return classify(model, cloud_to_depth_input(cloud, setup, size=model.input_size)[None])


def impersonation_target(seed: int, index: int, label: int, class_count: int) -> int:
    """Uniform random target excluding the true label, stable per instance."""
    rng = rng_for("target", seed, index)
    t = label
    while t == label:
        t = int(rng.integers(0, class_count))
    return t


def attack_instance(model: ModelParams, setup: ScannerSetup, scene,
                    scan: ScanResult, icfg: AttackConfig, label: int, kind: str,
                    gamma: Optional[GammaModel] = None,
                    carrier: Optional[CarrierParams] = None) -> AttackResult:
    """Run one attack of the requested kind on a prepared instance."""
    if kind == "pattern":
        return phase_shifting_attack(scan, scene, setup, model, icfg, label)
    if kind == "superposition":
        if gamma is None or carrier is None:
            raise InvalidConfig("superposition attack needs a response model and a carrier")
        return phase_superposition_attack(scene, setup, carrier, model, icfg,
                                          label, gamma, clean_scan=scan)
    raise InvalidConfig(f"unknown attack kind {kind!r}")


def verify_result(model: ModelParams, setup: ScannerSetup, scene,
                  scan: ScanResult, result: AttackResult, icfg: AttackConfig,
                  kind: str, gamma: Optional[GammaModel] = None,
                  carrier: Optional[CarrierParams] = None) -> bool:
    """Second-entry verdict: re-simulate the stored artifact and classify.

    Deliberately ignores ``result.success`` and ``result.adv_cloud``; the
    only inputs taken from the attack are the physical artifacts (patterns
    or illumination field). Reports store this verdict next to the attack's
    own claim so the two bookkeeping paths can be compared exactly.
    """
    with torch.no_grad():
        if kind == "pattern":
            if result.patterns is None:
                return False
            rescan = simulate_scan(scene, setup, patterns=result.patterns,
                                   seed=stable_seed("resim", icfg.seed),
                                   context=scan.context)
            logits = victim_logits(model, rescan.cloud, setup, icfg.sample_points,
                                   stable_seed("resim-fps", icfg.seed))
        elif kind == "superposition":
            if result.illumination is None:
                return False
            sigma = 0.005 if icfg.resim_noise is None else icfg.resim_noise
            x = result.illumination
            # identically zero field: the attacker projector is off
            extra = x if bool(torch.any(x)) else None
            img, _ = render_capture(scene, setup.camera, setup.projector,
                                    scan.patterns.shift_patterns[0],
                                    extra_illum=extra, gamma=gamma,
                                    noise_sigma=sigma,
                                    seed=stable_seed("ps-resim", icfg.seed),
                                    params=setup.render, context=scan.context)
            est = fringe_analysis_surrogate(img, carrier)
            absolute = rebase_to_absolute(est, scan.absolute)
            cloud = reconstruct_cloud(absolute, setup.camera, setup.projector,
                                      setup.pattern_width)
            logits = victim_logits(model, cloud, setup, icfg.sample_points,
                                   stable_seed("ps-eval-fps", icfg.seed))
        else:
            raise InvalidConfig(f"unknown attack kind {kind!r}")
        return goal_met(int(logits.argmax()), result.mode, result.label, result.target)


def transformed_pred(model: ModelParams, cloud: PointCloud, setup: ScannerSetup,
                     sample_points: int, params: TransformParams, seed: int) -> int:
    """Prediction after a seeded random rigid transform of the cloud."""
    with torch.no_grad():
        moved = random_transform(cloud, params, seed)
        logits = victim_logits(model, moved, setup, sample_points,
                               stable_seed("tpred-fps", seed))
        return int(logits.argmax())


# --- worker pool ------------------------------------------------------------

_STATE: dict = {}


def _init_worker(payload: dict) -> None:
    configure_torch()
    _STATE.clear()
    _STATE.update(payload)
    _STATE["cache"] = {}


def _instance_inputs(idx: int):
    """Scene, clean scan and demodulation carrier for one identity.

    Cached per worker process; derivation depends only on the run seed and
    the identity index, never on the model or mode being attacked.
    """
    cache = _STATE["cache"]
    if idx not in cache:
        seed, setup = _STATE["seed"], _STATE["setup"]
        scene = synth_face(identity_seed(seed, idx), _STATE["scene_params"])
        scan = simulate_scan(scene, setup, seed=stable_seed("scan", seed, idx))
        carrier = CarrierParams(phase_ref=scan.absolute.values,
                                fringe_count=setup.fringe_count,
                                smoothing_radius=_STATE["carrier_radius"])
        cache[idx] = (scene, scan, carrier)
    return cache[idx]


def _map_tasks(fn, tasks, payload: dict, workers: Optional[int]):
    """Run tasks serially or over a process pool; output order is fixed.

    Each task is a pure function of (payload, task), so the worker count
    only affects wall time, never the results.
    """
    n = thread_count() if workers is None else max(1, int(workers))
    if n == 1 or len(tasks) <= 1:
        _init_worker(payload)
        return [fn(t) for t in tasks]
    ctx = mp.get_context("fork")
    with ProcessPoolExecutor(max_workers=min(n, len(tasks)), mp_context=ctx,
                             initializer=_init_worker,
                             initargs=(payload,)) as pool:
        return list(pool.map(fn, tasks))


def _blank_record(idx: int, mode: str, tag: str) -> dict:
    return dict(index=idx, label=idx, mode=mode, model_tag=tag, target=idx,
                success=False, verified=False, surrogate_success=False,
                lam=0.0, l1=0.0, rmse=0.0, mean_distance=0.0,
                distance_loss=0.0, iterations_run=0, transform_hits=0,
                transform_draws=0, error=None)


def _run_bench_task(task) -> dict:
    tag, mode, idx = task
    st = _STATE
    model, setup, seed, kind = st["models"][tag], st["setup"], st["seed"], st["attack"]
    record = _blank_record(idx, mode, tag)
    try:
        scene, scan, carrier = _instance_inputs(idx)
        label = idx
        target = (impersonation_target(seed, idx, label, model.class_count)
                  if mode == "impersonate" else label)
        icfg = replace(st["config"], mode=mode, target=target,
                       seed=stable_seed("bench", seed, tag, mode, idx))
        result = attack_instance(model, setup, scene, scan, icfg, label, kind,
                                 gamma=st["gamma"], carrier=carrier)
        verified = verify_result(model, setup, scene, scan, result, icfg, kind,
                                 gamma=st["gamma"], carrier=carrier)
        record.update(
            target=target, success=bool(result.success), verified=bool(verified),
            surrogate_success=bool(result.surrogate_success),
            lam=float(result.lam), l1=float(result.l1), rmse=float(result.rmse),
            mean_distance=float(result.mean_distance),
            distance_loss=float(result.distance_loss),
            iterations_run=int(result.iterations_run), error=result.error)
        if st.get("draws", 0) > 0 and result.adv_cloud is not None:
            hits = 0
            for k in range(st["draws"]):
                # draw seed excludes tag/mode combos that share instances
                pred = transformed_pred(model, result.adv_cloud, setup,
                                        icfg.sample_points, st["transforms"],
                                        stable_seed(st["draw_key"], seed, idx, k))
                hits += int(goal_met(pred, mode, label, target))
            record.update(transform_hits=hits, transform_draws=st["draws"])
        if st.get("out_dir"):
            inst = os.path.join(st["out_dir"], "instances", f"{tag}-{mode}-{idx:03d}")
            save_attack_result(inst, result, icfg)
    except Exception as exc:  # the sweep must finish; record the failure
        record["error"] = f"{type(exc).__name__}: {exc}"
    return record


# --- sweeps -----------------------------------------------------------------


def run_benchmark(models: Dict[str, ModelParams], setup: ScannerSetup,
                  config: AttackConfig, identities: int = 40,
                  modes: Sequence[str] = ("dodge", "impersonate"), seed: int = 0,
                  attack: str = "pattern", gamma: Optional[GammaModel] = None,
                  carrier_radius: int = 8, scene_params=None, out_dir=None,
                  workers: Optional[int] = None) -> ExperimentReport:
    """Attack every identity with every model and mode, then double-check.

    Per instance: the face comes from the run seed and identity index, the
    clean scan from ("scan", seed, index), the attack seed from
    ("bench", seed, model tag, mode, index) and the impersonation target
    from ("target", seed, index) so all models chase the same target.
    With ``iterations=0`` in the config the sweep measures the natural
    (clean-scan) error rate of each model. Artifacts land under a directory
    keyed by seed and config hash when ``out_dir`` is given.
    """
    configure_torch()
    t0 = time.perf_counter()
    if attack not in ("pattern", "superposition"):
        raise InvalidConfig(f"unknown attack kind {attack!r}")
    if attack == "superposition" and gamma is None:
        gamma = GammaModel(1.0)
    if scene_params is None:
        scene_params = face_params(setup)
    run_path = None
    if out_dir is not None:
        run_path = ensure_dir(run_dir(out_dir, seed, config))
    payload = dict(models=models, setup=setup, config=config, seed=seed,
                   attack=attack, gamma=gamma, scene_params=scene_params,
                   carrier_radius=carrier_radius, out_dir=run_path, draws=0)
    tasks = [(tag, mode, idx) for tag in sorted(models) for mode in modes
             for idx in range(identities)]
    raw = _map_tasks(_run_bench_task, tasks, payload, workers)
    records = [InstanceRecord.from_dict(d) for d in raw]
    report = ExperimentReport(
        seed=seed, attack=attack,
        flags={"direction_constraint": config.direction_constraint,
               "renorm_in_loop": config.renorm_in_loop, "tiv": config.tiv},
        groups=aggregate(records),
        records=sorted(records, key=record_sort_key),
        config=asdict(config), runtime=time.perf_counter() - t0)
    if run_path is not None:
        write_report(run_path, report)
    return report


ALL_FLAG_COMBOS = tuple((dc, rn, ti) for dc in (False, True)
                        for rn in (False, True) for ti in (False, True))


def ablation(model: ModelParams, setup: ScannerSetup, config: AttackConfig,
             identities: int = 10, mode: str = "impersonate", seed: int = 0,
             combos: Optional[Sequence] = None, transform_draws: int = 8,
             transform_params: Optional[TransformParams] = None,
             model_tag: str = "model", attack: str = "pattern",
             gamma: Optional[GammaModel] = None, carrier_radius: int = 8,
             scene_params=None, out_dir=None,
             workers: Optional[int] = None) -> List[ExperimentReport]:
    """One report per robustification-flag combination, on paired instances.

    Flags are (direction_constraint, renorm_in_loop, tiv); the all-off
    combination is the plain L1 attack baseline. Instance seeds exclude the
    flags, so every combination attacks the same faces, targets and
    initialization. Each record additionally re-scores the re-simulated
    adversarial cloud under ``transform_draws`` shared random rigid
    transforms (default sigma: 5 degrees rotation), and each group reports
    the resulting ``transform_asr``.
    """
    configure_torch()
    if combos is None:
        combos = ALL_FLAG_COMBOS
    if transform_params is None:
        transform_params = TransformParams()
    if scene_params is None:
        scene_params = face_params(setup)
    if attack == "superposition" and gamma is None:
        gamma = GammaModel(1.0)
    reports = []
    for dc, rn, ti in combos:
        t0 = time.perf_counter()
        combo_cfg = replace(config, direction_constraint=dc, renorm_in_loop=rn,
                            tiv=ti,
                            transform_samples=config.transform_samples if ti else 1)
        payload = dict(models={model_tag: model}, setup=setup, config=combo_cfg,
                       seed=seed, attack=attack, gamma=gamma,
                       scene_params=scene_params, carrier_radius=carrier_radius,
                       out_dir=None, draws=transform_draws,
                       transforms=transform_params, draw_key="ablate-draw",
                       seed_key="ablate")
        tasks = [(model_tag, mode, idx) for idx in range(identities)]
        raw = _map_tasks(_run_ablation_task, tasks, payload, workers)
        records = [InstanceRecord.from_dict(d) for d in raw]
        report = ExperimentReport(
            seed=seed, attack=attack,
            flags={"direction_constraint": dc, "renorm_in_loop": rn, "tiv": ti},
            groups=aggregate(records),
            records=sorted(records, key=record_sort_key),
            config=asdict(combo_cfg), runtime=time.perf_counter() - t0)
        if out_dir is not None:
            name = f"flags-{int(dc)}{int(rn)}{int(ti)}"
            write_report(os.path.join(ensure_dir(run_dir(out_dir, seed, config)), name),
                         report)
        reports.append(report)
    return reports


def _run_ablation_task(task) -> dict:
    """Benchmark task variant whose attack seed is flag-independent."""
    tag, mode, idx = task
    st = _STATE
    model, setup, seed, kind = st["models"][tag], st["setup"], st["seed"], st["attack"]
    record = _blank_record(idx, mode, tag)
    try:
        scene, scan, carrier = _instance_inputs(idx)
        label = idx
        target = (impersonation_target(seed, idx, label, model.class_count)
                  if mode == "impersonate" else label)
        icfg = replace(st["config"], mode=mode, target=target,
                       seed=stable_seed(st["seed_key"], seed, mode, idx))
        result = attack_instance(model, setup, scene, scan, icfg, label, kind,
                                 gamma=st["gamma"], carrier=carrier)
        verified = verify_result(model, setup, scene, scan, result, icfg, kind,
                                 gamma=st["gamma"], carrier=carrier)
        record.update(
            target=target, success=bool(result.success), verified=bool(verified),
            surrogate_success=bool(result.surrogate_success),
            lam=float(result.lam), l1=float(result.l1), rmse=float(result.rmse),
            mean_distance=float(result.mean_distance),
            distance_loss=float(result.distance_loss),
            iterations_run=int(result.iterations_run), error=result.error)
        if st["draws"] > 0 and result.adv_cloud is not None:
            hits = 0
            for k in range(st["draws"]):
                pred = transformed_pred(model, result.adv_cloud, setup,
                                        icfg.sample_points, st["transforms"],
                                        stable_seed(st["draw_key"], seed, idx, k))
                hits += int(goal_met(pred, mode, label, target))
            record.update(transform_hits=hits, transform_draws=st["draws"])
    except Exception as exc:
        record["error"] = f"{type(exc).__name__}: {exc}"
    return record


def transfer_matrix(models: Dict[str, ModelParams], setup: ScannerSetup,
                    config: AttackConfig, identities: int = 10,
                    mode: str = "impersonate", seed: int = 0,
                    attack: str = "pattern", gamma: Optional[GammaModel] = None,
                    carrier_radius: int = 8, scene_params=None,
                    workers: Optional[int] = None) -> dict:
    """Cross-model matrix: attack each shadow model, score every victim.

    Shadow-side attacks reuse the benchmark seed derivation, so the diagonal
    (shadow == victim) reproduces the corresponding white-box benchmark ASR
    exactly. Victim scores always come from re-simulating the stored
    artifact, never from the shadow's differentiable surrogate.
    """
    configure_torch()
    if attack == "superposition" and gamma is None:
        gamma = GammaModel(1.0)
    if scene_params is None:
        scene_params = face_params(setup)
    payload = dict(models=models, setup=setup, config=config, seed=seed,
                   attack=attack, gamma=gamma, scene_params=scene_params,
                   carrier_radius=carrier_radius, mode=mode)
    tags = sorted(models)
    tasks = [(tag, idx) for tag in tags for idx in range(identities)]
    raw = _map_tasks(_run_transfer_task, tasks, payload, workers)
    hits = {s: {v: 0 for v in tags} for s in tags}
    for entry in raw:
        for v, ok in entry["victims"].items():
            hits[entry["shadow"]][v] += int(ok)
    n = max(identities, 1)
    return {
        "tags": tags,
        "mode": mode,
        "total": identities,
        "successes": hits,
        "asr": {s: {v: hits[s][v] / n for v in tags} for s in tags},
    }


def _run_transfer_task(task) -> dict:
    shadow, idx = task
    st = _STATE
    setup, seed, kind, mode = st["setup"], st["seed"], st["attack"], st["mode"]
    model = st["models"][shadow]
    out = {"shadow": shadow, "index": idx,
           "victims": {v: False for v in st["models"]}}
    try:
        scene, scan, carrier = _instance_inputs(idx)
        label = idx
        target = (impersonation_target(seed, idx, label, model.class_count)
                  if mode == "impersonate" else label)
        icfg = replace(st["config"], mode=mode, target=target,
                       seed=stable_seed("bench", seed, shadow, mode, idx))
        result = attack_instance(model, setup, scene, scan, icfg, label, kind,
                                 gamma=st["gamma"], carrier=carrier)
        for vtag, victim in st["models"].items():
            out["victims"][vtag] = verify_result(
                victim, setup, scene, scan, result, icfg, kind,
                gamma=st["gamma"], carrier=carrier)
    except Exception:
        pass  # all-False row entry for this instance
    return out


def rotation_robustness(model: ModelParams, setup: ScannerSetup,
                        config: AttackConfig, instances: int = 20, seed: int = 0,
                        draws: int = 16, max_angle_deg: float = 10.0,
                        scene_params=None, workers: Optional[int] = None) -> dict:
    """Paired study of the transform expectation under test-time rotations.

    Each impersonation instance is attacked twice from the same seed: once
    with the transform expectation enabled and once without. Both resulting
    adversarial clouds are re-scored under the same ``draws`` random
    rotations (each Euler angle uniform in +-``max_angle_deg``, about the
    cloud centroid). Reports per-instance mean target softmax and the
    fraction of rotations at which the target still wins, for both arms.
    """
    configure_torch()
    if scene_params is None:
        scene_params = face_params(setup)
    payload = dict(models={"model": model}, setup=setup, config=config,
                   seed=seed, attack="pattern", gamma=None, carrier_radius=8,
                   scene_params=scene_params, draws=draws,
                   max_angle=float(np.deg2rad(max_angle_deg)))
    tasks = list(range(instances))
    rows = _map_tasks(_run_rotation_task, tasks, payload, workers)
    ok = [r for r in rows if r["error"] is None]
    with_probs = [r["with_tiv"]["mean_prob"] for r in ok]
    without_probs = [r["without_tiv"]["mean_prob"] for r in ok]
    retained = [r["with_tiv"]["hit_fraction"] for r in ok if r["with_tiv"]["success"]]
    return {
        "instances": rows,
        "paired": len(ok),
        "mean_prob_with": sum(with_probs) / len(ok) if ok else 0.0,
        "mean_prob_without": sum(without_probs) / len(ok) if ok else 0.0,
        "retention_with": retained,
        "mean_retention_with": sum(retained) / len(retained) if retained else 0.0,
    }


def _rotation_score(model, cloud, setup, sample_points, target, seed, idx,
                    draws, max_angle) -> dict:
    probs, hits = [], 0
    for k in range(draws):
        rng = rng_for("rot-draw", seed, idx, k)
        angles = rng.uniform(-max_angle, max_angle, size=3)
        centroid = cloud.points.mean(dim=0)
        pts = apply_rigid_transform(cloud.points, angles,
                                    torch.zeros(3), pivot=centroid)
        moved = PointCloud(points=pts, source_pixels=cloud.source_pixels)
        logits = victim_logits(model, moved, setup, sample_points,
                               stable_seed("rot-fps", seed, idx, k))
        p = torch.softmax(logits.reshape(-1), dim=0)
        probs.append(float(p[target]))
        hits += int(int(logits.argmax()) == target)
    return {"mean_prob": sum(probs) / len(probs) if probs else 0.0,
            "hit_fraction": hits / draws if draws else 0.0}


def _run_rotation_task(idx: int) -> dict:
    st = _STATE
    model, setup, seed = st["models"]["model"], st["setup"], st["seed"]
    out = {"index": idx, "error": None, "target": idx,
           "with_tiv": None, "without_tiv": None}
    try:
        scene, scan, _ = _instance_inputs(idx)
        label = idx
        target = impersonation_target(seed, idx, label, model.class_count)
        out["target"] = target
        base = replace(st["config"], mode="impersonate", target=target,
                       seed=stable_seed("rot", seed, idx))
        for key, arm_cfg in (
                ("with_tiv", replace(base, tiv=True)),
                ("without_tiv", replace(base, tiv=False, transform_samples=1))):
            result = attack_instance(model, setup, scene, scan, arm_cfg, label,
                                     "pattern")
            if result.adv_cloud is None:
                out[key] = {"mean_prob": 0.0, "hit_fraction": 0.0,
                            "success": False}
                continue
            score = _rotation_score(model, result.adv_cloud, setup,
                                    arm_cfg.sample_points, target, seed, idx,
                                    st["draws"], st["max_angle"])
            score["success"] = bool(result.success)
            out[key] = score
    except Exception as exc:
        out["error"] = f"{type(exc).__name__}: {exc}"
        out["with_tiv"] = {"mean_prob": 0.0, "hit_fraction": 0.0, "success": False}
        out["without_tiv"] = {"mean_prob": 0.0, "hit_fraction": 0.0, "success": False}
    return out


def sparsity_comparison(model: ModelParams, setup: ScannerSetup,
                        config: AttackConfig, instances: int = 10,
                        mode: str = "dodge", seed: int = 0, scene_params=None,
                        workers: Optional[int] = None) -> dict:
    """Paired sparsity study: sensitivity-weighted L1 vs plain L2 objective.

    Both arms attack the same instances from the same seeds; pairs where
    both arms succeed are compared by the L1 norm of the delivered phase
    perturbation (radians).
    """
    configure_torch()
    if scene_params is None:
        scene_params = face_params(setup)
    payload = dict(models={"model": model}, setup=setup, config=config,
                   seed=seed, attack="pattern", gamma=None, carrier_radius=8,
                   scene_params=scene_params, mode=mode)
    tasks = list(range(instances))
    rows = _map_tasks(_run_sparsity_task, tasks, payload, workers)
    pairs = [r for r in rows if r["weighted"]["success"] and r["plain"]["success"]]
    l1_weighted = [r["weighted"]["l1"] for r in pairs]
    l1_plain = [r["plain"]["l1"] for r in pairs]
    wins = sum(1 for a, b in zip(l1_weighted, l1_plain) if a < b)
    return {
        "instances": rows,
        "pairs": len(pairs),
        "median_weighted": statistics.median(l1_weighted) if l1_weighted else 0.0,
        "median_plain": statistics.median(l1_plain) if l1_plain else 0.0,
        "win_fraction": wins / len(pairs) if pairs else 0.0,
    }


def _run_sparsity_task(idx: int) -> dict:
    st = _STATE
    model, setup, seed, mode = st["models"]["model"], st["setup"], st["seed"], st["mode"]
    out = {"index": idx, "error": None,
           "weighted": {"success": False, "l1": 0.0},
           "plain": {"success": False, "l1": 0.0}}
    try:
        scene, scan, _ = _instance_inputs(idx)
        label = idx
        target = (impersonation_target(seed, idx, label, model.class_count)
                  if mode == "impersonate" else label)
        base = replace(st["config"], mode=mode, target=target,
                       seed=stable_seed("sparse", seed, idx))
        for key, arm_cfg in (
                ("weighted", replace(base, sensitivity=True, distance_metric="l1")),
                ("plain", replace(base, sensitivity=False, distance_metric="l2"))):
            result = attack_instance(model, setup, scene, scan, arm_cfg, label,
                                     "pattern")
            out[key] = {"success": bool(result.success), "l1": float(result.l1)}
    except Exception as exc:
        out["error"] = f"{type(exc).__name__}: {exc}"
    return out
