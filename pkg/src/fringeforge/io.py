"""Artifact serialization: images, phase maps, clouds, calibration, models.

Formats are deliberately plain: 16-bit PGM for intensity images, ASCII PLY
for clouds, raw float64 + JSON sidecars for phase maps and model weights.
All JSON written here is canonical (sorted keys, fixed separators) so byte
comparisons are meaningful.
"""

import json
import os
from typing import Optional

import numpy as np
import torch

from .errors import InvalidConfig, ShapeMismatch
from .fringe import PhaseMap
from .geometry import ProjectionMatrix
from .reconstruct import PointCloud
from .util import DTYPE


def canonical_json(obj) -> str:
    """Deterministic JSON text for report/byte-identity purposes."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(obj))
        fh.write("\n")


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


# --- PGM (16-bit) -----------------------------------------------------------


def write_pgm16(path, image) -> None:
    """Store an intensity image in [0, 1] as 16-bit binary PGM."""
    arr = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
    if arr.ndim != 2:
        raise ShapeMismatch(f"PGM image must be 2-D, got {arr.shape}")
    scaled = np.clip(np.round(arr * 65535.0), 0, 65535).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n65535\n".encode("ascii"))
        fh.write(scaled.tobytes())


def read_pgm16(path) -> torch.Tensor:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise InvalidConfig(f"{path} is not a binary PGM file")
    # header: magic, width height, maxval; comments not emitted by the writer
    parts = data.split(b"\n", 3)
    if len(parts) < 4:
        raise InvalidConfig(f"{path}: truncated PGM header")
    w, h = (int(t) for t in parts[1].split())
    maxval = int(parts[2])
    raw = parts[3][: w * h * 2]
    arr = np.frombuffer(raw, dtype=">u2").reshape(h, w).astype(np.float64) / maxval
    return torch.from_numpy(arr)


# --- PLY --------------------------------------------------------------------


def write_ply(path, cloud: PointCloud) -> None:
    """ASCII PLY with optional source-pixel provenance properties."""
    pts = cloud.points.detach().cpu().numpy()
    has_src = cloud.source_pixels is not None
    with open(path, "w", encoding="ascii") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {pts.shape[0]}\n")
        fh.write("property double x\nproperty double y\nproperty double z\n")
        if has_src:
            fh.write("property int source_u\nproperty int source_v\n")
        fh.write("end_header\n")
        if has_src:
            src = cloud.source_pixels.cpu().numpy()
            for p, s in zip(pts, src):
                fh.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r} "
                         f"{int(s[0])} {int(s[1])}\n")
        else:
            for p in pts:
                fh.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")


def read_ply(path) -> PointCloud:
    with open(path, "r", encoding="ascii") as fh:
        line = fh.readline().strip()
        if line != "ply":
            raise InvalidConfig(f"{path} is not a PLY file")
        count = 0
        props = []
        while True:
            line = fh.readline()
            if not line:
                raise InvalidConfig(f"{path}: unterminated PLY header")
            line = line.strip()
            if line.startswith("element vertex"):
                count = int(line.split()[-1])
            elif line.startswith("property"):
                props.append(line.split()[-1])
            elif line == "end_header":
                break
        rows = [fh.readline().split() for _ in range(count)]
    pts = torch.tensor([[float(r[0]), float(r[1]), float(r[2])] for r in rows], dtype=DTYPE)
    if pts.numel() == 0:
        pts = pts.reshape(0, 3)
    src = None
    if "source_u" in props:
        iu = props.index("source_u")
        src = torch.tensor([[int(r[iu]), int(r[iu + 1])] for r in rows], dtype=torch.int64)
        if src.numel() == 0:
            src = src.reshape(0, 2)
    return PointCloud(points=pts, source_pixels=src)


# --- phase maps -------------------------------------------------------------


def save_phase_map(path_base, phase: PhaseMap) -> None:
    """Raw float64 binary (masked pixels NaN) + JSON sidecar.

    ``path_base`` gets extensions ``.f64`` and ``.json``.
    """
    vals = phase.values.detach().cpu().numpy().astype(np.float64).copy()
    vals[~phase.mask.cpu().numpy()] = np.nan
    with open(str(path_base) + ".f64", "wb") as fh:
        fh.write(vals.tobytes())
    h, w = phase.shape
    write_json(str(path_base) + ".json", {
        "width": w,
        "height": h,
        "kind": phase.kind,
        "fringe_count": phase.fringe_count,
        "decode_failures": phase.decode_failures,
        "dtype": "float64",
    })


def load_phase_map(path_base) -> PhaseMap:
    meta = read_json(str(path_base) + ".json")
    with open(str(path_base) + ".f64", "rb") as fh:
        vals = np.frombuffer(fh.read(), dtype=np.float64).reshape(meta["height"], meta["width"])
    mask = np.isfinite(vals)
    clean = np.where(mask, vals, 0.0)
    return PhaseMap(
        values=torch.from_numpy(clean.copy()),
        kind=meta["kind"],
        mask=torch.from_numpy(mask.copy()),
        fringe_count=meta["fringe_count"],
        decode_failures=meta.get("decode_failures", 0),
    )


# --- calibration ------------------------------------------------------------


def _device_dict(dev: ProjectionMatrix) -> dict:
    return {
        "K": dev.intrinsics.cpu().numpy().tolist(),
        "R": dev.rotation.cpu().numpy().tolist(),
        "T": dev.translation.cpu().numpy().tolist(),
    }


def save_calibration(path, camera: ProjectionMatrix, projector: ProjectionMatrix) -> None:
    write_json(path, {"camera": _device_dict(camera), "projector": _device_dict(projector)})


def load_calibration(path):
    doc = read_json(path)
    out = []
    for key in ("camera", "projector"):
        d = doc[key]
        out.append(ProjectionMatrix(
            intrinsics=torch.tensor(d["K"], dtype=DTYPE),
            rotation=torch.tensor(d["R"], dtype=DTYPE),
            translation=torch.tensor(d["T"], dtype=DTYPE),
        ))
    return tuple(out)


# --- models -----------------------------------------------------------------


def save_model(path_base, model) -> None:
    """Flat float64 weight binary + JSON header (.bin / .json)."""
    params = list(model.module.state_dict().items())
    flat = np.concatenate([t.detach().cpu().numpy().astype(np.float64).ravel() for _, t in params])
    with open(str(path_base) + ".bin", "wb") as fh:
        fh.write(flat.tobytes())
    write_json(str(path_base) + ".json", {
        "arch": model.arch,
        "class_count": model.class_count,
        "width": model.width,
        "input_size": model.input_size,
        "seed": model.seed,
        "val_accuracy": model.val_accuracy,
        "tensors": [[name, list(t.shape)] for name, t in params],
    })


def load_model(path_base):
    from .recognize import DepthNetMini, ModelParams, PointNetMini

    meta = read_json(str(path_base) + ".json")
    if meta["arch"] == "point":
        module = PointNetMini(meta["class_count"], width=meta["width"], seed=meta["seed"])
    else:
        module = DepthNetMini(meta["class_count"], size=meta["input_size"],
                              width=max(4, meta["width"] // 4), seed=meta["seed"])
    with open(str(path_base) + ".bin", "rb") as fh:
        flat = np.frombuffer(fh.read(), dtype=np.float64)
    state = {}
    offset = 0
    for name, shape in meta["tensors"]:
        size = int(np.prod(shape)) if shape else 1
        state[name] = torch.from_numpy(flat[offset:offset + size].reshape(shape).copy())
        offset += size
    if offset != flat.size:
        raise InvalidConfig(f"{path_base}: weight payload size mismatch")
    module.load_state_dict(state)
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    return ModelParams(
        arch=meta["arch"],
        class_count=meta["class_count"],
        width=meta["width"],
        input_size=meta["input_size"],
        seed=meta["seed"],
        val_accuracy=meta["val_accuracy"],
        module=module,
    )


# --- traces and exports -----------------------------------------------------


def write_trace_csv(path, rows, columns) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_csv_cell(row[c]) for c in columns) + "\n")


def _csv_cell(v) -> str:
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def export_png(path, image, lo: Optional[float] = None, hi: Optional[float] = None) -> None:
    """8-bit grayscale preview of an intensity/phase/depth image."""
    from PIL import Image

    arr = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
    arr = arr.astype(np.float64)
    a = float(np.nanmin(arr)) if lo is None else lo
    b = float(np.nanmax(arr)) if hi is None else hi
    if b <= a:
        b = a + 1.0
    scaled = np.clip((arr - a) / (b - a) * 255.0, 0, 255)
    scaled = np.where(np.isfinite(scaled), scaled, 0.0).astype(np.uint8)
    Image.fromarray(scaled, mode="L").save(path)


def export_cloud_csv(path, cloud: PointCloud) -> None:
    pts = cloud.points.detach().cpu().numpy()
    with open(path, "w", encoding="ascii") as fh:
        fh.write("x,y,z\n")
        for p in pts:
            fh.write(f"{float(p[0])!r},{float(p[1])!r},{float(p[2])!r}\n")


def ensure_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return str(path)


# --- attack result directories ----------------------------------------------


def save_attack_result(dir_path, result, config) -> str:
    """Write one attack outcome as a directory of plain artifacts.

    Layout: ``metadata.json`` (config, seeds, lambda, success and summary
    stats), ``trace.csv`` / ``search_trace.csv``, pattern images as 16-bit
    PGM (``shift_NN.pgm`` / ``gray_NN.pgm``) or ``illumination.pgm``,
    ``adv_cloud.ply`` and the adversarial ``phase.f64/.json`` when present.
    """
    from dataclasses import asdict

    d = ensure_dir(dir_path)
    meta = {
        "mode": result.mode,
        "label": result.label,
        "target": result.target,
        "lambda": result.lam,
        "success": bool(result.success),
        "surrogate_success": bool(result.surrogate_success),
        "rmse": result.rmse,
        "mean_distance": result.mean_distance,
        "l1": result.l1,
        "distance_loss": result.distance_loss,
        "conflicts": result.conflicts,
        "iterations_run": result.iterations_run,
        "error": result.error,
        "seed": config.seed,
        "config": asdict(config),
        "logits": None if result.logits is None
        else [float(v) for v in result.logits.reshape(-1)],
        "pattern_meta": None,
    }
    if result.patterns is not None:
        pats = result.patterns
        meta["pattern_meta"] = {
            "steps": pats.steps,
            "fringe_count": pats.fringe_count,
            "width": pats.width,
            "height": pats.height,
        }
        for i in range(pats.steps):
            write_pgm16(os.path.join(d, f"shift_{i:02d}.pgm"), pats.shift_patterns[i])
        for i in range(pats.gray_patterns.shape[0]):
            write_pgm16(os.path.join(d, f"gray_{i:02d}.pgm"), pats.gray_patterns[i])
    if result.illumination is not None:
        write_pgm16(os.path.join(d, "illumination.pgm"), result.illumination)
    if result.adv_cloud is not None:
        write_ply(os.path.join(d, "adv_cloud.ply"), result.adv_cloud)
    if result.phase is not None:
        save_phase_map(os.path.join(d, "phase"), result.phase)
    if result.trace:
        write_trace_csv(os.path.join(d, "trace.csv"), result.trace,
                        list(result.trace[0].keys()))
    if result.search_trace:
        write_trace_csv(os.path.join(d, "search_trace.csv"), result.search_trace,
                        list(result.search_trace[0].keys()))
    write_json(os.path.join(d, "metadata.json"), meta)
    return d


def load_attack_result(dir_path):
    """Rebuild an attack outcome from a directory written by the saver.

    Traces are not reloaded (they stay available as CSV); pattern and
    illumination images round-trip through 16-bit quantization.
    """
    from .attack import AttackResult
    from .fringe import FringePatternSet

    meta = read_json(os.path.join(dir_path, "metadata.json"))
    patterns = None
    pm = meta.get("pattern_meta")
    if pm is not None:
        shifts = torch.stack([
            read_pgm16(os.path.join(dir_path, f"shift_{i:02d}.pgm"))
            for i in range(pm["steps"])
        ])
        grays = []
        i = 0
        while os.path.exists(os.path.join(dir_path, f"gray_{i:02d}.pgm")):
            grays.append(read_pgm16(os.path.join(dir_path, f"gray_{i:02d}.pgm")).round())
            i += 1
        patterns = FringePatternSet(
            steps=pm["steps"], fringe_count=pm["fringe_count"],
            width=pm["width"], height=pm["height"],
            shift_patterns=shifts, gray_patterns=torch.stack(grays),
        )
    illum = None
    ipath = os.path.join(dir_path, "illumination.pgm")
    if os.path.exists(ipath):
        illum = read_pgm16(ipath)
    cloud = None
    cpath = os.path.join(dir_path, "adv_cloud.ply")
    if os.path.exists(cpath):
        cloud = read_ply(cpath)
    phase = None
    if os.path.exists(os.path.join(dir_path, "phase.json")):
        phase = load_phase_map(os.path.join(dir_path, "phase"))
    logits = meta.get("logits")
    return AttackResult(
        success=meta["success"],
        surrogate_success=meta["surrogate_success"],
        mode=meta["mode"],
        label=meta["label"],
        target=meta["target"],
        lam=meta["lambda"],
        logits=None if logits is None else torch.tensor(logits, dtype=DTYPE),
        adv_cloud=cloud,
        patterns=patterns,
        illumination=illum,
        phase=phase,
        rmse=meta["rmse"],
        mean_distance=meta["mean_distance"],
        l1=meta["l1"],
        distance_loss=meta["distance_loss"],
        conflicts=meta["conflicts"],
        iterations_run=meta["iterations_run"],
        error=meta["error"],
    )
