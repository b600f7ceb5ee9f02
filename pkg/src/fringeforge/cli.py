"""Command-line front end: scenes, training, attacks, evaluation, export.

One binary with subcommands ``scene | train | attack | eval | export``.
Configuration is plain ``key=value`` text with dotted section prefixes
(``scanner.``, ``scene.``, ``data.``, ``model.``, ``attack.``, ``eval.``),
read from an optional ``--config`` file and overridable with repeated
``--set key=value`` flags. Unknown keys are rejected by name. Every command
echoes its fully resolved configuration into the output directory, so a run
is reproducible from the echo plus its seed.

Exit codes: 0 full success, 2 partial attack failures or inconsistent
reports (artifacts still written), 1 configuration or IO errors. The only
environment variable consulted is ``FRINGEFORGE_THREADS`` (worker count,
default: available parallelism).
"""

import argparse
import dataclasses
import os
import sys
import typing
from typing import Optional

from .attack import AttackConfig
from .errors import FringeForgeError, InvalidConfig
from .evaluate import (
    ExperimentReport,
    aggregate,
    render_table,
    run_benchmark,
    run_dir,
)
from .io import (
    canonical_json,
    ensure_dir,
    export_cloud_csv,
    export_png,
    load_model,
    read_json,
    read_pgm16,
    read_ply,
    save_model,
    write_json,
    write_ply,
)
from .photometric import FaceParams, GammaModel, grid_positions, synth_face
from .pipeline import build_face_dataset, desk_scanner, face_params, identity_seed
from .recognize import TrainConfig, train
from .reconstruct import PointCloud, TransformParams
from .util import configure_torch


# --- typed key=value configuration ------------------------------------------

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_bool(text: str):
    t = text.strip().lower()
    if t in _TRUE:
        return True
    if t in _FALSE:
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_float_tuple(text: str):
    parts = [p for p in text.split(",") if p.strip() != ""]
    return tuple(float(p) for p in parts)


def _parse_opt_float(text: str):
    t = text.strip().lower()
    return None if t in ("", "none") else float(t)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(float(value))
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    return str(value)


def _parser_for(tp):
    if tp is bool:
        return _parse_bool
    if tp is int:
        return int
    if tp is float:
        return float
    if tp is str:
        return str
    if tp is tuple:
        return _parse_float_tuple
    if typing.get_origin(tp) is typing.Union and type(None) in typing.get_args(tp):
        inner = [a for a in typing.get_args(tp) if a is not type(None)]
        if inner == [float]:
            return _parse_opt_float
    return None


def _spec_from_dataclass(cls, skip=()):
    """(parse, default) per field, for flat scalar/tuple fields only."""
    spec = {}
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        parse = _parser_for(f.type)
        if parse is None:
            continue
        if f.default is not dataclasses.MISSING:
            default = f.default
        elif f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
            default = f.default_factory()  # type: ignore[misc]
        else:
            default = None
        spec[f.name] = (parse, default)
    return spec


_SCANNER_SPEC = {
    "cam_height": (int, 96),
    "cam_width": (int, 128),
    "proj_height": (int, 240),
    "proj_width": (int, 320),
    "standoff": (float, 1500.0),
    "baseline": (float, 200.0),
    "cam_focal": (float, 450.0),
    "proj_focal": (float, 1100.0),
    "steps": (int, 12),
    "fringe_count": (int, 16),
    "noise_sigma": (float, 0.0),
}

_SCENE_SPEC = _spec_from_dataclass(FaceParams, skip=("camera", "grid_shape", "standoff"))
# empty value: follow the scanner standoff so the face sits at the rig's focus
_SCENE_SPEC["standoff"] = (_parse_opt_float, None)

_ATTACK_SPEC = _spec_from_dataclass(AttackConfig, skip=("transforms",))
_tp = TransformParams()
_ATTACK_SPEC["transforms.rot_std"] = (_parse_float_tuple, _tp.rot_std)
_ATTACK_SPEC["transforms.trans_std"] = (_parse_float_tuple, _tp.trans_std)

_MODEL_SPEC = _spec_from_dataclass(TrainConfig, skip=("augment",))
_MODEL_SPEC["augment"] = (_parse_bool, True)

_DATA_SPEC = {
    "identities": (int, 40),
    "expressions": (int, 12),
    "points": (int, 512),
    "noise_sigma": (float, 0.001),
    "kind": (str, "cloud"),
    "depth_size": (int, 64),
    "val_per_identity": (int, 3),
}

_EVAL_SPEC = {
    "identities": (int, 10),
    "modes": (str, "dodge,impersonate"),
    "attack": (str, "pattern"),
    "gamma": (float, 1.0),
    "carrier_radius": (int, 8),
    "tag": (str, ""),
}

_GROUPS = {
    "scanner": _SCANNER_SPEC,
    "scene": _SCENE_SPEC,
    "attack": _ATTACK_SPEC,
    "model": _MODEL_SPEC,
    "data": _DATA_SPEC,
    "eval": _EVAL_SPEC,
}

# undotted keys: command context and paths, echoed for reproducibility
_TOP_KEYS = ("command", "count", "input", "model_path", "out", "run", "seed")


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Raw key=value lines -> {key: string}; '#' starts a comment line."""
    out = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InvalidConfig(f"{source}:{ln}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def resolve_config(raw: dict) -> dict:
    """Typed resolution of every group; unknown keys are rejected by name."""
    resolved = {name: {k: d for k, (_, d) in spec.items()}
                for name, spec in _GROUPS.items()}
    resolved["top"] = {}
    for key, text in raw.items():
        if "." not in key:
            if key not in _TOP_KEYS:
                raise InvalidConfig(f"unknown config key: {key}")
            resolved["top"][key] = text
            continue
        group, sub = key.split(".", 1)
        spec = _GROUPS.get(group)
        if spec is None or sub not in spec:
            raise InvalidConfig(f"unknown config key: {key}")
        parse = spec[sub][0]
        try:
            resolved[group][sub] = parse(text)
        except ValueError as exc:
            raise InvalidConfig(f"bad value for {key}: {text!r} ({exc})")
    return resolved


def echo_config(dir_path, command: str, top: dict, cfg: dict) -> str:
    """Write the fully resolved configuration as sorted key=value lines."""
    lines = [f"command={command}"]
    for key in sorted(top):
        if key != "command":
            lines.append(f"{key}={_fmt(top[key])}")
    for group in sorted(_GROUPS):
        for key in sorted(cfg[group]):
            lines.append(f"{group}.{key}={_fmt(cfg[group][key])}")
    path = os.path.join(ensure_dir(dir_path), "config.cfg")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))
        fh.write("\n")
    return path


def _build_setup(cfg: dict):
    s = cfg["scanner"]
    return desk_scanner(cam_shape=(s["cam_height"], s["cam_width"]),
                       proj_shape=(s["proj_height"], s["proj_width"]),
                       standoff=s["standoff"], baseline=s["baseline"],
                       cam_focal=s["cam_focal"], proj_focal=s["proj_focal"],
                       steps=s["steps"], fringe_count=s["fringe_count"],
                       noise_sigma=s["noise_sigma"])


def _build_face_params(setup, cfg: dict) -> FaceParams:
    sc = dict(cfg["scene"])
    if sc.get("standoff") is None:
        sc["standoff"] = cfg["scanner"]["standoff"]
    return face_params(setup, **sc)


def _build_attack_config(cfg: dict) -> AttackConfig:
    a = dict(cfg["attack"])
    rot = a.pop("transforms.rot_std")
    trans = a.pop("transforms.trans_std")
    a["transforms"] = TransformParams(rot_std=rot, trans_std=trans)
    return AttackConfig(**a)


def _build_train_config(cfg: dict) -> TrainConfig:
    m = dict(cfg["model"])
    m["augment"] = TransformParams() if m.pop("augment") else None
    return TrainConfig(**m)


def _seed(args, cfg) -> int:
    if args.seed is not None:
        return args.seed
    top = cfg["top"].get("seed")
    return int(top) if top is not None else 0


def _out_dir(args, cfg, command: str) -> str:
    out = args.out if getattr(args, "out", None) else cfg["top"].get("out")
    if not out:
        raise InvalidConfig(f"{command} needs an output directory (--out)")
    return out


# --- commands ---------------------------------------------------------------


def cmd_scene(args, cfg) -> int:
    configure_torch()
    seed = _seed(args, cfg)
    count = args.count if args.count is not None else int(cfg["top"].get("count", 0))
    if count < 0:
        raise InvalidConfig("count must be non-negative")
    out = ensure_dir(_out_dir(args, cfg, "scene"))
    setup = _build_setup(cfg)
    params = _build_face_params(setup, cfg)
    entries = []
    for i in range(count):
        sid = identity_seed(seed, i)
        scene = synth_face(sid, params)
        name = f"scene_{i:03d}.ply"
        pts = grid_positions(scene.height, setup.camera).reshape(-1, 3)
        write_ply(os.path.join(out, name), PointCloud(points=pts))
        entries.append({"index": i, "identity_seed": sid, "file": name})
    write_json(os.path.join(out, "manifest.json"),
               {"count": count, "seed": seed, "entries": entries})
    echo_config(out, "scene", {"seed": seed, "count": count, "out": out}, cfg)
    print(f"wrote {count} scenes and manifest.json to {out}")
    return 0


def cmd_train(args, cfg) -> int:
    configure_torch()
    seed = _seed(args, cfg)
    out = ensure_dir(_out_dir(args, cfg, "train"))
    setup = _build_setup(cfg)
    params = _build_face_params(setup, cfg)
    d = cfg["data"]
    dataset = build_face_dataset(setup, identities=d["identities"],
                                 expressions=d["expressions"], points=d["points"],
                                 seed=seed, noise_sigma=d["noise_sigma"],
                                 kind=d["kind"], depth_size=d["depth_size"],
                                 val_per_identity=d["val_per_identity"],
                                 params=params)
    model = train(dataset, _build_train_config(cfg))
    save_model(os.path.join(out, "model"), model)
    echo_config(out, "train", {"seed": seed, "out": out}, cfg)
    print(f"trained {model.arch} model: val_accuracy={model.val_accuracy:.4f}, "
          f"saved to {os.path.join(out, 'model')}.bin/.json")
    return 0


def cmd_attack(args, cfg) -> int:
    configure_torch()
    seed = _seed(args, cfg)
    out = _out_dir(args, cfg, "attack")
    model_path = args.model if args.model else cfg["top"].get("model_path")
    if not model_path:
        raise InvalidConfig("attack needs a trained model (--model PATHBASE)")
    try:
        model = load_model(model_path)
    except FileNotFoundError as exc:
        raise InvalidConfig(f"model not found at {model_path!r}: {exc}")
    setup = _build_setup(cfg)
    params = _build_face_params(setup, cfg)
    acfg = _build_attack_config(cfg)
    e = cfg["eval"]
    modes = tuple(m for m in e["modes"].split(",") if m)
    kind = e["attack"]
    gamma = GammaModel(e["gamma"]) if kind == "superposition" else None
    tag = e["tag"] or model.arch
    report = run_benchmark({tag: model}, setup, acfg, identities=e["identities"],
                           modes=modes, seed=seed, attack=kind, gamma=gamma,
                           carrier_radius=e["carrier_radius"], scene_params=params,
                           out_dir=out, workers=None)
    rp = run_dir(out, seed, acfg)
    echo_config(rp, "attack", {"seed": seed, "out": out,
                               "model_path": model_path}, cfg)
    print(render_table(report))
    print(f"artifacts in {rp}")
    clean = all(r.success and r.error is None for r in report.records)
    return 0 if clean else 2


def cmd_eval(args, cfg) -> int:
    run_path = args.run if args.run else cfg["top"].get("run")
    if not run_path:
        raise InvalidConfig("eval needs a run directory (--run)")
    report_path = os.path.join(run_path, "report.json")
    if not os.path.exists(report_path):
        raise InvalidConfig(f"no report.json under {run_path!r}")
    doc = read_json(report_path)
    report = ExperimentReport.from_canonical(doc)
    refold = aggregate(report.records)
    consistent = canonical_json(refold) == canonical_json(doc["groups"])
    double_entry = all(
        g["successes"] == g["verified_successes"]
        for modes in refold.values() for g in modes.values())
    report.groups = refold
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    with open(os.path.join(run_path, "table.txt"), "w", encoding="utf-8") as fh:
        fh.write(render_table(report))
        fh.write("\n")
    print(render_table(report))
    if not consistent:
        print("re-aggregation disagreed with the stored groups; report rewritten",
              file=sys.stderr)
    if not double_entry:
        print("attack-side and re-simulated success counts disagree",
              file=sys.stderr)
    return 0 if consistent and double_entry else 2


def cmd_export(args, cfg) -> int:
    src = args.input if args.input else cfg["top"].get("input")
    if not src:
        raise InvalidConfig("export needs an input directory (--in)")
    if not os.path.isdir(src):
        raise InvalidConfig(f"not a directory: {src!r}")
    dst = ensure_dir(_out_dir(args, cfg, "export"))
    converted = 0
    for root, dirs, files in os.walk(src):
        dirs.sort()
        for name in sorted(files):
            path = os.path.join(root, name)
            rel = os.path.relpath(path, src)
            base, ext = os.path.splitext(rel)
            if ext == ".ply":
                target = os.path.join(dst, base + ".csv")
                ensure_dir(os.path.dirname(target) or dst)
                export_cloud_csv(target, read_ply(path))
            elif ext == ".pgm":
                target = os.path.join(dst, base + ".png")
                ensure_dir(os.path.dirname(target) or dst)
                export_png(target, read_pgm16(path))
            else:
                continue
            converted += 1
    print(f"converted {converted} artifacts into {dst}")
    return 0


# --- entry point ------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """Argument errors raise instead of exiting, so main() can map them to 1."""

    def error(self, message):
        raise InvalidConfig(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fringeforge",
                     description="Structured-light scanner simulator, attacks "
                                 "and evaluation sweeps.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file with dotted sections")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--seed", type=int, default=None, help="run seed")

    p = sub.add_parser("scene", help="generate deterministic synthetic faces")
    common(p)
    p.add_argument("--count", type=int, default=None, help="number of identities")
    p.add_argument("--out", help="output directory")
    p.set_defaults(fn=cmd_scene)

    p = sub.add_parser("train", help="scan a face population and train a recognizer")
    common(p)
    p.add_argument("--out", help="output directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("attack", help="run an attack sweep against a trained model")
    common(p)
    p.add_argument("--model", help="model path base (without .bin/.json)")
    p.add_argument("--out", help="output directory")
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("eval", help="re-aggregate and verify an attack run directory")
    common(p)
    p.add_argument("--run", help="run directory containing report.json")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("export", help="convert PLY/PGM artifacts to CSV/PNG")
    common(p)
    p.add_argument("--in", dest="input", help="directory to convert")
    p.add_argument("--out", help="output directory")
    p.set_defaults(fn=cmd_export)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        raw: dict = {}
        if args.config:
            try:
                with open(args.config, "r", encoding="utf-8") as fh:
                    text = fh.read()
            except OSError as exc:
                raise InvalidConfig(f"cannot read config {args.config!r}: {exc}")
            raw.update(parse_config_text(text, source=args.config))
        for item in args.set:
            if "=" not in item:
                raise InvalidConfig(f"--set expects key=value, got {item!r}")
            key, value = item.split("=", 1)
            raw[key.strip()] = value.strip()
        cfg = resolve_config(raw)
        return args.fn(args, cfg)
    except FringeForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
