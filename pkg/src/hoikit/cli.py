"""Command-line frontend.

Subcommands: trajectory | segment | register | contact | animate | curate | select.
Each reads an optional ``--config`` JSON file; explicit flags override it.
Exit codes: 0 success, 2 config/usage error, 3 data error, 4 internal error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .body import BodyFormatError, JointCountError, PartName, animate_scene, load_body, load_pose_sequence, \
    transfer_weights
from .config import FIELD_NAMES, ConfigError, PipelineConfig, config_from_dict, read_config_dict
from .contact import ALL_PARTS, ContactReport, ContactSpec, classify_configuration, \
    contact_report, select_from_reports
from .curation import ManifestError, RulesFormatError, curate, load_rules, read_manifest, write_curation_outputs
from .mesh import MeshError, MeshIOError, TriMesh, format_cm, load_mesh, one_directional_chamfer, save_mesh
from .registration import apply_similarity, coverage, init_alignment, load_alignment, \
    mask_subset_vertices, refine_chamfer_7dof_trace, save_alignment, PARTIAL_COVERAGE_THRESHOLD
from .render import default_radius, load_trajectory, make_trajectory, orbit_camera, rasterize, \
    save_trajectory, DEFAULT_RADIUS_FACTOR
from .segmentation import NoVisibleVerticesError, load_mask_frames, read_mask_png, render_depths, \
    segment

logger = logging.getLogger("hoikit")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4

DATA_ERRORS = (MeshIOError, MeshError, BodyFormatError, JointCountError, NoVisibleVerticesError,
               ManifestError, RulesFormatError, OSError)

_PATH_FIELDS = {"mesh", "trajectory", "masks", "body", "human_mesh", "object_mesh", "body_mesh",
                "part_labels", "alignment", "poses", "spec", "manifest", "rules", "candidates",
                "front_mask", "output_dir"}


class DataError(RuntimeError):
    """Input data is inconsistent (exit code 3)."""


class _JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        payload = {"level": record.levelname.lower(), "logger": record.name, "message": record.getMessage()}
        payload.update(getattr(record, "extra_fields", {}))
        return json.dumps(payload, sort_keys=True)


def _setup_logging() -> None:
    level = os.environ.get("HOI_KIT_LOG", "warn").lower()
    levels = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}
    root = logging.getLogger("hoikit")
    root.handlers.clear()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter())
    root.addHandler(handler)
    root.setLevel(levels.get(level, logging.WARNING))
    root.propagate = False


def _diagnostic(code: int, exc: BaseException) -> None:
    sys.stderr.write(json.dumps({"level": "error", "exit_code": code, "error": type(exc).__name__,
                                 "message": str(exc)}, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _require(cfg: PipelineConfig, *names: str) -> None:
    missing = [n for n in names if getattr(cfg, n) is None]
    if missing:
        raise ConfigError(f"missing required setting(s): {', '.join(missing)}")


def _out_dir(cfg: PipelineConfig) -> Path:
    _require(cfg, "output_dir")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path) -> object:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc


def _load_spec(path) -> ContactSpec:
    try:
        return ContactSpec.from_dict(_read_json(path))
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: bad contact spec ({exc})") from exc


def _load_part_labels(path) -> List[PartName]:
    raw = _read_json(path)
    try:
        return [PartName(p) for p in raw]
    except (TypeError, ValueError) as exc:
        raise DataError(f"{path}: bad part label list ({exc})") from exc


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_trajectory(cfg: PipelineConfig) -> int:
    if cfg.center is not None and cfg.radius is not None:
        center, radius = np.asarray(cfg.center), cfg.radius
    elif cfg.mesh is not None:
        mesh = load_mesh(cfg.mesh)
        if mesh.is_empty():
            raise DataError("cannot frame an empty mesh")
        center = np.asarray(cfg.center) if cfg.center is not None else mesh.aabb().center
        radius = cfg.radius if cfg.radius is not None else default_radius(mesh)
    else:
        raise ConfigError("trajectory needs either mesh or both center and radius")
    n_bands = cfg.n_bands
    if n_bands > cfg.n_views:
        logger.warning("n_bands=%d exceeds n_views=%d; using %d band(s)", n_bands, cfg.n_views, cfg.n_views)
        n_bands = cfg.n_views
    traj = make_trajectory(center, radius, cfg.n_views, n_bands, cfg.width, cfg.height, cfg.fov_deg)
    save_trajectory(traj, _out_dir(cfg) / "trajectory.json")
    logger.info("wrote %d cameras", len(traj))
    return EXIT_OK


def cmd_segment(cfg: PipelineConfig) -> int:
    _require(cfg, "mesh", "trajectory", "masks")
    out = _out_dir(cfg)
    mesh = load_mesh(cfg.mesh)
    if mesh.is_empty():
        raise DataError("cannot segment an empty mesh")
    traj = load_trajectory(cfg.trajectory)
    masks = load_mask_frames(cfg.masks, len(traj))
    for i, (m, cam) in enumerate(zip(masks, traj.cameras)):
        if (m.width, m.height) != (cam.width, cam.height):
            raise DataError(f"mask {i} is {m.width}x{m.height}, camera is {cam.width}x{cam.height}")
    depths = render_depths(mesh, traj.cameras, cfg.threads)
    if cfg.dump_depth:
        (out / "depth").mkdir(exist_ok=True)
        for i, d in enumerate(depths):
            d.save_pfm(out / "depth" / f"view_{i:04d}_depth.pfm")
    result = segment(mesh, traj.cameras, masks, cfg.delta, cfg.tau, depths=depths)
    save_mesh(result.human, out / "human.ply")
    save_mesh(result.object, out / "object.ply")
    _write_json(out / "labels.json", {
        "labels": result.labels.tolist(),
        "visible_views": result.visibility.counts().tolist(),
        "delta": result.delta,
        "tau": cfg.tau,
        "n_object_vertices": int(result.labels.sum()),
    })
    return EXIT_OK


def _front_mask(cfg: PipelineConfig, human: TriMesh, camera) -> np.ndarray:
    if cfg.front_mask is not None:
        mask = read_mask_png(cfg.front_mask)
        if mask.shape != (camera.height, camera.width):
            raise DataError(f"front mask is {mask.shape[1]}x{mask.shape[0]}, "
                            f"expected {camera.width}x{camera.height}")
        return mask
    # no external mask: the segmented human's own front silhouette
    _, face = rasterize(human, camera)
    return face >= 0


def cmd_register(cfg: PipelineConfig) -> int:
    _require(cfg, "human_mesh", "body")
    out = _out_dir(cfg)
    human = load_mesh(cfg.human_mesh)
    if human.is_empty():
        raise DataError("human mesh is empty")
    body = load_body(cfg.body)
    body_mesh = body.posed_mesh()
    init_full = init_alignment(body_mesh, human)
    cover = coverage(body_mesh, human, init_full)
    partial = cfg.front_mask is not None or cover < PARTIAL_COVERAGE_THRESHOLD
    source = body_mesh
    subset_size = body_mesh.n_vertices
    if partial:
        box = human.aabb()
        cam = orbit_camera(box.center, DEFAULT_RADIUS_FACTOR * box.diagonal, 0.0, cfg.front_azimuth,
                           cfg.width, cfg.height, cfg.fov_deg)
        idx = mask_subset_vertices(init_full.apply_points(body_mesh.vertices), cam, _front_mask(cfg, human, cam))
        if len(idx) >= 4:
            source = TriMesh(body_mesh.vertices[idx], np.zeros((0, 3), dtype=np.int64))
            subset_size = len(idx)
        else:
            logger.warning("front-view subset too small (%d vertices); using the full body", len(idx))
            partial = False
    init = init_alignment(source, human)
    trace = refine_chamfer_7dof_trace(source, human, init, cfg.rounds, cfg.min_improvement)
    align = trace.transform
    registered = apply_similarity(align, body_mesh)
    save_alignment(align, out / "alignment.json")
    save_mesh(registered, out / "registered_body.ply")
    _write_json(out / "registered_parts.json", body.part_label_strings())
    chamfer = one_directional_chamfer(human, registered)
    _write_json(out / "registration.json", {
        "chamfer_human_to_body_m": chamfer,
        "chamfer_human_to_body": format_cm(chamfer),
        "objectives": trace.objectives,
        "rounds": len(trace.objectives) - 1,
        "coverage": cover,
        "partial_subset": partial,
        "subset_size": subset_size,
    })
    logger.info("one-directional Chamfer human->body: %s", format_cm(chamfer))
    return EXIT_OK


_CSV_PARTS = [p.value for p in ALL_PARTS]


def _report_row(scene_id: str, report: ContactReport, spec: ContactSpec) -> list:
    dist = [report.distances.get(PartName(p), float("inf")) for p in _CSV_PARTS]
    return [scene_id] + [f"{d:.6f}" for d in dist] + [report.configuration.value, int(spec.satisfied_by(report))]


def cmd_contact(cfg: PipelineConfig) -> int:
    out = _out_dir(cfg)
    if cfg.manifest is not None:
        base = Path(cfg.manifest).parent
        rows = []
        with open(cfg.manifest, encoding="utf-8") as fh:
            entries = [json.loads(line) for line in fh if line.strip()]
        if not entries:
            raise ConfigError("contact manifest contains no specs")
        for k, e in enumerate(entries):
            try:
                scene_id = str(e["scene_id"])
                spec = ContactSpec.from_dict(e["spec"])
                body_mesh = load_mesh(base / e["body_mesh"])
                labels = _load_part_labels(base / e["part_labels"])
                obj = load_mesh(base / e["object_mesh"])
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"manifest entry {k}: {exc!r}") from exc
            rows.append(_report_row(scene_id, contact_report(body_mesh, labels, obj, cfg.contact_threshold), spec))
        with open(out / "contact_report.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scene_id"] + [f"dist_{p}" for p in _CSV_PARTS] + ["configuration", "satisfied"])
            w.writerows(rows)
        return EXIT_OK

    _require(cfg, "body_mesh", "part_labels", "object_mesh")
    report = contact_report(load_mesh(cfg.body_mesh), _load_part_labels(cfg.part_labels),
                            load_mesh(cfg.object_mesh), cfg.contact_threshold)
    payload = report.to_dict()
    if cfg.spec is not None:
        spec = _load_spec(cfg.spec)
        payload["spec"] = spec.to_dict()
        payload["satisfied"] = spec.satisfied_by(report)
    _write_json(out / "contact_report.json", payload)
    return EXIT_OK


def cmd_animate(cfg: PipelineConfig) -> int:
    _require(cfg, "human_mesh", "object_mesh", "body", "alignment", "poses")
    out = _out_dir(cfg)
    human = load_mesh(cfg.human_mesh)
    obj = load_mesh(cfg.object_mesh)
    body = load_body(cfg.body)
    align = load_alignment(cfg.alignment)
    poses = load_pose_sequence(cfg.poses)
    weights, _ = transfer_weights(apply_similarity(align.inverse(), human), body)
    frames = animate_scene(human, weights, obj, body, poses, align)
    for i, (h, o) in enumerate(frames):
        save_mesh(h, out / f"frame_{i:04d}_human.ply")
        save_mesh(o, out / f"frame_{i:04d}_object.ply")
    _write_json(out / "animation.json", {"n_frames": len(frames)})
    return EXIT_OK


def cmd_curate(cfg: PipelineConfig) -> int:
    _require(cfg, "manifest", "rules")
    if cfg.seed is None:
        raise ConfigError("curate requires --seed")
    out = _out_dir(cfg)
    samples = read_manifest(cfg.manifest)
    rules = load_rules(cfg.rules)
    result = curate(samples, rules, cfg.seed, cfg.n_per_subset, cfg.penetration_threshold,
                    cfg.float_human_distance, cfg.float_ground_height, cfg.up_axis,
                    base_dir=Path(cfg.manifest).parent)
    write_curation_outputs(result, out)
    return EXIT_OK


def cmd_select(cfg: PipelineConfig) -> int:
    _require(cfg, "candidates")
    out = _out_dir(cfg)
    raw = _read_json(cfg.candidates)
    base = Path(cfg.candidates).parent
    if not isinstance(raw, dict) or "candidates" not in raw:
        raise DataError("candidates file must be an object with a 'candidates' list")
    if cfg.spec is not None:
        spec = _load_spec(cfg.spec)
    elif "spec" in raw:
        spec = ContactSpec.from_dict(raw["spec"])
    else:
        raise ConfigError("select needs a contact spec")
    if not raw["candidates"]:
        raise ConfigError("no candidates to select from")
    reports = []
    for k, c in enumerate(raw["candidates"]):
        try:
            reports.append(contact_report(load_mesh(base / c["body_mesh"]), _load_part_labels(base / c["part_labels"]),
                                          load_mesh(base / c["object_mesh"]), cfg.contact_threshold))
        except (KeyError, TypeError) as exc:
            raise DataError(f"candidate {k}: {exc!r}") from exc
    index = select_from_reports(reports, spec)
    wanted = classify_configuration(spec.parts)
    exact = [spec.satisfied_by(r) and r.configuration == wanted for r in reports]
    _write_json(out / "select.json", {
        "index": index,
        "rule": "first_satisfier" if any(exact) else "max_part_hits",
        "spec": spec.to_dict(),
        "part_hits": [spec.hits(r) for r in reports],
        "satisfied": exact,
        "reports": [r.to_dict() for r in reports],
    })
    print(index)
    return EXIT_OK


COMMANDS = {
    "trajectory": cmd_trajectory,
    "segment": cmd_segment,
    "register": cmd_register,
    "contact": cmd_contact,
    "animate": cmd_animate,
    "curate": cmd_curate,
    "select": cmd_select,
}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _flag_type(name: str):
    default = getattr(PipelineConfig(), name)
    if name in ("seed", "n_views", "n_bands", "width", "height", "rounds", "up_axis", "n_per_subset", "threads"):
        return int
    if name in ("delta", "radius") or isinstance(default, float):
        return float
    return str


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hoikit", description="human-object interaction mesh toolkit")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--out", dest="output_dir", default=argparse.SUPPRESS, help="output directory")
        for field in FIELD_NAMES:
            if field == "output_dir":
                continue
            flag = "--" + field.replace("_", "-")
            if field == "dump_depth":
                p.add_argument(flag, action="store_true", default=argparse.SUPPRESS)
            elif field == "center":
                p.add_argument(flag, type=float, nargs=3, default=argparse.SUPPRESS, metavar=("X", "Y", "Z"))
            else:
                p.add_argument(flag, type=_flag_type(field), default=argparse.SUPPRESS)
    return ap


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    raw = {}
    if args.config:
        cfg_path = Path(args.config)
        raw = read_config_dict(cfg_path)
        for k in _PATH_FIELDS & set(raw):
            if raw[k] is not None and not Path(raw[k]).is_absolute():
                raw[k] = str(cfg_path.parent / raw[k])
    overrides = {k: v for k, v in vars(args).items() if k in FIELD_NAMES}
    if "center" in overrides:
        overrides["center"] = list(overrides["center"])
    raw.update(overrides)
    return config_from_dict(raw).validate()


def main(argv: Optional[List[str]] = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        _diagnostic(EXIT_CONFIG, exc)
        return EXIT_CONFIG
    except (DataError,) + DATA_ERRORS as exc:  # type: ignore[misc]
        _diagnostic(EXIT_DATA, exc)
        return EXIT_DATA
    except Exception as exc:  # invariant violations and bugs
        _diagnostic(EXIT_INTERNAL, exc)
        return EXIT_INTERNAL


if __name__ == "__main__":
    raise SystemExit(main())
