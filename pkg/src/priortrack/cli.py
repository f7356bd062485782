"""Command-line driver: simulate, track, register, ablate, global-ba, texture-export."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

log = logging.getLogger("priortrack")

EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def _parse_toggle(text: str) -> tuple[str, bool]:
    name, _, val = text.partition("=")
    val = val.strip().lower() or "off"
    if val not in ("on", "off", "true", "false", "1", "0"):
        raise argparse.ArgumentTypeError(f"toggle value must be on|off, got {val!r}")
    return name.strip(), val in ("on", "true", "1")


def _parse_seeds(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        if "-" in part.strip()[1:]:
            a, b = part.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    return out


def _parse_intrinsics(text: str):
    from .geometry import Intrinsics

    p = Path(text)
    if p.exists():
        data = json.loads(p.read_text())
        return Intrinsics(**data)
    v = [float(x) for x in text.split(",")]
    if len(v) != 6:
        raise argparse.ArgumentTypeError("intrinsics: fx,fy,cx,cy,width,height or a JSON file")
    return Intrinsics(v[0], v[1], v[2], v[3], int(v[4]), int(v[5]))


def _common(p: argparse.ArgumentParser, config_required: bool = False) -> None:
    p.add_argument("--config", type=Path, required=config_required, help="run configuration (TOML)")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--out", type=Path, help="output directory")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--deterministic", dest="deterministic", action="store_true", default=None,
                      help="sequential tracking and mapping (bit-reproducible)")
    mode.add_argument("--parallel", dest="deterministic", action="store_false",
                      help="mapping on a worker thread")
    p.add_argument("--toggle", action="append", default=[], metavar="NAME[=on|off]",
                   help="set one of prior_init, pseudo_mask, shape_prior_ba (bare NAME means off)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="priortrack", description=__doc__)
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a scenario and write its observation log and ground truth")
    _common(p)
    p.add_argument("--scenario", help="builtin scenario name or scenario spec file (instead of --config)")
    p.add_argument("--images", action="store_true", help="also render synthetic PNG frames")

    p = sub.add_parser("track", help="run the tracker and write trajectory, textured mesh and report")
    _common(p, config_required=True)
    p.add_argument("--global-ba", dest="global_ba", action="store_true", default=None,
                   help="run global bundle adjustment at the end of the sequence")
    p.add_argument("--no-global-ba", dest="global_ba", action="store_false")

    p = sub.add_parser("register", help="initial pose from 3D-2D correspondences")
    _common(p)
    p.add_argument("--correspondences", type=Path, help="x,y,z,u,v CSV (defaults to the config's)")
    p.add_argument("--intrinsics", help="fx,fy,cx,cy,width,height or JSON file")

    p = sub.add_parser("ablate", help="paired runs that differ in exactly one toggle")
    _common(p, config_required=True)
    p.add_argument("--seeds", type=_parse_seeds, help="e.g. 0-9 or 0,3,5")

    p = sub.add_parser("global-ba", help="global bundle adjustment on a tracked map or a saved problem")
    _common(p)
    p.add_argument("--problem", type=Path, help="BA problem text file (instead of --config)")
    p.add_argument("--mesh", type=Path, help="prior mesh for shape edges of --problem")
    p.add_argument("--w-shape", type=float, help="override the shape-prior weight")

    p = sub.add_parser("texture-export", help="accumulate per-face colors from posed images into a PLY")
    p.add_argument("--mesh", type=Path, required=True)
    p.add_argument("--images", type=Path, required=True, help="directory of frames")
    p.add_argument("--trajectory", type=Path, required=True, help="trajectory CSV from `track`")
    p.add_argument("--intrinsics", required=True, help="fx,fy,cx,cy,width,height or JSON file")
    p.add_argument("--stride", type=int, default=1, help="use every N-th tracked frame")
    p.add_argument("--out", type=Path, required=True, help="output PLY path")
    return ap


# ---------------------------------------------------------------------------


def _load_config(args):
    from .config import RunConfig, load_run_config

    cfg = load_run_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if getattr(args, "deterministic", None) is not None:
        cfg = dataclasses.replace(cfg, deterministic=args.deterministic)
    if getattr(args, "out", None) is not None:
        cfg = dataclasses.replace(cfg, out=str(args.out))
    for text in getattr(args, "toggle", []) or []:
        name, val = _parse_toggle(text)
        cfg = cfg.with_toggle(name, val)
    return cfg


def _print(data) -> None:
    print(json.dumps(data, indent=2, sort_keys=True, default=str))


def cmd_simulate(args) -> int:
    from .config import load_toml
    from .simulator import builtin_scenario, generate_scenario, load_scenario_spec, save_scenario

    seed = args.seed if args.seed is not None else 0
    if args.scenario:
        p = Path(args.scenario)
        spec = load_scenario_spec(p) if p.exists() else builtin_scenario(args.scenario, seed=seed)
        if args.seed is not None:
            spec.seed = args.seed
    elif args.config:
        if "input" not in load_toml(args.config):
            spec = load_scenario_spec(args.config)  # a bare scenario spec file
            if args.seed is not None:
                spec.seed = args.seed
        else:
            cfg = _load_config(args)
            inp = cfg.input
            if inp.scenario:
                spec = builtin_scenario(inp.scenario, seed=cfg.seed, **inp.overrides)
            elif inp.scenario_file:
                spec = load_scenario_spec(inp.scenario_file)
                spec.seed = cfg.seed
            else:
                raise ValueError("config has no scenario input")
    else:
        spec = builtin_scenario("default", seed=seed)
    out = args.out or Path(f"sim_{spec.name}_{spec.seed}")
    scn = generate_scenario(spec)
    save_scenario(scn, out, images=args.images)
    _print({"out": str(out), "frames": len(scn.frames), "observations": int(sum(len(f) for f in scn.frames))})
    return 0


def cmd_track(args) -> int:
    from .runner import run

    cfg = _load_config(args)
    if args.global_ba is not None:
        cfg = dataclasses.replace(cfg, tracking=dataclasses.replace(cfg.tracking, global_ba_at_end=args.global_ba))
    res = run(cfg)
    summary = {k: v for k, v in res.report.metrics_dict().items() if k != "transitions"}
    _print({"out": cfg.out, "config_hash": res.config_hash, "metrics": summary, "fps": res.report.fps})
    return 0


def cmd_register(args) -> int:
    from .registration import read_correspondences, solve_initial_registration, write_pose_file
    from .simulator import read_observation_log

    cfg = _load_config(args) if args.config else None
    corr = args.correspondences or (Path(cfg.input.correspondences) if cfg and cfg.input.correspondences else None)
    if corr is None:
        raise ValueError("register needs --correspondences or input.correspondences in the config")
    if args.intrinsics:
        k = _parse_intrinsics(args.intrinsics)
    elif cfg and cfg.input.intrinsics:
        from .geometry import Intrinsics

        k = Intrinsics(**cfg.input.intrinsics)
    elif cfg and cfg.input.observations:
        _, k, _ = read_observation_log(cfg.input.observations)
    else:
        raise ValueError("register needs --intrinsics")
    res = solve_initial_registration(read_correspondences(corr), k)
    out = args.out or Path(".")
    out.mkdir(parents=True, exist_ok=True)
    write_pose_file(out / "t_init.txt", res.pose)
    info = {"rms_px": float(res.rms_px), "converged": bool(res.converged), "best_seed": int(res.best_seed),
            "pose": res.pose.row_major_3x4(), "t_init": str(out / "t_init.txt")}
    (out / "registration.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    _print(info)
    return 0


def cmd_ablate(args) -> int:
    from .runner import ablate

    if len(args.toggle) != 1:
        raise ValueError("ablate needs exactly one --toggle NAME[=on|off]")
    name, value = _parse_toggle(args.toggle[0])
    args.toggle = []
    cfg = _load_config(args)
    summary = ablate(cfg, name, value, cfg.out, args.seeds)
    m = summary["metrics"]
    rows = [{"seed": r["seed"], "lost_baseline": r["baseline"]["lost_fraction"],
             "lost_ablated": r["ablated"]["lost_fraction"]} for r in m["per_seed"]]
    _print({"changed_toggle": name, "ablated_more_lost": m["ablated_more_lost"], "seeds": m["seeds"], "runs": rows})
    return 0


def cmd_global_ba(args) -> int:
    from .optimizer import BaProblem, OptimizerConfig, bundle_adjust

    if args.problem:
        surface, diag = None, 1.0
        if args.mesh:
            from .mesh import build_surface_index, load_mesh

            mesh = load_mesh(args.mesh)
            surface, diag = build_surface_index(mesh), mesh.bbox_diagonal
        problem = BaProblem.from_text(args.problem.read_text(), surface, diag)
        cfg = _load_config(args).optimizer if args.config else OptimizerConfig()
        if args.w_shape is not None:
            cfg = dataclasses.replace(cfg, w_shape=args.w_shape)
        result = bundle_adjust(problem, cfg)
        info = {"initial_cost": result.initial_cost, "final_cost": result.final_cost,
                "iterations": result.iterations}
        if args.out:
            args.out.mkdir(parents=True, exist_ok=True)
            problem.poses, problem.points = result.poses, result.points
            (args.out / "problem_optimized.txt").write_text(problem.to_text())
            (args.out / "global_ba.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
        _print(info)
        return 0
    if not args.config:
        raise ValueError("global-ba needs --problem or --config")
    from .runner import compute_metrics, report_dict, track, write_json, write_trajectory
    from .mesh import save_ply

    cfg = _load_config(args)
    if args.w_shape is not None:
        cfg = dataclasses.replace(cfg, optimizer=dataclasses.replace(cfg.optimizer, w_shape=args.w_shape))
    run_in, results, tracker, loop_s = track(cfg, global_ba_at_end=False)
    result = tracker.run_global_ba()
    report = compute_metrics(cfg, run_in, results, tracker, loop_s)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_trajectory(out / "trajectory.csv", results, cfg.deterministic)
    save_ply(tracker.textured, out / "textured.ply", with_weights=True)
    rep = report_dict(cfg, report, run_in.source)
    rep["metrics"]["global_ba"] = {"initial_cost": result.initial_cost, "final_cost": result.final_cost,
                                   "iterations": result.iterations} if result else None
    write_json(out / "report.json", rep)
    _print(rep["metrics"]["global_ba"])
    return 0


def cmd_texture_export(args) -> int:
    from .features import image_sequence
    from .mesh import load_mesh, save_ply, texture_update
    from .runner import read_trajectory

    k = _parse_intrinsics(args.intrinsics)
    mesh = load_mesh(args.mesh)
    poses = {fid: pose for fid, _, pose, _ in read_trajectory(args.trajectory) if pose is not None}
    used = seen = 0
    for fid, img in image_sequence(args.images):
        if fid not in poses:
            continue
        if seen % max(1, args.stride) == 0:
            texture_update(mesh, poses[fid], img, k)
            used += 1
        seen += 1
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_ply(mesh, args.out, with_weights=True)
    _print({"out": str(args.out), "frames_used": used,
            "textured_faces": int((mesh.face_weights > 0).sum()), "faces": len(mesh.faces)})
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "track": cmd_track,
    "register": cmd_register,
    "ablate": cmd_ablate,
    "global-ba": cmd_global_ba,
    "texture-export": cmd_texture_export,
}


def error_record(exc: BaseException, command: str) -> dict:
    module = type(exc).__module__
    tag = module.rsplit(".", 1)[-1] if module.startswith("priortrack") else "builtins" if module == "builtins" else module
    return {"error": {"type": type(exc).__name__, "module": tag, "command": command, "message": str(exc)}}


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:  # reported as a machine-readable record
        from .config import ConfigError

        rec = error_record(exc, args.command)
        print(json.dumps(rec, sort_keys=True), file=sys.stderr)
        out = getattr(args, "out", None)
        if out is not None and args.command != "texture-export":
            try:
                Path(out).mkdir(parents=True, exist_ok=True)
                (Path(out) / "error.json").write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")
            except OSError:
                pass
        if args.verbose:
            log.exception("command failed")
        code = EXIT_CONFIG if isinstance(exc, (ConfigError, FileNotFoundError)) else EXIT_RUNTIME
        return code


if __name__ == "__main__":
    sys.exit(main())
