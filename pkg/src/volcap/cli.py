"""``volcap`` command line front end.

Exit codes: 0 success, 2 usage, 3 input error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, io, raycast
from .errors import InvalidArgumentError, MissingInputError, ParseError, VolcapError

log = logging.getLogger("volcap")

RESULT_VERSION = 1

DEFAULT_SCENARIO = {
    "seed": 0,
    "n_cameras": 3,
    "n_frames": 10,
    "image_size": [160, 120],
    "shape_spread": 0.5,
    "contour_gain": 1.0,
    "heatmap_scale": 0.5,
    "heatmap_blur_px": 4.0,
    "heatmap_jitter_px": 3.0,
    "distractors": 1,
    "perturb_deg": 5.0,
    "perturb_shape": 0.5,
    "shape_train": 60,
    "shape_spread_train": 0.08,
    "shape_dim": 50,
}

# slice heights as fractions of the rest-pose body height
DEFAULT_SLICES = {"chest": 0.72, "waist": 0.62, "hip": 0.53}


class UsageError(VolcapError):
    exit_code = 2


# ---------------------------------------------------------------- fit results


def _relpath(target, start):
    return Path(os.path.relpath(Path(target).resolve(), Path(start).resolve())).as_posix()


def save_result(directory, model, P, s, stages, cameras_file=None, energy=None, reference=None):
    """A fit result directory: ``result.json`` + ``model.json`` + ``poses.csv``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    io.save_model(model, d / "model.json")
    io.save_poses(d / "poses.csv", P)
    desc = {
        "version": RESULT_VERSION,
        "model": "model.json",
        "poses": "poses.csv",
        "shape": [float(x) for x in np.asarray(s, float)],
        "stages": list(stages),
    }
    # linked files are stored relative to the result so projects stay relocatable
    if cameras_file is not None:
        desc["cameras"] = _relpath(cameras_file, d)
    if energy is not None:
        desc["energy"] = float(energy)
    if reference is not None:
        desc["reference"] = _relpath(reference, d)
    (d / "result.json").write_text(json.dumps(desc, indent=1) + "\n")
    return d / "result.json"


class FitResult:
    def __init__(self, path):
        p = Path(path)
        if p.is_dir():
            p = p / "result.json"
        if not p.exists():
            raise MissingInputError(f"fit result not found: {p}")
        d = io.load_json(p, "fit result")
        if d.get("version") != RESULT_VERSION:
            raise ParseError(f"fit result version {d.get('version')!r} unsupported", str(p))
        base = p.parent
        self.path = p
        self.model = io.load_model(base / d.get("model", "model.json"))
        self.P = io.load_poses(base / d.get("poses", "poses.csv"), self.model.skeleton.n_dofs)
        self.s = np.array(d.get("shape", []), float)
        self.stages = list(d.get("stages", []))
        self.cameras_file = str(base / d["cameras"]) if d.get("cameras") else None
        self.reference = str(base / d["reference"]) if d.get("reference") else None

    def reference_model(self):
        return io.load_model(self.reference) if self.reference else io.load_default_model()


# ---------------------------------------------------------------- helpers


def _parse_set(items):
    """``--set a.b=value`` overrides; values are parsed as JSON when possible."""
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return out


def _merge(base, over):
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out.get(k, {}), v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _solver_config(args):
    from .optimizer import SolverConfig

    d = io.load_json(args.config) if args.config else {}
    d = _merge(d, _parse_set(args.set))
    if args.threads is not None:
        d = _merge(d, {"energy": {"threads": args.threads}})
    try:
        return SolverConfig.from_dict(d)
    except TypeError as exc:
        raise InvalidArgumentError(f"bad config: {exc}") from None


def _reference(args):
    return io.load_model(args.reference) if getattr(args, "reference", None) else io.load_default_model()


def _gradient_targets(manifest, config):
    """Per-(camera, frame) target gradients: precomputed PFMs when the
    manifest lists them, else smoothed Sobel of the images."""
    from .energy import image_gradients

    t0, t1 = manifest.frames
    listed = manifest.extra.get("gradients")
    base = manifest.path.parent
    out = []
    for c in range(manifest.n_cameras):
        row = []
        for t in range(t0, t1):
            if listed:
                g = io.load_pfm(base / listed[c][t])[:, :, :2]
            else:
                g = image_gradients(io.load_image(manifest.images[c][t]), config.energy.sobel_sigma,
                                    config.energy.delta_high)
            row.append(g)
        out.append(row)
    return out


def _frame_heatmaps(hm, t0, t1):
    from .energy import HeatMapSet

    maps = {(c, t - t0, j): m for (c, t, j), m in hm.maps.items() if t0 <= t < t1}
    return HeatMapSet(maps, hm.scale, hm.n_cameras, t1 - t0, hm.n_joints)


# ---------------------------------------------------------------- commands


def cmd_build_model(args):
    from .shape_space import build_from_meshes

    ref = _reference(args)
    if ref.mesh_vertices is None:
        raise MissingInputError("reference model has no surface mesh")
    meshes = []
    for path in args.meshes:
        v, _ = io.load_obj(path)
        if v.shape != ref.mesh_vertices.shape:
            raise ParseError(f"mesh has {len(v)} vertices, reference has {len(ref.mesh_vertices)}", str(path))
        meshes.append(v)
    space = build_from_meshes(ref, ref.mesh_vertices, meshes, args.dim)
    io.save_shape_space(args.output, space)
    print(f"shape space: {space.dim} components from {len(meshes)} meshes -> {args.output}")


def cmd_fit(args):
    from .energy import FitProblem
    from .optimizer import SolveState, save_trace, solve_stage1, solve_stage2

    config = _solver_config(args)
    manifest = io.load_manifest(args.manifest)
    ref = _reference(args)
    space = io.load_shape_space(args.shape_space) if args.shape_space else None
    t0, t1 = manifest.frames
    T = t1 - t0
    stages = {"1": (1,), "2": (2,), "both": (1, 2)}[args.stage]
    heatmaps = None
    if 1 in stages:
        if manifest.heatmap_index is None:
            raise MissingInputError("stage 1 needs heat maps; the manifest lists none")
        heatmaps = _frame_heatmaps(io.load_heatmaps(manifest.heatmap_index), t0, t1)
    gradients = _gradient_targets(manifest, config) if 2 in stages else None
    problem = FitProblem(ref, manifest.cameras, space, gradients, heatmaps, T)
    state = None
    if args.init:
        init = FitResult(args.init)
        if init.P.shape != (T, ref.skeleton.n_dofs):
            raise InvalidArgumentError(f"--init has {init.P.shape[0]} frames, manifest has {T}")
        if len(init.s) != problem.shape_dim:
            raise InvalidArgumentError(f"--init has {len(init.s)} shape coefficients, expected {problem.shape_dim}")
        state = SolveState(init.P.copy(), init.s.copy())
    elif stages == (2,):
        raise MissingInputError("stage 2 needs a stage-1 result; pass --init <fit-result>")
    trace = [] if args.trace else None
    if 1 in stages:
        state = solve_stage1(problem, config, state, trace)
    if 2 in stages:
        state = solve_stage2(problem, state, config, trace)
    from .shape_space import shaped_model

    model = shaped_model(ref, space, state.s) if space is not None else ref
    save_result(args.output, model, state.P, state.s, stages, manifest.camera_file, state.energy,
                args.reference)
    if args.trace:
        save_trace(args.trace, trace)
    print(f"fit: stages {list(stages)}, {T} frames, E = {state.energy:.6g} -> {args.output}")


def _load_target(args):
    """Model and pose sequence from a fit result or a bare model file."""
    p = Path(args.target)
    if p.is_dir() or p.name == "result.json":
        r = FitResult(p)
        return r.model, r.P
    model = io.load_model(p)
    if args.pose:
        P = io.load_poses(args.pose, model.skeleton.n_dofs)
    else:
        P = model.skeleton.identity_pose()[None]
    return model, P


def cmd_render(args):
    from .evaluation import render_silhouette
    from .model import pose_gaussians

    model, P = _load_target(args)
    cameras = io.load_cameras(args.cameras)
    frames = range(len(P)) if args.frame is None else [args.frame]
    if args.frame is not None and not 0 <= args.frame < len(P):
        raise InvalidArgumentError(f"frame {args.frame} outside 0..{len(P) - 1}")
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for t in frames:
        posed = pose_gaussians(model, P[t])
        for c, cam in enumerate(cameras):
            stem = out / f"{args.what}_c{c}_t{t}"
            if args.what == "silhouette":
                io.save_pgm(stem.with_suffix(".pgm"), render_silhouette(posed, cam, args.tau))
            else:
                r = raycast.render(cam, posed)
                img = r.background if args.what == "visibility" else np.linalg.norm(r.grad, axis=2)
                io.save_pfm(stem.with_suffix(".pfm"), img)
                peak = max(float(img.max()), 1e-12) if args.what == "contour" else 1.0
                io.save_pgm(stem.with_suffix(".pgm"), img / peak)
            n += 1
    print(f"render: {n} {args.what} images -> {out}")


def cmd_colorize(args):
    from .appearance import estimate_colors
    from .model import pose_gaussians

    manifest = io.load_manifest(args.manifest)
    result = FitResult(args.fit_result)
    t0, t1 = manifest.frames
    if len(result.P) != t1 - t0:
        raise InvalidArgumentError(f"fit result has {len(result.P)} frames, manifest has {t1 - t0}")
    images = [[io.load_image(manifest.images[c][t]) for t in range(t0, t1)] for c in range(manifest.n_cameras)]
    posed = [pose_gaussians(result.model, p) for p in result.P]
    colors, rows = estimate_colors(manifest.cameras, images, posed)
    model = result.model
    fallback = model.colors if model.colors is not None else np.full((model.n_gaussians, 3), 0.5)
    colors = np.where(np.isnan(colors), fallback, colors)
    from dataclasses import replace

    io.save_model(replace(model, colors=colors), args.output)
    if args.candidates:
        io.write_csv(args.candidates, ["gaussian", "camera", "r", "g", "b", "weight"], rows)
    print(f"colorize: {model.n_gaussians} Gaussians -> {args.output}")


def cmd_export_mesh(args):
    from .shape_space import posed_mesh

    r = FitResult(args.fit_result)
    if not 0 <= args.frame < len(r.P):
        raise InvalidArgumentError(f"frame {args.frame} outside 0..{len(r.P) - 1}")
    ref = r.reference_model()
    verts = posed_mesh(ref, r.model, r.P[args.frame])
    io.save_obj(args.output, verts, ref.mesh_faces)
    print(f"export-mesh: {len(verts)} vertices -> {args.output}")


def cmd_synth(args):
    from .evaluation import synth_contour_targets, synth_heat_maps, synth_images, synth_scene
    from .reference import procedural_shape_space

    scen = dict(DEFAULT_SCENARIO)
    if args.scenario:
        d = io.load_json(args.scenario, "scenario")
        bad = set(d) - set(scen)
        if bad:
            raise InvalidArgumentError(f"unknown scenario keys: {sorted(bad)}")
        scen.update(d)
    if args.seed is not None:
        scen["seed"] = args.seed
    seed = int(scen["seed"])
    ref = _reference(args)
    out = Path(args.output)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "gradients").mkdir(exist_ok=True)
    space = procedural_shape_space(ref, scen["shape_train"], seed, scen["shape_dim"], scen["shape_spread_train"])
    io.save_shape_space(out / "shape_space.bin", space)
    scene = synth_scene(ref, space, seed, scen["n_cameras"], scen["n_frames"], tuple(scen["image_size"]),
                        scen["shape_spread"])
    io.save_cameras(out / "cameras.txt", scene.cameras)
    images = synth_images(scene)
    grads = synth_contour_targets(scene, scen["contour_gain"])
    img_paths, grad_paths = [], []
    for c in range(len(scene.cameras)):
        ir, gr = [], []
        for t in range(scene.n_frames):
            ip = out / "images" / f"c{c}_t{t}.png"
            gp = out / "gradients" / f"c{c}_t{t}.pfm"
            io.save_image(ip, images[c][t])
            g = grads[c][t]
            io.save_pfm(gp, np.concatenate([g, np.zeros(g.shape[:2] + (1,))], axis=2))
            ir.append(ip)
            gr.append(str(gp.relative_to(out)))
        img_paths.append(ir)
        grad_paths.append(gr)
    rng = np.random.default_rng(seed + 7)
    hm = synth_heat_maps(scene, scen["heatmap_scale"], scen["heatmap_blur_px"], scen["heatmap_jitter_px"],
                         scen["distractors"], rng=rng)
    index = io.save_heatmaps(out / "heatmaps", hm)
    io.save_manifest(out / "manifest.json", out / "cameras.txt", img_paths, index,
                     extra={"gradients": grad_paths})
    save_result(out / "ground_truth", scene.model, scene.P_true, scene.s_true, [], out / "cameras.txt",
                reference=args.reference)
    # a perturbed start for stage-2-only fits
    P0 = scene.P_true.copy()
    P0[:, 6:] += np.deg2rad(scen["perturb_deg"])
    s0 = scene.s_true + scen["perturb_shape"] * space.coeff_std * rng.standard_normal(space.dim)
    from .shape_space import shaped_model

    save_result(out / "init", shaped_model(ref, space, s0), P0, s0, [], out / "cameras.txt",
                reference=args.reference)
    print(f"synth: {len(scene.cameras)} cameras x {scene.n_frames} frames -> {out}")


def _circumferences(model, ref, slices):
    from .evaluation import circumference
    from .procedural import body_height
    from .shape_space import posed_mesh

    verts = posed_mesh(ref, model, model.skeleton.identity_pose())
    z0 = float(verts[:, 2].min())
    h = body_height(verts)
    return {name: circumference(verts, ref.mesh_faces, z0 + frac * h) for name, frac in slices.items()}


def cmd_eval(args):
    from .evaluation import joint_error_positions, overlap_sequence, render_silhouette
    from .model import forward_kinematics, pose_gaussians

    est = FitResult(args.fit_result)
    gt = FitResult(args.ground_truth)
    if est.P.shape != gt.P.shape:
        raise InvalidArgumentError(f"pose shapes differ: {est.P.shape} vs {gt.P.shape}")
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = set(metrics) - {"joints", "overlap", "circumference"}
    if unknown:
        raise UsageError(f"unknown metrics: {sorted(unknown)}")
    rows = []
    if "joints" in metrics:
        Je = np.stack([forward_kinematics(est.model.skeleton, p).positions for p in est.P])
        Jg = np.stack([forward_kinematics(gt.model.skeleton, p).positions for p in gt.P])
        err = joint_error_positions(Je, Jg, args.offset_compensation)
        ang = np.rad2deg(np.sqrt(np.mean((est.P[:, 6:] - gt.P[:, 6:]) ** 2)))
        rows += [("joints", "mean_error_mm", float(err.mean())), ("joints", "worst_frame_mm", float(err.max())),
                 ("joints", "angle_rms_deg", float(ang))]
    if "overlap" in metrics:
        cam_file = args.cameras or gt.cameras_file or est.cameras_file
        if not cam_file:
            raise MissingInputError("overlap needs cameras; pass --cameras")
        cameras = io.load_cameras(cam_file)
        pred, ref = [], []
        for t in range(len(gt.P)):
            pe = pose_gaussians(est.model, est.P[t])
            pg = pose_gaussians(gt.model, gt.P[t])
            for cam in cameras:
                pred.append(render_silhouette(pe, cam))
                ref.append(render_silhouette(pg, cam))
        rep = overlap_sequence(pred, ref)
        rows += [("overlap", "precision", rep.precision), ("overlap", "recall", rep.recall)]
    if "circumference" in metrics:
        ce = _circumferences(est.model, est.reference_model(), DEFAULT_SLICES)
        cg = _circumferences(gt.model, gt.reference_model(), DEFAULT_SLICES)
        for name in DEFAULT_SLICES:
            rows += [("circumference", f"{name}_cm", ce[name]), ("circumference", f"{name}_gt_cm", cg[name]),
                     ("circumference", f"{name}_error_cm", abs(ce[name] - cg[name]))]
    io.write_csv(args.output, ["group", "metric", "value"], rows)
    for g, m, v in rows:
        print(f"{g}.{m} = {v:.6g}")


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed for all randomness")
    common.add_argument("--threads", type=int, default=None, help="worker threads for view evaluation")
    common.add_argument("--config", help="solver config JSON")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--trace", help="write per-iteration energies to this CSV")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="volcap", description="Sum-of-Gaussians volumetric human shape and pose capture.")
    p.add_argument("--version", action="version", version=f"volcap {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    b = sub.add_parser("build-model", parents=[common], help="register meshes and build a shape space")
    b.add_argument("meshes", nargs="+")
    b.add_argument("--reference", help="reference actor model JSON (default: shipped)")
    b.add_argument("--dim", type=int, default=50)
    b.add_argument("-o", "--output", required=True)
    b.set_defaults(func=cmd_build_model)

    f = sub.add_parser("fit", parents=[common], help="estimate pose and shape")
    f.add_argument("manifest")
    f.add_argument("--shape-space")
    f.add_argument("--reference")
    f.add_argument("--stage", choices=["1", "2", "both"], default="both")
    f.add_argument("--init", help="fit result to start from (required for --stage 2)")
    f.add_argument("-o", "--output", required=True)
    f.set_defaults(func=cmd_fit)

    r = sub.add_parser("render", parents=[common], help="render visibility, contour or silhouette images")
    r.add_argument("target", help="fit result directory or model JSON")
    r.add_argument("cameras")
    r.add_argument("--what", choices=["visibility", "contour", "silhouette"], required=True)
    r.add_argument("--pose", help="pose CSV when target is a model file")
    r.add_argument("--frame", type=int)
    r.add_argument("--tau", type=float, default=0.5)
    r.add_argument("-o", "--output", required=True)
    r.set_defaults(func=cmd_render)

    c = sub.add_parser("colorize", parents=[common], help="estimate per-Gaussian colors")
    c.add_argument("manifest")
    c.add_argument("fit_result")
    c.add_argument("--candidates", help="write the per-camera candidates CSV")
    c.add_argument("-o", "--output", required=True)
    c.set_defaults(func=cmd_colorize)

    e = sub.add_parser("export-mesh", parents=[common], help="skin the surface mesh to a fitted frame")
    e.add_argument("fit_result")
    e.add_argument("--frame", type=int, default=0)
    e.add_argument("-o", "--output", required=True)
    e.set_defaults(func=cmd_export_mesh)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic project with ground truth")
    s.add_argument("scenario", nargs="?", help="scenario JSON (default: built-in)")
    s.add_argument("--reference")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_synth)

    v = sub.add_parser("eval", parents=[common], help="compare a fit result with ground truth")
    v.add_argument("fit_result")
    v.add_argument("ground_truth")
    v.add_argument("--metrics", default="joints,overlap,circumference")
    v.add_argument("--cameras")
    v.add_argument("--offset-compensation", action="store_true")
    v.add_argument("-o", "--output", required=True)
    v.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
        args.func(args)
    except VolcapError as exc:
        print(f"volcap: error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"volcap: error (NumericalError): {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"volcap: error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
