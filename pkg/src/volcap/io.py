"""Readers and writers for every on-disk format.

Formats are documented in ``docs/formats.md``. Text formats round-trip
floats exactly (``repr`` precision); binary formats round-trip bytes.
"""

from __future__ import annotations

import csv
import io as _io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import IncompatibleVersionError, InvalidArgumentError, MissingInputError, ParseError
from .model import ActorModel, Joint, Skeleton

MODEL_FORMAT = "volcap-actor"
MODEL_VERSION = 1
SHAPE_MAGIC = b"VOLCAP-SHAPESPACE"
SHAPE_VERSION = 1
MANIFEST_VERSION = 1
HEATMAP_INDEX_VERSION = 1


def _floats(a):
    return [float(v) for v in np.asarray(a, dtype=float).ravel()]


# ---------------------------------------------------------------- actor model


def model_to_dict(model: ActorModel, mesh_file=None):
    sk = model.skeleton
    joints = []
    for k, j in enumerate(sk.joints):
        joints.append({
            "name": j.name,
            "parent": int(j.parent),
            "direction": _floats(j.direction),
            "bone_length": float(sk.bone_lengths[k]),
            "dofs": [_floats(a) for a in j.dof_axes],
            "limits": [_floats(lim) for lim in j.limits],
        })
    gaussians = []
    for i in range(model.n_gaussians):
        g = {
            "bone": sk.joints[model.bone_ids[i]].name,
            "mean": _floats(model.means_local[i]),
            "sigma": float(model.sigmas[i]),
            "density": float(model.densities[i]),
        }
        if model.colors is not None:
            g["color"] = _floats(model.colors[i])
        gaussians.append(g)
    out = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "joints": joints,
        "partitions": {"torso": list(sk.torso), "limbs": list(sk.limbs)},
        "joint_sigma": float(model.joint_sigma),
        "gaussians": gaussians,
    }
    if mesh_file:
        out["mesh"] = str(mesh_file)
    if model.meta:
        out["meta"] = model.meta
    return out


def _require(d, key, where):
    if key not in d:
        raise ParseError(f"missing field {key!r}", where)
    return d[key]


def _vec(value, n, where):
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ParseError("expected numbers", where) from None
    if arr.shape != (n,) or not np.all(np.isfinite(arr)):
        raise ParseError(f"expected {n} finite numbers", where)
    return arr


def model_from_dict(d, base_dir: Optional[Path] = None, source="<model>") -> ActorModel:
    if not isinstance(d, dict):
        raise ParseError("top level must be an object", source)
    if d.get("format") != MODEL_FORMAT:
        raise ParseError(f"not a {MODEL_FORMAT} file", source)
    if d.get("version") != MODEL_VERSION:
        raise IncompatibleVersionError(
            f"model version {d.get('version')!r} unsupported (expected {MODEL_VERSION})", source
        )
    joints = []
    lengths = []
    raw_joints = _require(d, "joints", source)
    names = [j.get("name") for j in raw_joints]
    for k, j in enumerate(raw_joints):
        where = f"{source}: joints[{k}]"
        dofs = j.get("dofs", [])
        axes = np.array([_vec(a, 3, f"{where}.dofs") for a in dofs]).reshape(-1, 3)
        if len(axes):
            axes = axes / np.linalg.norm(axes, axis=1, keepdims=True)
        limits = np.array([_vec(lim, 2, f"{where}.limits") for lim in j.get("limits", [])]).reshape(-1, 2)
        direction = _vec(_require(j, "direction", where), 3, f"{where}.direction")
        nrm = np.linalg.norm(direction)
        if nrm > 0:
            direction = direction / nrm
        joints.append(Joint(str(_require(j, "name", where)), int(_require(j, "parent", where)),
                            direction, axes, limits))
        lengths.append(float(_require(j, "bone_length", where)))
    parts = d.get("partitions", {})
    try:
        skeleton = Skeleton(joints, np.array(lengths), tuple(parts.get("torso", ())),
                            tuple(parts.get("limbs", ())))
    except InvalidArgumentError as exc:
        raise ParseError(str(exc), f"{source}: joints") from None
    means, sigmas, dens, bones, colors = [], [], [], [], []
    for i, g in enumerate(_require(d, "gaussians", source)):
        where = f"{source}: gaussians[{i}]"
        bone = _require(g, "bone", where)
        if bone not in names:
            raise ParseError(f"unknown bone {bone!r}", where)
        bones.append(names.index(bone))
        means.append(_vec(_require(g, "mean", where), 3, f"{where}.mean"))
        sigmas.append(float(_require(g, "sigma", where)))
        dens.append(float(_require(g, "density", where)))
        colors.append(g.get("color"))
    have_colors = bool(colors) and all(c is not None for c in colors)
    verts = faces = None
    if d.get("mesh") and base_dir is not None:
        mesh_path = Path(base_dir) / d["mesh"]
        if mesh_path.exists():
            verts, faces = load_obj(mesh_path)
    try:
        return ActorModel(
            skeleton,
            np.array(means).reshape(-1, 3),
            np.array(sigmas),
            np.array(dens),
            np.array(bones, dtype=int),
            np.array(colors, dtype=float) if have_colors else None,
            joint_sigma=float(d.get("joint_sigma", 0.05)),
            mesh_vertices=verts,
            mesh_faces=faces,
            meta=d.get("meta", {}),
        )
    except InvalidArgumentError as exc:
        raise ParseError(str(exc), f"{source}: gaussians") from None


def save_model(model: ActorModel, path, mesh_file=None):
    path = Path(path)
    path.write_text(json.dumps(model_to_dict(model, mesh_file), indent=1) + "\n")


def load_model(path) -> ActorModel:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"model file not found: {path}")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, f"{path}:{exc.lineno}") from None
    return model_from_dict(d, path.parent, str(path))


def default_model_path():
    return Path(__file__).parent / "data" / "reference_model.json"


def load_default_model() -> ActorModel:
    return load_model(default_model_path())


# ---------------------------------------------------------------- meshes


def save_obj(path, vertices, faces):
    lines = [f"v {v[0]!r} {v[1]!r} {v[2]!r}" for v in np.asarray(vertices, dtype=float).tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces, dtype=int).tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path):
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"mesh file not found: {path}")
    verts, faces = [], []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
        except ValueError:
            raise ParseError("malformed record", f"{path}:{lineno}") from None
    v = np.array(verts, dtype=float).reshape(-1, 3)
    f = np.array(faces, dtype=int).reshape(-1, 3)
    if len(f) and (f.min() < 0 or f.max() >= len(v)):
        raise ParseError("face index out of range", str(path))
    return v, f


# ---------------------------------------------------------------- cameras


def save_cameras(path, cameras):
    out = []
    for cam in cameras:
        out.append(f"camera {cam.name}")
        out.append(f"size {cam.width} {cam.height}")
        for row in cam.K.tolist():
            out.append("K " + " ".join(repr(float(x)) for x in row))
        for row in cam.R.tolist():
            out.append("R " + " ".join(repr(float(x)) for x in row))
        out.append("center " + " ".join(repr(float(x)) for x in cam.center.tolist()))
        out.append("end")
    Path(path).write_text("\n".join(out) + "\n")


def load_cameras(path):
    from .raycast import CameraModel

    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"camera file not found: {path}")
    cams = []
    cur = None
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        where = f"{path}:{lineno}"
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        key, vals = parts[0], parts[1:]
        if key == "camera":
            if cur is not None:
                raise ParseError("'camera' before previous 'end'", where)
            cur = {"name": " ".join(vals) or f"cam{len(cams)}", "K": [], "R": [], "line": lineno}
            continue
        if cur is None:
            raise ParseError(f"field {key!r} outside a camera block", where)
        try:
            nums = [float(v) for v in vals]
        except ValueError:
            raise ParseError(f"non-numeric value in {key!r}", where) from None
        if key == "size":
            if len(nums) != 2 or min(nums) < 1:
                raise ParseError("size needs width and height >= 1", where)
            cur["size"] = (int(nums[0]), int(nums[1]))
        elif key in ("K", "R"):
            if len(nums) != 3:
                raise ParseError(f"{key} row needs 3 values", where)
            cur[key].append(nums)
        elif key == "center":
            if len(nums) != 3:
                raise ParseError("center needs 3 values", where)
            cur["center"] = nums
        elif key == "end":
            start = f"{path}:{cur['line']}"
            for need in ("size", "center"):
                if need not in cur:
                    raise ParseError(f"camera {cur['name']!r} lacks {need!r}", start)
            if len(cur["K"]) != 3 or len(cur["R"]) != 3:
                raise ParseError(f"camera {cur['name']!r} needs 3 K rows and 3 R rows", start)
            try:
                cams.append(CameraModel(np.array(cur["K"]), np.array(cur["R"]), np.array(cur["center"]),
                                        cur["size"], name=cur["name"]))
            except InvalidArgumentError as exc:
                raise ParseError(str(exc), start) from None
            cur = None
        else:
            raise ParseError(f"unknown field {key!r}", where)
    if cur is not None:
        raise ParseError("unterminated camera block", f"{path}:{cur['line']}")
    if not cams:
        raise ParseError("no cameras defined", str(path))
    return cams


# ---------------------------------------------------------------- float / gray images


def save_pfm(path, data):
    """Portable float map, little endian; 2-D arrays as 'Pf', 3-channel as 'PF'.

    Rows are stored bottom-to-top as the format requires.
    """
    a = np.asarray(data, dtype=np.float32)
    if a.ndim == 3 and a.shape[2] == 2:
        a = np.concatenate([a, np.zeros(a.shape[:2] + (1,), np.float32)], axis=2)
    if a.ndim == 2:
        header = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        header = b"PF"
    else:
        raise InvalidArgumentError(f"cannot store array of shape {a.shape} as PFM")
    h, w = a.shape[:2]
    body = np.ascontiguousarray(a[::-1]).astype("<f4").tobytes()
    Path(path).write_bytes(header + b"\n%d %d\n-1.0\n" % (w, h) + body)


def load_pfm(path):
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"float map not found: {path}")
    raw = path.read_bytes()
    try:
        head, dims, scale, body = raw.split(b"\n", 3)
        w, h = (int(x) for x in dims.split())
        scale = float(scale)
    except ValueError:
        raise ParseError("malformed PFM header", str(path)) from None
    if head not in (b"Pf", b"PF"):
        raise ParseError("not a PFM file", str(path))
    ch = 1 if head == b"Pf" else 3
    dtype = "<f4" if scale < 0 else ">f4"
    if len(body) != w * h * ch * 4:
        raise ParseError(f"expected {w * h * ch * 4} data bytes, found {len(body)}", str(path))
    a = np.frombuffer(body, dtype=dtype).reshape((h, w, ch) if ch == 3 else (h, w))
    return a[::-1].astype(np.float64)


def save_pgm(path, mask_or_gray):
    a = np.asarray(mask_or_gray)
    if a.dtype == bool:
        a = a.astype(np.uint8) * 255
    else:
        a = np.clip(np.round(np.asarray(a, float) * 255), 0, 255).astype(np.uint8)
    h, w = a.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + a.tobytes())


def load_pgm(path):
    path = Path(path)
    raw = path.read_bytes()
    try:
        magic, dims, maxval, body = raw.split(b"\n", 3)
        w, h = (int(x) for x in dims.split())
    except ValueError:
        raise ParseError("malformed PGM header", str(path)) from None
    if magic != b"P5" or int(maxval) != 255 or len(body) != w * h:
        raise ParseError("unsupported PGM variant", str(path))
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def load_image(path):
    """RGB image as float array in [0, 1], shape (H, W, 3)."""
    from PIL import Image

    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"image not found: {path}")
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise ParseError(f"unreadable image ({exc})", str(path)) from None
    return arr


def save_image(path, rgb):
    from PIL import Image

    a = np.clip(np.round(np.asarray(rgb, float) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(a, mode="RGB").save(path, format="PNG", optimize=False)


# ---------------------------------------------------------------- poses


def save_poses(path, P):
    P = np.atleast_2d(np.asarray(P, dtype=float))
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame"] + [f"p{i}" for i in range(P.shape[1])])
    for t, row in enumerate(P):
        w.writerow([t] + [repr(float(x)) for x in row])
    Path(path).write_text(buf.getvalue())


def load_poses(path, n_dofs=None):
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"pose file not found: {path}")
    rows = list(csv.reader(path.read_text().splitlines()))
    if not rows or rows[0][:1] != ["frame"]:
        raise ParseError("missing header row starting with 'frame'", f"{path}:1")
    width = len(rows[0])
    if n_dofs is not None and width != n_dofs + 1:
        raise ParseError(f"expected {n_dofs + 1} columns, header has {width}", f"{path}:1")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != width:
            raise ParseError(f"expected {width} columns, found {len(row)}", f"{path}:{lineno}")
        try:
            out.append([float(x) for x in row[1:]])
        except ValueError:
            raise ParseError("non-numeric value", f"{path}:{lineno}") from None
    if not out:
        raise ParseError("no frames", str(path))
    return np.array(out)


# ---------------------------------------------------------------- shape space


def save_shape_space(path, space):
    header = {
        "version": SHAPE_VERSION,
        "n_gaussians": int(space.n_gaussians),
        "n_bones": int(space.n_bones),
        "dim": int(space.dim),
        "layout": space.layout,
        "n_train": int(space.n_train),
    }
    hdr = json.dumps(header, sort_keys=True).encode()
    arrays = [space.mean, space.basis, space.coeff_bounds, space.coeff_std]
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    Path(path).write_bytes(SHAPE_MAGIC + b"\n" + hdr + b"\n" + body)


def load_shape_space(path):
    from .shape_space import ShapeSpace

    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"shape space not found: {path}")
    raw = path.read_bytes()
    try:
        magic, hdr, body = raw.split(b"\n", 2)
    except ValueError:
        raise ParseError("truncated shape-space file", str(path)) from None
    if magic != SHAPE_MAGIC:
        raise ParseError("not a shape-space file", str(path))
    try:
        header = json.loads(hdr)
    except json.JSONDecodeError:
        raise ParseError("malformed header", str(path)) from None
    if header.get("version") != SHAPE_VERSION:
        raise IncompatibleVersionError(
            f"shape-space version {header.get('version')!r} unsupported (expected {SHAPE_VERSION})",
            str(path),
        )
    q, nb, dim = header["n_gaussians"], header["n_bones"], header["dim"]
    n = 5 * q + nb
    sizes = [n, n * dim, dim, dim]
    if len(body) != 8 * sum(sizes):
        raise ParseError(f"expected {8 * sum(sizes)} data bytes, found {len(body)}", str(path))
    flat = np.frombuffer(body, dtype="<f8")
    parts = np.split(flat, np.cumsum(sizes)[:-1])
    return ShapeSpace(
        mean=parts[0].copy(),
        basis=parts[1].reshape(n, dim).copy(),
        coeff_bounds=parts[2].copy(),
        coeff_std=parts[3].copy(),
        n_gaussians=q,
        n_bones=nb,
        n_train=header["n_train"],
    )


# ---------------------------------------------------------------- heat maps


def save_heatmaps(directory, heatmaps):
    """Write every map as PFM plus ``index.json`` listing (camera, frame, joint)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for (c, t, j), grid in sorted(heatmaps.maps.items()):
        name = f"hm_c{c}_t{t}_j{j}.pfm"
        save_pfm(directory / name, grid)
        entries.append({"camera": c, "frame": t, "joint": j, "file": name})
    index = {"version": HEATMAP_INDEX_VERSION, "scale": heatmaps.scale, "n_cameras": heatmaps.n_cameras,
             "n_frames": heatmaps.n_frames, "n_joints": heatmaps.n_joints, "maps": entries}
    (directory / "index.json").write_text(json.dumps(index, indent=1) + "\n")
    return directory / "index.json"


def load_heatmaps(index_path):
    from .energy import HeatMapSet

    index_path = Path(index_path)
    if not index_path.exists():
        raise MissingInputError(f"heat-map index not found: {index_path}")
    try:
        index = json.loads(index_path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, f"{index_path}:{exc.lineno}") from None
    if index.get("version") != HEATMAP_INDEX_VERSION:
        raise IncompatibleVersionError("heat-map index version unsupported", str(index_path))
    maps = {}
    for k, e in enumerate(index.get("maps", [])):
        where = f"{index_path}: maps[{k}]"
        try:
            key = (int(e["camera"]), int(e["frame"]), int(e["joint"]))
            grid = load_pfm(index_path.parent / e["file"])
        except KeyError as exc:
            raise ParseError(f"missing field {exc}", where) from None
        if grid.ndim != 2:
            raise ParseError("heat map must be single channel", where)
        maps[key] = grid
    return HeatMapSet(maps, float(index["scale"]), int(index["n_cameras"]),
                      int(index["n_frames"]), int(index["n_joints"]))


# ---------------------------------------------------------------- project manifest


@dataclass
class ProjectManifest:
    cameras: list
    images: list  # images[c][t] -> Path
    heatmap_index: Optional[Path]
    frames: tuple
    output_dir: Optional[Path]
    camera_file: Path
    path: Optional[Path] = None
    extra: dict = field(default_factory=dict)

    @property
    def n_cameras(self):
        return len(self.cameras)

    @property
    def n_frames(self):
        return self.frames[1] - self.frames[0]


def load_manifest(path) -> ProjectManifest:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"manifest not found: {path}")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, f"{path}:{exc.lineno}") from None
    src = str(path)
    if d.get("version") != MANIFEST_VERSION:
        raise IncompatibleVersionError(f"manifest version {d.get('version')!r} unsupported", src)
    base = path.parent
    cam_file = base / _require(d, "cameras", src)
    cameras = load_cameras(cam_file)
    images_raw = _require(d, "images", src)
    if not isinstance(images_raw, list) or len(images_raw) != len(cameras):
        raise ParseError(f"'images' needs one list per camera ({len(cameras)})", f"{src}: images")
    counts = {len(lst) for lst in images_raw}
    if len(counts) != 1:
        raise ParseError(f"inconsistent frame counts across cameras: {sorted(counts)}", f"{src}: images")
    n_frames = counts.pop()
    if n_frames < 1:
        raise ParseError("at least one frame required", f"{src}: images")
    images = []
    for c, lst in enumerate(images_raw):
        row = []
        for t, rel in enumerate(lst):
            p = base / rel
            if not p.exists():
                raise MissingInputError(f"{src}: images[{c}][{t}]: file not found: {p}")
            row.append(p)
        images.append(row)
    frames = tuple(d.get("frames", [0, n_frames]))
    if len(frames) != 2 or frames[0] < 0 or frames[1] > n_frames or frames[0] >= frames[1]:
        raise ParseError(f"frame range {frames} outside 0..{n_frames}", f"{src}: frames")
    hm = d.get("heatmaps")
    hm_path = base / hm if hm else None
    if hm_path is not None and not hm_path.exists():
        raise MissingInputError(f"{src}: heatmaps: file not found: {hm_path}")
    out = d.get("output")
    return ProjectManifest(
        cameras, images, hm_path, (int(frames[0]), int(frames[1])),
        base / out if out else None, cam_file, path,
        {k: v for k, v in d.items() if k not in {"version", "cameras", "images", "heatmaps", "frames", "output"}},
    )


def save_manifest(path, camera_file, images, heatmap_index=None, frames=None, output=None, extra=None):
    path = Path(path)
    base = path.parent

    def rel(p):
        p = Path(p).resolve()
        try:
            return p.relative_to(base.resolve()).as_posix()
        except ValueError:
            return str(p)

    d = {
        "version": MANIFEST_VERSION,
        "cameras": rel(camera_file),
        "images": [[rel(p) for p in row] for row in images],
    }
    if heatmap_index is not None:
        d["heatmaps"] = rel(heatmap_index)
    if frames is not None:
        d["frames"] = list(frames)
    if output is not None:
        d["output"] = str(output)
    if extra:
        d.update(extra)
    path.write_text(json.dumps(d, indent=1) + "\n")


# ---------------------------------------------------------------- config / csv helpers


def load_json(path, what="config"):
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"{what} file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, f"{path}:{exc.lineno}") from None


def write_csv(path, header, rows):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    Path(path).write_text(buf.getvalue())
