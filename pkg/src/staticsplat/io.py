"""File formats: Gaussian PLY, dataset directories, metrics, configs, checkpoints.

PLY layout (binary little-endian, one float32 per property, in this order)::

    x y z  rot_0..rot_3  scale_0..scale_2  opacity  f_dc_0..f_dc_2  f_rest_0..f_rest_{3(K-1)-1}

``rot`` is the (w, x, y, z) quaternion, ``scale`` the log-scales,
``opacity`` the opacity logit. ``f_rest`` is channel-major: all higher-order
red coefficients, then green, then blue. The header carries
``comment staticsplat-ply <version>``.
"""

from __future__ import annotations

import csv
import json
import math
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import Dataset, Frame
from .exceptions import (
    ConfigError,
    DimensionMismatchError,
    EmptyRegionError,
    FormatError,
    InvalidParameterError,
    MalformedCameraError,
    MissingFileError,
    OutputLockedError,
)
from .gaussians import Camera, GaussianCloud
from .losses import dssim_loss, ssim
from .masking import mask_from_u8
from . import sh as _sh

PLY_VERSION = 1
MANIFEST_VERSION = 1
_BASE_PROPS = ["x", "y", "z", "rot_0", "rot_1", "rot_2", "rot_3", "scale_0", "scale_1", "scale_2", "opacity",
               "f_dc_0", "f_dc_1", "f_dc_2"]


def ply_properties(sh_degree: int) -> list:
    rest = 3 * (_sh.num_coeffs(sh_degree) - 1)
    return _BASE_PROPS + [f"f_rest_{i}" for i in range(rest)]


def _cloud_rows(cloud: GaussianCloud) -> np.ndarray:
    n = len(cloud)
    rest = np.transpose(cloud.sh[:, 1:, :], (0, 2, 1)).reshape(n, 3 * (cloud.sh.shape[1] - 1))
    return np.concatenate(
        [cloud.positions, cloud.rotations, cloud.log_scales, cloud.opacity_logits[:, None], cloud.sh[:, 0, :], rest],
        axis=1,
    ).astype("<f4")


def save_cloud(path, cloud: GaussianCloud) -> None:
    props = ply_properties(cloud.sh_degree)
    header = ["ply", "format binary_little_endian 1.0", f"comment staticsplat-ply {PLY_VERSION}",
              f"comment sh_degree {cloud.sh_degree}", f"element vertex {len(cloud)}"]
    header += [f"property float {p}" for p in props]
    header.append("end_header")
    data = _cloud_rows(cloud)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def _read_header(fh):
    if fh.readline().strip() != b"ply":
        raise FormatError("not a PLY file")
    lines = []
    while True:
        line = fh.readline()
        if not line:
            raise FormatError("PLY header is not terminated")
        line = line.decode("ascii", errors="replace").strip()
        if line == "end_header":
            return lines
        lines.append(line)


def load_cloud(path) -> GaussianCloud:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"no such file: {path}")
    with open(path, "rb") as fh:
        lines = _read_header(fh)
        body = fh.read()
    fmt, count, props, version = None, None, [], None
    for line in lines:
        parts = line.split()
        if parts[0] == "format":
            fmt = " ".join(parts[1:])
        elif parts[0] == "comment" and len(parts) >= 3 and parts[1] == "staticsplat-ply":
            version = int(parts[2])
        elif parts[0] == "element":
            if parts[1] != "vertex" or count is not None:
                raise FormatError(f"unsupported PLY element {parts[1]!r}")
            count = int(parts[2])
        elif parts[0] == "property":
            if parts[1] != "float" or len(parts) != 3:
                raise FormatError(f"unsupported PLY property declaration {line!r}")
            props.append(parts[2])
    if fmt != "binary_little_endian 1.0":
        raise FormatError(f"unsupported PLY format {fmt!r}")
    if version is not None and version != PLY_VERSION:
        raise FormatError(f"PLY layout version {version} is not supported (expected {PLY_VERSION})")
    if count is None:
        raise FormatError("PLY has no vertex element")
    degree = next((d for d in range(_sh.MAX_DEGREE + 1) if ply_properties(d) == props), None)
    if degree is None:
        raise FormatError(f"unknown PLY property layout (version {PLY_VERSION}): {props}")
    width = len(props)
    if len(body) < 4 * width * count:
        raise FormatError("PLY body is truncated")
    rows = np.frombuffer(body[: 4 * width * count], dtype="<f4").reshape(count, width).astype(np.float64)
    k = _sh.num_coeffs(degree)
    sh = np.empty((count, k, 3))
    sh[:, 0, :] = rows[:, 11:14]
    sh[:, 1:, :] = np.transpose(rows[:, 14:].reshape(count, 3, k - 1), (0, 2, 1))
    return GaussianCloud(
        positions=rows[:, 0:3].copy(),
        rotations=rows[:, 3:7].copy(),
        log_scales=rows[:, 7:10].copy(),
        opacity_logits=rows[:, 10].copy(),
        sh=sh,
        sh_degree=degree,
    )


# images ---------------------------------------------------------------------


def to_u8(image) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(path, image) -> None:
    Image.fromarray(to_u8(image)).save(path)


def load_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"no such file: {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_mask(path, mask) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path)


def load_mask(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"no such file: {path}")
    with Image.open(path) as im:
        return mask_from_u8(np.asarray(im.convert("L")))


# datasets -------------------------------------------------------------------


def _frame_entry(frame: Frame, kind: str) -> dict:
    stem = frame.name
    entry = {"name": stem, "image": f"{kind}/{stem}.png", "camera": frame.camera_id or stem}
    entry["mask"] = f"masks/{stem}_mask.png" if frame.mask is not None else None
    return entry


def save_dataset(root, dataset: Dataset, cloud_name: str = "init.ply") -> Path:
    """Write ``images/``, ``masks/``, ``cameras.json``, ``manifest.json`` and ground truth extras."""
    root = Path(root)
    for sub in ("images", "masks"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    cameras, entries, tests = {}, [], []
    jobs = []
    for frame in dataset.frames:
        entry = _frame_entry(frame, "images")
        cameras[entry["camera"]] = frame.camera.to_dict()
        entries.append(entry)
        jobs.append((save_image, root / entry["image"], frame.image))
        if frame.mask is not None:
            jobs.append((save_mask, root / entry["mask"], frame.mask))
    if dataset.test_frames:
        (root / "test").mkdir(exist_ok=True)
    for frame in dataset.test_frames:
        entry = _frame_entry(frame, "test")
        cameras[entry["camera"]] = frame.camera.to_dict()
        tests.append(entry)
        jobs.append((save_image, root / entry["image"], frame.image))
    truth = {}
    if dataset.clean_images or dataset.depths or dataset.regions:
        (root / "truth").mkdir(exist_ok=True)
        for name, img in dataset.clean_images.items():
            jobs.append((save_image, root / "truth" / f"{name}_clean.png", img))
            truth.setdefault(name, {})["clean"] = f"truth/{name}_clean.png"
        for name, region in dataset.regions.items():
            jobs.append((save_mask, root / "truth" / f"{name}_region.png", region))
            truth.setdefault(name, {})["region"] = f"truth/{name}_region.png"
        for name, depth in dataset.depths.items():
            np.save(root / "truth" / f"{name}_depth.npy", depth)
            truth.setdefault(name, {})["depth"] = f"truth/{name}_depth.npy"
        for name, normal in dataset.normals.items():
            np.save(root / "truth" / f"{name}_normal.npy", normal)
            truth.setdefault(name, {})["normal"] = f"truth/{name}_normal.npy"
    with ThreadPoolExecutor(max_workers=4) as pool:
        list(pool.map(lambda job: job[0](job[1], job[2]), jobs))
    manifest = {"version": MANIFEST_VERSION, "frames": entries, "test_frames": tests, "initial_cloud": None}
    if dataset.initial_cloud is not None:
        save_cloud(root / cloud_name, dataset.initial_cloud)
        manifest["initial_cloud"] = cloud_name
    if truth:
        manifest["truth"] = truth
    if dataset.scene is not None:
        manifest["scene"] = dataset.scene
    _write_json(root / "cameras.json", cameras)
    _write_json(root / "manifest.json", manifest)
    return root / "manifest.json"


def _write_json(path, data) -> None:
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _read_json(path):
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"no such file: {path}")
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path.name} is not valid JSON: {exc}") from exc


def _manifest_path(path) -> Path:
    path = Path(path)
    return path / "manifest.json" if path.is_dir() else path


def load_dataset(path, require_masks: bool = False, load_cloud_file: bool = True) -> Dataset:
    """Read a dataset directory (or its ``manifest.json``) and validate it."""
    manifest_path = _manifest_path(path)
    root = manifest_path.parent
    manifest = _read_json(manifest_path)
    if not isinstance(manifest, dict) or "frames" not in manifest:
        raise FormatError("manifest has no 'frames' list")
    cams_raw = _read_json(root / "cameras.json")
    if not isinstance(cams_raw, dict):
        raise MalformedCameraError("cameras.json must map camera ids to camera records")
    cameras = {key: Camera.from_dict(value) for key, value in cams_raw.items()}

    def build(entry):
        for key in ("name", "image", "camera"):
            if key not in entry:
                raise FormatError(f"frame entry lacks {key!r}: {entry}")
        image = load_image(root / entry["image"])
        if entry["camera"] not in cameras:
            raise MalformedCameraError(f"frame {entry['name']} references unknown camera {entry['camera']!r}")
        cam = cameras[entry["camera"]]
        mask = None
        if entry.get("mask"):
            mask = load_mask(root / entry["mask"])
        if image.shape[:2] != (cam.height, cam.width):
            raise DimensionMismatchError(
                f"frame {entry['name']}: image is {image.shape[1]}x{image.shape[0]}, camera is {cam.width}x{cam.height}"
            )
        if mask is not None and mask.shape != (cam.height, cam.width):
            raise DimensionMismatchError(f"frame {entry['name']}: mask does not match camera size")
        return Frame(name=entry["name"], image=image, camera=cam, mask=mask, camera_id=entry["camera"])

    with ThreadPoolExecutor(max_workers=4) as pool:
        frames = list(pool.map(build, manifest["frames"]))
        tests = list(pool.map(build, manifest.get("test_frames", [])))
    if require_masks:
        missing = [f.name for f in frames if f.mask is None]
        if missing:
            raise MissingFileError("missing masks for frames: " + ", ".join(missing))
    ds = Dataset(frames=frames, test_frames=tests, scene=manifest.get("scene"))
    if load_cloud_file and manifest.get("initial_cloud"):
        ds.initial_cloud = load_cloud(root / manifest["initial_cloud"])
    for name, items in manifest.get("truth", {}).items():
        if "clean" in items:
            ds.clean_images[name] = load_image(root / items["clean"])
        if "region" in items:
            ds.regions[name] = load_mask(root / items["region"])
        if "depth" in items:
            ds.depths[name] = np.load(root / items["depth"])
        if "normal" in items:
            ds.normals[name] = np.load(root / items["normal"])
    return ds


def load_cameras(path) -> list:
    """Camera path file: a JSON list of camera records, or an id -> record mapping."""
    data = _read_json(path)
    if isinstance(data, dict):
        return [(key, Camera.from_dict(value)) for key, value in data.items()]
    if isinstance(data, list):
        return [(f"view_{i:03d}", Camera.from_dict(value)) for i, value in enumerate(data)]
    raise MalformedCameraError("camera file must hold a list or a mapping of camera records")


# metrics --------------------------------------------------------------------


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)`` in dB over all channels; identical images give ``inf``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"images differ in shape: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def masked_psnr(a, b, mask) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    keep = np.asarray(mask, dtype=bool)
    if not keep.any():
        return math.nan
    mse = float(np.mean((a[keep] - b[keep]) ** 2))
    return math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse)


def masked_ssim(a, b, mask, window: int = 11) -> float:
    try:
        return 1.0 - dssim_loss(a, b, np.asarray(mask, dtype=np.float64), window)
    except (EmptyRegionError, InvalidParameterError):  # no window fits inside the mask
        return math.nan


@dataclass
class FrameMetrics:
    name: str
    psnr: float
    ssim: float
    psnr_masked: float = math.nan
    ssim_masked: float = math.nan


@dataclass
class MetricsReport:
    frames: list = field(default_factory=list)

    def _mean(self, key):
        vals = [getattr(f, key) for f in self.frames if not math.isnan(getattr(f, key))]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def mean_psnr(self) -> float:
        return self._mean("psnr")

    @property
    def mean_ssim(self) -> float:
        return self._mean("ssim")

    def aggregate(self) -> dict:
        return {k: self._mean(k) for k in ("psnr", "ssim", "psnr_masked", "ssim_masked")}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "psnr", "ssim", "psnr_masked", "ssim_masked"])
            for f in self.frames:
                w.writerow([f.name, _fmt(f.psnr), _fmt(f.ssim), _fmt(f.psnr_masked), _fmt(f.ssim_masked)])
            agg = self.aggregate()
            w.writerow(["mean"] + [_fmt(agg[k]) for k in ("psnr", "ssim", "psnr_masked", "ssim_masked")])

    def to_json(self, path) -> None:
        data = {
            "frames": [{k: _json_num(v) for k, v in vars(f).items()} for f in self.frames],
            "aggregate": {k: _json_num(v) for k, v in self.aggregate().items()},
        }
        _write_json(path, data)


def _fmt(x) -> str:
    return "inf" if x == math.inf else ("nan" if isinstance(x, float) and math.isnan(x) else repr(float(x)))


def _json_num(x):
    if isinstance(x, float) and (math.isinf(x) or math.isnan(x)):
        return "inf" if x > 0 else ("-inf" if x < 0 else "nan")
    return x


def evaluate_images(pairs, masks=None, window: int = 11) -> MetricsReport:
    """``pairs`` is a list of ``(name, rendered, reference)``; ``masks`` maps names to background masks."""
    report = MetricsReport()
    for name, rendered, reference in pairs:
        m = FrameMetrics(name, psnr(rendered, reference), ssim(rendered, reference, window))
        if masks and name in masks:
            m.psnr_masked = masked_psnr(rendered, reference, masks[name])
            m.ssim_masked = masked_ssim(rendered, reference, masks[name], window)
        report.frames.append(m)
    return report


def image_dir(path) -> dict:
    path = Path(path)
    if not path.is_dir():
        raise MissingFileError(f"no such directory: {path}")
    return {p.stem: p for p in sorted(path.glob("*.png")) if not p.stem.endswith("_mask")}


# loss log -------------------------------------------------------------------


def write_loss_log(path, rows, header=("iteration", "total", "l1", "dssim", "flatten", "sparse", "normal",
                                       "n_gaussians")) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([int(r[0])] + [repr(float(x)) for x in r[1:-1]] + [int(r[-1])])


def read_loss_log(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return [[float(x) for x in r] for r in rows[1:]]


# config ---------------------------------------------------------------------

_LINE = re.compile(r"^\s*([A-Za-z_][\w.]*)\s*=\s*(.*?)\s*$")


def parse_value(text: str):
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    if "," in text:
        return tuple(parse_value(p.strip()) for p in text.split(",") if p.strip())
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "'\"":
        return text[1:-1]
    return text


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0]
        if not line.strip():
            continue
        m = _LINE.match(line)
        if not m:
            raise ConfigError(f"config line {lineno} is not 'key = value': {raw!r}")
        out[m.group(1)] = parse_value(m.group(2))
    return out


def read_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"no such file: {path}")
    return parse_config_text(path.read_text())


def format_config(flat: dict) -> str:
    lines = []
    for key in sorted(flat):
        value = flat[key]
        if isinstance(value, (tuple, list)):
            text = ", ".join(str(v) for v in value) + ("," if len(value) == 1 else "")
        elif value is None:
            text = "none"
        else:
            text = str(value).lower() if isinstance(value, bool) else str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def _coerce(value, current, key):
    if value is None:
        return None
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects true/false, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        return float(value)
    if isinstance(current, tuple) or key.endswith("triggers") or key == "background":
        return tuple(value) if isinstance(value, (tuple, list)) else (value,)
    return value


def apply_config(cfg, values: dict):
    """Return a copy of the (nested) dataclass ``cfg`` with ``values`` applied."""
    from .propagation import PropagationConfig

    top, nested = {}, {}
    names = {f.name for f in fields(cfg)}
    for key, value in values.items():
        head, _, rest = key.partition(".")
        if head not in names:
            raise ConfigError(f"unknown config key {key!r}")
        if rest:
            nested.setdefault(head, {})[rest] = value
        else:
            top[key] = _coerce(value, getattr(cfg, key), key)
    for head, sub in nested.items():
        current = getattr(cfg, head)
        if current is None and head == "propagation":
            current = PropagationConfig()
        if not is_dataclass(current):
            raise ConfigError(f"{head!r} has no sub-keys")
        top[head] = apply_config(current, sub)
    try:
        return replace(cfg, **top)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def resolve_config(defaults, file_values: dict | None = None, overrides: dict | None = None):
    """Built-in defaults, then config-file values, then command-line overrides."""
    cfg = defaults
    if file_values:
        cfg = apply_config(cfg, file_values)
    if overrides:
        cfg = apply_config(cfg, overrides)
    return cfg


# output directory lock ------------------------------------------------------


class OutputLock:
    """Exclusive ownership of an output directory through a ``.lock`` file."""

    def __init__(self, directory):
        self.path = Path(directory) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise OutputLockedError(f"output directory {self.path.parent} is in use ({self.path} exists)") from exc
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass
        return False


# checkpoints ----------------------------------------------------------------


def save_checkpoint(directory, iteration, cloud, state, rng, order, log_rows, cfg, references=None, stats=None):
    """``ckpt_<iteration>/`` with the cloud PLY, an exact npz sidecar and the config snapshot."""
    out = Path(directory) / f"ckpt_{iteration:06d}"
    out.mkdir(parents=True, exist_ok=True)
    save_cloud(out / "cloud.ply", cloud)
    arrays = {f"state_{k}": v for k, v in state.to_arrays().items()}
    for name in ("positions", "rotations", "log_scales", "opacity_logits", "sh", "tags"):
        arrays[f"cloud_{name}"] = getattr(cloud, name)
    if stats is not None:
        for name in ("grad_sum", "count", "dir_sum", "max_radius"):
            arrays[f"stats_{name}"] = getattr(stats, name)
    for i, (name, (normals, valid)) in enumerate(sorted((references or {}).items())):
        arrays[f"ref_normals_{i}"] = normals
        arrays[f"ref_valid_{i}"] = valid
    meta = {
        "iteration": int(iteration),
        "sh_degree": int(cloud.sh_degree),
        "rng_state": rng.bit_generator.state,
        "order": [int(i) for i in order],
        "log": [list(map(float, r)) for r in log_rows],
        "references": sorted((references or {}).keys()),
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(out / "state.npz", **arrays)
    (out / "config.txt").write_text(format_config(cfg.flat()))
    return out


def latest_checkpoint(directory) -> Path | None:
    found = sorted(Path(directory).glob("ckpt_*/state.npz"))
    return found[-1].parent if found else None


def load_checkpoint(path) -> dict:
    path = Path(path)
    if (path / "state.npz").exists() is False:
        raise MissingFileError(f"no checkpoint at {path}")
    with np.load(path / "state.npz") as data:
        arrays = {k: data[k] for k in data.files}
    meta = json.loads(arrays.pop("meta").tobytes().decode())
    cloud = GaussianCloud(
        positions=arrays["cloud_positions"],
        rotations=arrays["cloud_rotations"],
        log_scales=arrays["cloud_log_scales"],
        opacity_logits=arrays["cloud_opacity_logits"],
        sh=arrays["cloud_sh"],
        sh_degree=meta["sh_degree"],
        tags=arrays["cloud_tags"],
    )
    out = {
        "cloud": cloud,
        "state": {k[len("state_"):]: v for k, v in arrays.items() if k.startswith("state_")},
        "iteration": meta["iteration"],
        "rng_state": meta["rng_state"],
        "order": meta["order"],
        "log": meta["log"],
        "references": {
            name: (arrays[f"ref_normals_{i}"], arrays[f"ref_valid_{i}"]) for i, name in enumerate(meta["references"])
        },
    }
    if "stats_grad_sum" in arrays:
        out["stats"] = {k[len("stats_"):]: v for k, v in arrays.items() if k.startswith("stats_")}
    return out


def dump_propagation_debug(directory, iteration, name, result) -> None:
    out = Path(directory) / f"stage_{iteration:06d}"
    out.mkdir(parents=True, exist_ok=True)
    depth = result.depth
    top = depth.max() if depth.size and depth.max() > 0 else 1.0
    save_image(out / f"{name}_depth.png", np.repeat((depth / top)[..., None], 3, axis=2))
    save_image(out / f"{name}_normal.png", np.where(result.validity[..., None], result.normal * 0.5 + 0.5, 0.0))
    save_mask(out / f"{name}_valid.png", result.validity)
