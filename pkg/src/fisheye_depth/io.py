"""Raster formats, snippet manifests and the key-value configuration.

* PGM: binary ``P5`` only, maxval 255 or 65535 (16-bit samples big-endian).
* PFM: grayscale ``Pf`` only, float32, rows stored bottom-up. A negative scale
  marks little-endian data, a positive one big-endian. Non-finite samples are
  invalid pixels; invalid pixels are written as NaN.
* Manifest: one line per frame, ``filename`` followed by the 12 entries of the
  row-major ``3 x 4`` camera-to-world matrix ``[R | t]``.
* Config: INI-style sections of ``key = value`` lines with ``#`` comments.
  Unknown sections and keys are rejected.
"""
from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ContractViolation, FormatError
from .geometry import DTYPE, FisheyeIntrinsics, RigidPose, as_tensor
from .losses import DecaySchedule, LossConfig
from .optimizer import OptimizeConfig
from .synthesis import DepthGrid

TEACHER_EPS = 1e-6


# --- header tokens ----------------------------------------------------------------------

def _header(data: bytes, count: int, path) -> tuple[list[bytes], int]:
    """First ``count`` whitespace-separated tokens (``#`` comments skipped) and payload offset."""
    tokens, i, n = [], 0, len(data)
    while len(tokens) < count:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i < n and data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        if i >= n:
            raise FormatError(f"{path}: truncated header")
        j = i
        while j < n and not data[j:j + 1].isspace():
            j += 1
        tokens.append(data[i:j])
        i = j
    if i >= n or not data[i:i + 1].isspace():
        raise FormatError(f"{path}: header must end with one whitespace byte")
    return tokens, i + 1


def _int(tok: bytes, path, what: str) -> int:
    try:
        v = int(tok)
    except ValueError:
        raise FormatError(f"{path}: malformed {what} {tok!r}") from None
    if v <= 0:
        raise FormatError(f"{path}: {what} must be positive")
    return v


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"{path}: {e.strerror or e}") from e


def _write(path, data: bytes) -> None:
    try:
        Path(path).write_bytes(data)
    except OSError as e:
        raise FormatError(f"{path}: {e.strerror or e}") from e


# --- PGM --------------------------------------------------------------------------------

def read_pgm(path) -> torch.Tensor:
    """Binary PGM as an ``H x W`` tensor of intensities in [0, 1]."""
    data = _read(path)
    if not data.startswith(b"P5"):
        raise FormatError(f"{path}: not a binary PGM (magic {data[:2]!r})")
    (magic, w, h, maxval), off = _header(data, 4, path)
    if magic != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = _int(w, path, "width"), _int(h, path, "height"), _int(maxval, path, "maxval")
    if maxval not in (255, 65535):
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    dtype = np.dtype("u1") if maxval == 255 else np.dtype(">u2")
    need = w * h * dtype.itemsize
    if len(data) - off < need:
        raise FormatError(f"{path}: truncated payload ({len(data) - off} of {need} bytes)")
    raw = np.frombuffer(data, dtype=dtype, count=w * h, offset=off).reshape(h, w)
    return torch.from_numpy(raw.astype(np.float64) / maxval)


def write_pgm(path, image, maxval: int = 255) -> None:
    if maxval not in (255, 65535):
        raise ContractViolation("maxval must be 255 or 65535")
    img = as_tensor(image).detach().cpu().numpy()
    if img.ndim != 2:
        raise ContractViolation("PGM images are two-dimensional")
    if not np.all(np.isfinite(img)):
        raise ContractViolation("image holds non-finite values")
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval)
    payload = q.astype("u1" if maxval == 255 else ">u2").tobytes()
    h, w = img.shape
    _write(path, f"P5\n{w} {h}\n{maxval}\n".encode() + payload)


# --- PFM --------------------------------------------------------------------------------

def read_pfm(path) -> DepthGrid:
    data = _read(path)
    (magic, w, h, scale), off = _header(data, 4, path)
    if magic == b"PF":
        raise FormatError(f"{path}: color PFM is not supported")
    if magic != b"Pf":
        raise FormatError(f"{path}: not a grayscale PFM (magic {magic!r})")
    w, h = _int(w, path, "width"), _int(h, path, "height")
    try:
        s = float(scale)
    except ValueError:
        raise FormatError(f"{path}: malformed scale {scale!r}") from None
    if s == 0 or not math.isfinite(s):
        raise FormatError(f"{path}: scale must be finite and nonzero")
    dtype = np.dtype("<f4" if s < 0 else ">f4")
    need = w * h * 4
    if len(data) - off < need:
        raise FormatError(f"{path}: truncated payload ({len(data) - off} of {need} bytes)")
    raw = np.frombuffer(data, dtype=dtype, count=w * h, offset=off).reshape(h, w)[::-1]
    depth = torch.from_numpy(raw.astype(np.float64))
    valid = torch.isfinite(depth)
    return DepthGrid(torch.where(valid, depth, torch.ones_like(depth)), valid)


def write_pfm(path, grid) -> None:
    """Little-endian ``Pf`` with scale -1.0; invalid pixels become NaN."""
    if not isinstance(grid, DepthGrid):
        grid = DepthGrid(as_tensor(grid), None)
    d = grid.depth.detach().cpu().numpy().astype("<f4")
    if d.ndim != 2:
        raise ContractViolation("PFM rasters are two-dimensional")
    d = np.where(grid.valid.cpu().numpy(), d, np.float32(np.nan)).astype("<f4")
    h, w = d.shape
    _write(path, f"Pf\n{w} {h}\n-1.0\n".encode() + np.ascontiguousarray(d[::-1]).tobytes())


# --- teacher ----------------------------------------------------------------------------

def rescale_median(grid: DepthGrid) -> DepthGrid:
    vals = grid.depth[grid.valid]
    if vals.numel() == 0:
        raise ContractViolation("teacher map has no valid pixel")
    return DepthGrid(torch.where(grid.valid, grid.depth / torch.quantile(vals, 0.5), torch.ones_like(grid.depth)),
                     grid.valid.clone())


def ingest_teacher(source, mode: str = "depth") -> DepthGrid:
    """Read a teacher map (path or DepthGrid) as depth rescaled to median 1.

    ``inverse_depth`` maps values through ``1 / (v + 1e-6)`` first.
    """
    if mode not in ("depth", "inverse_depth"):
        raise ContractViolation(f"unknown teacher mode {mode!r}")
    grid = source if isinstance(source, DepthGrid) else read_pfm(source)
    if bool(torch.any(grid.valid & ~(grid.depth > 0))):
        raise ContractViolation("teacher values must be positive at valid pixels")
    depth = grid.depth
    if mode == "inverse_depth":
        depth = torch.where(grid.valid, 1.0 / (depth + TEACHER_EPS), torch.ones_like(depth))
    return rescale_median(DepthGrid(depth, grid.valid))


# --- manifest ---------------------------------------------------------------------------

def write_manifest(path, names, poses) -> None:
    lines = []
    for name, pose in zip(names, poses):
        if any(c.isspace() for c in name):
            raise ContractViolation(f"file name {name!r} contains whitespace")
        lines.append(" ".join([name] + [repr(float(x)) for x in pose.rows()]))
    _write(path, ("\n".join(lines) + "\n").encode())


def read_manifest(path) -> list[tuple[str, RigidPose]]:
    out = []
    for k, line in enumerate(_read(path).decode("utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 13:
            raise FormatError(f"{path}:{k}: expected a file name and 12 numbers")
        try:
            m = torch.tensor([float(x) for x in parts[1:]], dtype=DTYPE).reshape(3, 4)
        except ValueError:
            raise FormatError(f"{path}:{k}: malformed number") from None
        try:
            out.append((parts[0], RigidPose(m[:, :3], m[:, 3])))
        except ContractViolation as e:
            raise FormatError(f"{path}:{k}: {e}") from None
    return out


# --- config -----------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneConfig:
    preset: str = "textured"
    contrast_scale: float | None = None
    room_depth: float = 5.0
    room_height: float = 2.5
    wall_frequency: float = 0.3
    object_frequency: float = 0.5
    bits: int = 16


@dataclass(frozen=True)
class TrajectoryConfig:
    baseline: float = 0.25
    forward: float = 0.1
    yaw: float = 0.02


@dataclass(frozen=True)
class TeacherConfig:
    mode: str = "depth"
    gamma: float = 1.5
    bias_amplitude: float = 0.1
    bias_frequency: float = 2.0


@dataclass(frozen=True)
class EvalConfig:
    cap: float = 20.0
    median_scaling: bool = True


@dataclass(frozen=True)
class Config:
    intrinsics: FisheyeIntrinsics
    scene: SceneConfig = field(default_factory=SceneConfig)
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: DecaySchedule = field(default_factory=DecaySchedule)
    optimizer: OptimizeConfig = field(default_factory=OptimizeConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


SECTIONS = {
    "scene": SceneConfig,
    "trajectory": TrajectoryConfig,
    "loss": LossConfig,
    "schedule": DecaySchedule,
    "optimizer": OptimizeConfig,
    "teacher": TeacherConfig,
    "eval": EvalConfig,
}
# the optimizer seed comes from the command line
HIDDEN = {"optimizer": {"seed"}}
INTRINSIC_KEYS = ("fx", "fy", "cx", "cy", "k1", "k2", "k3", "k4", "width", "height", "theta_max")


def _convert(raw: str, annotation: str, where: str):
    text = raw.strip()
    optional = "None" in annotation
    if optional and text.lower() in ("", "none"):
        return None
    try:
        if annotation.startswith("bool"):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if annotation.startswith("int"):
            return int(text)
        if annotation.startswith("float"):
            return float(text)
    except ValueError:
        raise ContractViolation(f"{where}: cannot parse {raw!r} as {annotation}") from None
    return text


def _section(parser, name: str, cls):
    if not parser.has_section(name):
        return cls()
    fields = {f.name: f for f in dataclasses.fields(cls) if f.init and f.name not in HIDDEN.get(name, ())}
    kwargs = {}
    for key, raw in parser.items(name):
        if key not in fields:
            raise ContractViolation(f"[{name}] unknown key {key!r}")
        kwargs[key] = _convert(raw, str(fields[key].type), f"[{name}] {key}")
    return cls(**kwargs)


def _intrinsics(parser) -> FisheyeIntrinsics:
    from .oracle import default_intrinsics

    if not parser.has_section("intrinsics"):
        return default_intrinsics()
    items = dict(parser.items("intrinsics"))
    for key in items:
        if key not in INTRINSIC_KEYS:
            raise ContractViolation(f"[intrinsics] unknown key {key!r}")
    width = int(items.pop("width", 96))
    height = int(items.pop("height", 60))
    base = dataclasses.asdict(default_intrinsics(width, height))
    for key, raw in items.items():
        base[key] = _convert(raw, "float", f"[intrinsics] {key}")
    return FisheyeIntrinsics(**base)


def parse_config(text: str, source: str = "<config>") -> Config:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), comment_prefixes=("#",),
                                       interpolation=None, delimiters=("=",))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise FormatError(f"{source}: {e}") from None
    for name in parser.sections():
        if name not in SECTIONS and name != "intrinsics":
            raise ContractViolation(f"unknown config section [{name}]")
    return Config(_intrinsics(parser), **{name: _section(parser, name, cls) for name, cls in SECTIONS.items()})


def load_config(path) -> Config:
    try:
        text = _read(path).decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError(f"{path}: config is not UTF-8") from None
    return parse_config(text, str(path))
