"""Bit-exact file formats and trajectory persistence.

Rasters: RGB as binary PPM (P6, maxval 255), depth as little-endian PFM
(``Pf``, scale -1), masks and id rasters as binary PGM (P5). Manifests are
plain text with 17-significant-digit reals. Encoder parameters and descriptor
maps use small little-endian binary containers.
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .descriptor import EncoderParams
from .geometry import CameraIntrinsics, Pose
from .scenegen import Frame, Trajectory

MANIFEST_NAME = "manifest.txt"
MANIFEST_VERSION = 1
PARAM_MAGIC = b"DONPARAM"
PARAM_VERSION = 1
DESC_MAGIC = b"DONDESC"
FLAG_USE_COORDS = 1


class FormatError(ValueError):
    def __init__(self, path, offset, msg):
        super().__init__(f"{path}: byte {offset}: {msg}")
        self.path = str(path)
        self.offset = offset


class VersionMismatch(ValueError):
    pass


def fmt(x) -> str:
    return format(float(x), ".17g")


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-" + path.name)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write(path, text.encode())


# --- netpbm / pfm ---------------------------------------------------------

def _read_header(path, data: bytes, n_fields: int):
    """Parse whitespace-separated header tokens; returns (tokens, offset of raster)."""
    tokens, pos = [], 0
    while len(tokens) < n_fields:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(path, pos, "truncated header")
        tokens.append(data[start:pos].decode("ascii", "replace"))
    if pos >= len(data):
        raise FormatError(path, pos, "missing raster data")
    return tokens, pos + 1  # single whitespace byte ends the header


def _payload(path, data: bytes, offset: int, nbytes: int) -> bytes:
    if len(data) - offset < nbytes:
        raise FormatError(path, len(data), f"truncated raster: expected {nbytes} bytes after offset {offset}, "
                                           f"found {len(data) - offset}")
    return data[offset : offset + nbytes]


def encode_ppm(rgb: np.ndarray) -> bytes:
    q = np.round(np.asarray(rgb) * 255.0)
    if np.any(q < 0) or np.any(q > 255) or not np.array_equal(q / 255.0, rgb):
        raise ValueError("rgb values must be multiples of 1/255 in [0, 1]")
    H, W, _ = rgb.shape
    return f"P6\n{W} {H}\n255\n".encode() + q.astype(np.uint8).tobytes()


def decode_ppm(data: bytes, path="<ppm>") -> np.ndarray:
    tok, off = _read_header(path, data, 4)
    if tok[0] != "P6" or tok[3] != "255":
        raise FormatError(path, 0, f"expected P6 with maxval 255, got {tok[0]} / {tok[3]}")
    W, H = int(tok[1]), int(tok[2])
    raw = _payload(path, data, off, W * H * 3)
    return np.frombuffer(raw, np.uint8).reshape(H, W, 3).astype(np.float64) / 255.0


def encode_pgm(img: np.ndarray) -> bytes:
    a = np.asarray(img)
    if a.dtype == bool:
        a = a.astype(np.uint8)
    if a.min(initial=0) < 0 or a.max(initial=0) > 255:
        raise ValueError("PGM values must be in 0..255")
    H, W = a.shape
    return f"P5\n{W} {H}\n255\n".encode() + a.astype(np.uint8).tobytes()


def decode_pgm(data: bytes, path="<pgm>") -> np.ndarray:
    tok, off = _read_header(path, data, 4)
    if tok[0] != "P5" or tok[3] != "255":
        raise FormatError(path, 0, f"expected P5 with maxval 255, got {tok[0]} / {tok[3]}")
    W, H = int(tok[1]), int(tok[2])
    return np.frombuffer(_payload(path, data, off, W * H), np.uint8).reshape(H, W).copy()


def encode_pfm(depth: np.ndarray) -> bytes:
    d = np.asarray(depth, dtype=np.float32)
    H, W = d.shape
    # PFM stores rows bottom-to-top
    return f"Pf\n{W} {H}\n-1.0\n".encode() + np.flipud(d).astype("<f4").tobytes()


def decode_pfm(data: bytes, path="<pfm>") -> np.ndarray:
    tok, off = _read_header(path, data, 4)
    if tok[0] != "Pf":
        raise FormatError(path, 0, f"expected Pf, got {tok[0]}")
    W, H = int(tok[1]), int(tok[2])
    scale = float(tok[3])
    dt = "<f4" if scale < 0 else ">f4"
    raw = _payload(path, data, off, W * H * 4)
    return np.flipud(np.frombuffer(raw, dt).reshape(H, W)).astype(np.float32)


def _read(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing file {path}")
    return path.read_bytes()


def read_ppm(path):
    return decode_ppm(_read(path), path)


def read_pgm(path):
    return decode_pgm(_read(path), path)


def read_pfm(path):
    return decode_pfm(_read(path), path)


# --- trajectories -----------------------------------------------------------

def save_trajectory(traj: Trajectory, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = [f"DONTRAJ {MANIFEST_VERSION}", f"name {traj.name}", f"scene_digest {traj.scene_digest or '-'}",
             "center " + " ".join(fmt(c) for c in traj.center), f"frames {len(traj.frames)}"]
    for i, f in enumerate(traj.frames):
        stem = f"frame_{f.frame_id:04d}"
        atomic_write(d / f"{stem}.ppm", encode_ppm(f.rgb))
        atomic_write(d / f"{stem}.pfm", encode_pfm(f.depth))
        ids_name = "-"
        if traj.ids is not None:
            ids_name = f"ids_{f.frame_id:04d}.pgm"
            atomic_write(d / ids_name, encode_pgm(traj.ids[i]))
        k = f.intr
        lines.append(
            f"frame {f.frame_id} rgb {stem}.ppm depth {stem}.pfm ids {ids_name} "
            f"intr {fmt(k.fx)} {fmt(k.fy)} {fmt(k.cx)} {fmt(k.cy)} {k.width} {k.height} "
            "pose " + " ".join(fmt(x) for x in f.pose.matrix().ravel())
        )
    if traj.masks is not None:
        for i, f in enumerate(traj.frames):
            for label in sorted(traj.masks[i]):
                name = f"mask_{f.frame_id:04d}_{label:02d}.pgm"
                atomic_write(d / name, encode_pgm(traj.masks[i][label].astype(np.uint8) * label))
                lines.append(f"mask {f.frame_id} {label} {name}")
    atomic_write_text(d / MANIFEST_NAME, "\n".join(lines) + "\n")


def load_trajectory(directory) -> Trajectory:
    d = Path(directory)
    mpath = d / MANIFEST_NAME
    text = _read(mpath).decode()
    lines = text.splitlines()
    offset = 0

    def err(i, msg):
        return FormatError(mpath, sum(len(x) + 1 for x in lines[:i]), msg)

    head = lines[0].split() if lines else []
    if len(head) != 2 or head[0] != "DONTRAJ":
        raise err(0, "not a trajectory manifest")
    if int(head[1]) != MANIFEST_VERSION:
        raise VersionMismatch(f"{mpath}: manifest version {head[1]}, expected {MANIFEST_VERSION}")
    name, digest, center = "traj", "", np.zeros(3)
    frames, ids, mask_rows = [], [], []
    for i, line in enumerate(lines[1:], start=1):
        t = line.split()
        if not t:
            continue
        try:
            if t[0] == "name":
                name = t[1]
            elif t[0] == "scene_digest":
                digest = "" if t[1] == "-" else t[1]
            elif t[0] == "center":
                center = np.array([float(x) for x in t[1:4]])
            elif t[0] == "frames":
                pass
            elif t[0] == "frame":
                fid = int(t[1])
                intr = CameraIntrinsics(float(t[9]), float(t[10]), float(t[11]), float(t[12]), int(t[13]), int(t[14]))
                T = np.array([float(x) for x in t[16:32]]).reshape(4, 4)
                try:
                    pose = Pose.from_matrix(T)
                except ValueError as e:
                    raise err(i, f"frame {fid}: {e}") from None
                rgb = read_ppm(d / t[3])
                depth = read_pfm(d / t[5])
                if rgb.shape[:2] != (intr.height, intr.width) or depth.shape != (intr.height, intr.width):
                    raise err(i, f"frame {fid}: raster size does not match intrinsics")
                frames.append(Frame(fid, rgb, depth, pose, intr))
                ids.append(None if t[7] == "-" else read_pgm(d / t[7]))
            elif t[0] == "mask":
                mask_rows.append((int(t[1]), int(t[2]), t[3]))
            else:
                raise err(i, f"unknown record {t[0]!r}")
        except (IndexError, ValueError) as e:
            if isinstance(e, FormatError):
                raise
            raise err(i, f"malformed record: {e}") from None
    fids = [f.frame_id for f in frames]
    if fids != sorted(set(fids)):
        raise FormatError(mpath, offset, "frame ids must be unique and sorted")
    masks = None
    if mask_rows:
        pos = {fid: k for k, fid in enumerate(fids)}
        masks = [dict() for _ in frames]
        for fid, label, fname in mask_rows:
            masks[pos[fid]][label] = read_pgm(d / fname) > 0
    all_ids = None if any(x is None for x in ids) else ids
    return Trajectory(frames, all_ids, masks, center, name, digest)


# --- encoder parameters / descriptor maps -----------------------------------

def encode_params(p: EncoderParams) -> bytes:
    flags = FLAG_USE_COORDS if p.use_coords else 0
    head = PARAM_MAGIC + struct.pack("<5I", PARAM_VERSION, p.patch_radius, p.D, p.hidden, flags)
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in (p.w1, p.b1, p.w2, p.b2))
    return head + body


def decode_params(data: bytes, path="<params>") -> EncoderParams:
    if data[:8] != PARAM_MAGIC:
        raise FormatError(path, 0, "bad magic, expected DONPARAM")
    if len(data) < 28:
        raise FormatError(path, len(data), "truncated header")
    version, r, D, hidden, flags = struct.unpack("<5I", data[8:28])
    if version != PARAM_VERSION:
        raise VersionMismatch(f"{path}: parameter file version {version}, expected {PARAM_VERSION}")
    F = 3 * (2 * r + 1) ** 2 + 2
    shapes = [(F, hidden), (hidden,), (hidden, D), (D,)]
    off, arrs = 28, []
    for shp in shapes:
        n = int(np.prod(shp)) * 8
        arrs.append(np.frombuffer(_payload(path, data, off, n), "<f8").reshape(shp).astype(np.float64))
        off += n
    if off != len(data):
        raise FormatError(path, off, f"{len(data) - off} trailing bytes")
    return EncoderParams(r, *arrs, use_coords=bool(flags & FLAG_USE_COORDS))


def encode_descriptors(dmap: np.ndarray) -> bytes:
    H, W, D = dmap.shape
    return DESC_MAGIC + struct.pack("<3I", H, W, D) + np.ascontiguousarray(dmap, dtype="<f4").tobytes()


def decode_descriptors(data: bytes, path="<desc>") -> np.ndarray:
    if data[:7] != DESC_MAGIC:
        raise FormatError(path, 0, "bad magic, expected DONDESC")
    if len(data) < 19:
        raise FormatError(path, len(data), "truncated header")
    H, W, D = struct.unpack("<3I", data[7:19])
    raw = _payload(path, data, 19, H * W * D * 4)
    if len(data) != 19 + H * W * D * 4:
        raise FormatError(path, 19 + H * W * D * 4, "trailing bytes")
    return np.frombuffer(raw, "<f4").reshape(H, W, D).astype(np.float32)


def save_params(path, p: EncoderParams) -> None:
    atomic_write(path, encode_params(p))


def load_params(path) -> EncoderParams:
    return decode_params(_read(path), path)


# --- labeled clouds ----------------------------------------------------------

def save_cloud(path, points: np.ndarray, labels=None) -> None:
    rows = ["x,y,z,label"]
    labels = np.zeros(len(points), int) if labels is None else labels
    for p, lab in zip(points, labels):
        rows.append(f"{fmt(p[0])},{fmt(p[1])},{fmt(p[2])},{int(lab)}")
    atomic_write_text(path, "\n".join(rows) + "\n")


def load_cloud(path):
    lines = _read(path).decode().splitlines()
    if not lines or lines[0] != "x,y,z,label":
        raise FormatError(path, 0, "expected header x,y,z,label")
    arr = np.array([[float(x) for x in ln.split(",")] for ln in lines[1:] if ln], dtype=np.float64).reshape(-1, 4)
    return arr[:, :3], arr[:, 3].astype(np.int64)
