"""On-disk formats: named-tensor checkpoints and frame datasets.

Checkpoint layout (all integers little-endian)::

    b"MMCK" | u32 version | 64 B arch hash (hex) | 64 B config hash (hex)
    | str stage | u64 step | str config text | u32 n
    | n x (str name | u32 ndim | ndim x u32 dim | u64 offset)
    | payload of float32 tensors

``str`` is a u32 byte length followed by UTF-8. Offsets are relative to the
payload start and entries are sorted by name.

A dataset is a line-delimited JSON manifest (a summary line, then one line
per candidate record) next to a frame blob: ``b"MMDS" | u32 version | u32 H
| u32 W | u32 F`` followed by float32 frames. Every record owns ``1 + F``
consecutive frames in the blob: the reference, then the target frames.
"""

from dataclasses import dataclass
import json
import struct

import numpy as np

from . import config as config_mod
from .dataforge import Pose, RenderedFrame
from .errors import ContractError, FormatError

CKPT_MAGIC = b"MMCK"
CKPT_VERSION = 1
DATA_MAGIC = b"MMDS"
DATA_VERSION = 1
_DATA_HEADER = struct.Struct("<4sIIII")


def _pack_str(text):
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


class _Reader:
    def __init__(self, buf, what):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.what}: truncated at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def string(self):
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{self.what}: bad string at byte {self.pos}") from None


# -- checkpoints --------------------------------------------------------------


@dataclass
class Checkpoint:
    params: dict
    cfg: object
    stage: str
    step: int


def save_checkpoint(path, params, cfg, stage, step):
    names = sorted(params)
    if len(set(names)) != len(names):
        raise ValueError("tensor names must be unique")
    header = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION),
              cfg.arch_hash().encode("ascii"), cfg.config_hash().encode("ascii"),
              _pack_str(stage), struct.pack("<Q", int(step)), _pack_str(config_mod.dumps(cfg)),
              struct.pack("<I", len(names))]
    payload = []
    offset = 0
    for name in names:
        arr = np.asarray(params[name], dtype="<f4", order="C")  # keeps 0-d shapes
        header.append(_pack_str(name))
        header.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        header.append(struct.pack("<Q", offset))
        payload.append(arr.tobytes())
        offset += arr.nbytes
    with open(path, "wb") as fh:
        fh.write(b"".join(header))
        fh.write(b"".join(payload))


def load_checkpoint(path, cfg=None):
    """Read a checkpoint. With ``cfg`` given, refuse one written for another architecture."""
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf, str(path))
    if r.take(4) != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    arch = r.take(64).decode("ascii", "replace")
    full = r.take(64).decode("ascii", "replace")
    stage = r.string()
    (step,) = r.unpack("<Q")
    stored = config_mod.loads(r.string())
    if stored.arch_hash() != arch or stored.config_hash() != full:
        raise FormatError(f"{path}: header hash does not match the embedded configuration")
    if cfg is not None:
        config_mod.require_same_arch(arch, cfg)
    (n,) = r.unpack("<I")
    entries = []
    for _ in range(n):
        name = r.string()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}I")
        (offset,) = r.unpack("<Q")
        entries.append((name, shape, offset))
    names = [e[0] for e in entries]
    if names != sorted(set(names)):
        raise FormatError(f"{path}: tensor names are not unique and sorted")
    base = r.pos
    params = {}
    for name, shape, offset in entries:
        count = int(np.prod(shape, dtype=np.int64))
        start = base + offset
        if start + 4 * count > len(buf):
            raise FormatError(f"{path}: tensor {name} runs past the end of the file")
        params[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=start).reshape(shape).astype(np.float32)
    return Checkpoint(params=params, cfg=cfg if cfg is not None else stored, stage=stage, step=step)


# -- frame datasets -----------------------------------------------------------


def _frame_json(frame):
    return {"landmarks": np.asarray(frame.landmarks, np.float64).tolist(), "face_region": list(frame.face_region)}


def write_frames(path, frames, height, width, per_item):
    """Blob of ``frames`` (an iterable of ``[H, W]`` arrays) with the dataset header."""
    with open(path, "wb") as fh:
        fh.write(_DATA_HEADER.pack(DATA_MAGIC, DATA_VERSION, height, width, per_item))
        for f in frames:
            f = np.ascontiguousarray(f, dtype="<f4")
            if f.shape != (height, width):
                raise FormatError(f"frame of shape {f.shape} in a {height}x{width} blob")
            fh.write(f.tobytes())


def read_frames(path):
    """``(frames [n, H, W], F)`` from a blob."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _DATA_HEADER.size:
        raise FormatError(f"{path}: too short for a frame blob")
    magic, version, H, W, F = _DATA_HEADER.unpack_from(buf)
    if magic != DATA_MAGIC:
        raise FormatError(f"{path}: not a frame blob (bad magic)")
    if version != DATA_VERSION:
        raise FormatError(f"{path}: unsupported blob version {version}")
    body = len(buf) - _DATA_HEADER.size
    if body % (4 * H * W):
        raise FormatError(f"{path}: payload is not a whole number of {H}x{W} frames")
    frames = np.frombuffer(buf, dtype="<f4", offset=_DATA_HEADER.size).reshape(-1, H, W).astype(np.float32)
    return frames, F


def save_dataset(manifest_path, blob_path, ds):
    frame_bytes = 4 * ds.height * ds.width
    lines = [json.dumps({"summary": ds.summary(), "height": ds.height, "width": ds.width, "frames": ds.frames},
                        sort_keys=True)]
    frames = []
    for idx, rec in enumerate(ds.records):
        offset = _DATA_HEADER.size + len(frames) * frame_bytes
        frames.append(rec.ref.pixels)
        frames.extend(f.pixels for f in rec.target)
        lines.append(json.dumps({
            "index": idx,
            "id": rec.identity,
            "tag": int(ds.identities[rec.identity].tag),
            "z": np.asarray(ds.identities[rec.identity].z).tolist(),
            "stage": ds.stage,
            "kind": rec.kind,
            "ref_pose": rec.ref_pose.as_list(),
            "poses": [p.as_list() for p in rec.poses],
            "ref": _frame_json(rec.ref),
            "target": [_frame_json(f) for f in rec.target],
            "cos_sim": None if not np.isfinite(rec.cos_sim) else rec.cos_sim,
            "kept": rec.kept,
            "reason": rec.reason,
            "offset": offset,
            "n_frames": 1 + len(rec.target),
        }, sort_keys=True))
    with open(manifest_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    write_frames(blob_path, frames, ds.height, ds.width, ds.frames)


@dataclass
class StoredRecord:
    identity: int
    tag: int
    z: np.ndarray
    stage: str
    kind: str
    ref: RenderedFrame
    target: list
    ref_pose: Pose
    poses: list
    cos_sim: float
    kept: bool
    reason: str


def _frame(pixels, meta):
    return RenderedFrame(pixels=pixels, landmarks=np.asarray(meta["landmarks"], np.float64),
                         face_region=tuple(meta["face_region"]))


def load_dataset(manifest_path, blob_path):
    """``(summary header dict, [StoredRecord])``."""
    frames, F = read_frames(blob_path)
    H, W = frames.shape[1:]
    frame_bytes = 4 * H * W
    records = []
    with open(manifest_path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError(f"{manifest_path}: empty manifest")
    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}:1: {exc}") from None
    for lineno, line in enumerate(lines[1:], 2):
        try:
            m = json.loads(line)
            start = (m["offset"] - _DATA_HEADER.size) // frame_bytes
            n = m["n_frames"]
            if start < 0 or start + n > len(frames) or n != 1 + len(m["target"]):
                raise FormatError(f"{manifest_path}:{lineno}: frame range outside the blob")
            chunk = frames[start:start + n]
            records.append(StoredRecord(
                identity=m["id"], tag=m["tag"], z=np.asarray(m["z"]), stage=m["stage"], kind=m["kind"],
                ref=_frame(chunk[0], m["ref"]),
                target=[_frame(chunk[1 + i], t) for i, t in enumerate(m["target"])],
                ref_pose=Pose(*m["ref_pose"]), poses=[Pose(*p) for p in m["poses"]],
                cos_sim=float("nan") if m["cos_sim"] is None else m["cos_sim"],
                kept=bool(m["kept"]), reason=m["reason"],
            ))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"{manifest_path}:{lineno}: {exc}") from None
    if head.get("frames") != F:
        raise ContractError(f"{manifest_path}: manifest says F={head.get('frames')}, blob says F={F}")
    return head, records
