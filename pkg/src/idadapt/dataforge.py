"""Synthetic identity world: identities, procedural faces, pairs and filtering.

A face is five Gaussian blobs on a mid-grey background. Blob centres are the
ground-truth landmarks (eyes, nose tip, mouth corners); their canonical
offsets, amplitudes and widths are fixed affine functions of an 8-d identity
latent, and a pose (rotation, translation, scale) moves the whole layout.
Everything is a pure function of the world seed and the draw streams.
"""

from dataclasses import dataclass, field
import enum

import numpy as np

from . import numerics as nm
from .errors import DegenerateInputError, EmptyInputError

Z_DIM = 8
N_LANDMARKS = 5
NORM_BAND = (0.5, 2.0)

# canonical layout in units of width/16, relative to the frame centre
_CANONICAL = np.array(
    [[-2.5, -1.8], [2.5, -1.8], [0.0, 0.6], [-2.0, 2.6], [2.0, 2.6]], dtype=np.float64
)

# hard limits accepted by render_frame
ANGLE_LIMIT = 0.5
SHIFT_LIMIT = 0.2
SCALE_LIMITS = (0.8, 1.25)


class Tag(enum.IntEnum):
    ADULT = 0
    ELDER = 1
    YOUTH = 2
    CHILD = 3


@dataclass(frozen=True)
class Identity:
    z: np.ndarray
    tag: Tag


@dataclass(frozen=True)
class Pose:
    angle: float = 0.0
    dx: float = 0.0
    dy: float = 0.0
    scale: float = 1.0

    def as_list(self):
        return [self.angle, self.dx, self.dy, self.scale]


@dataclass(frozen=True)
class RenderedFrame:
    pixels: np.ndarray  # [H, W] in [0, 1]
    landmarks: np.ndarray  # [5, 2] (x, y) pixel coordinates
    face_region: tuple  # (x0, y0, x1, y1)


@dataclass
class PairRecord:
    ref: RenderedFrame
    target: list
    identity: int = -1
    kind: str = "cross"
    ref_pose: Pose = None
    poses: list = field(default_factory=list)
    cos_sim: float = float("nan")
    kept: bool = False
    reason: str = ""


@dataclass(frozen=True)
class World:
    """Fixed affine maps from identity latent to face geometry and appearance."""

    width: int
    height: int
    pos_map: np.ndarray  # [5, 2, 8]
    amp_map: np.ndarray  # [5, 8]
    width_map: np.ndarray  # [5, 8]

    @classmethod
    def from_rng(cls, rng, width=16, height=16):
        g, rng = nm.normals(rng, N_LANDMARKS * 2 * Z_DIM)
        pos = g.reshape(N_LANDMARKS, 2, Z_DIM)
        # spectral norm of each landmark's 2x8 block capped at 0.25 so that
        # identity never moves a landmark by more than half a pixel-unit
        for k in range(N_LANDMARKS):
            s = np.linalg.norm(pos[k], 2)
            pos[k] *= 0.25 / s
        a, rng = nm.normals(rng, N_LANDMARKS * Z_DIM)
        w, rng = nm.normals(rng, N_LANDMARKS * Z_DIM)
        return cls(
            width=width,
            height=height,
            pos_map=pos,
            amp_map=0.3 * a.reshape(N_LANDMARKS, Z_DIM),
            width_map=0.05 * w.reshape(N_LANDMARKS, Z_DIM),
        )

    @property
    def unit(self):
        return self.width / 16.0

    def canonical_landmarks(self, identity):
        """Landmarks at the identity pose, relative to the frame centre."""
        offsets = np.einsum("kcz,z->kc", self.pos_map, identity.z)
        return (_CANONICAL + offsets) * self.unit

    def amplitudes(self, identity):
        return self.amp_map @ identity.z

    def blob_widths(self, identity):
        return (2.0 + self.width_map @ identity.z) * self.unit


def _tag_for(z):
    return Tag(int(z[0] > 0) + 2 * int(z[1] > 0))


def make_identity(rng):
    """Draw an identity latent, rejection-sampled into the norm band."""
    while True:
        z, rng = nm.normals(rng, Z_DIM)
        z = 0.45 * z
        n = float(np.linalg.norm(z))
        if NORM_BAND[0] <= n <= NORM_BAND[1]:
            return Identity(z=z, tag=_tag_for(z)), rng


def check_pose(pose, width):
    if abs(pose.angle) > ANGLE_LIMIT:
        raise ValueError(f"pose angle {pose.angle} outside +/-{ANGLE_LIMIT}")
    lim = SHIFT_LIMIT * width
    if abs(pose.dx) > lim or abs(pose.dy) > lim:
        raise ValueError(f"pose shift ({pose.dx}, {pose.dy}) outside +/-{lim}")
    if not SCALE_LIMITS[0] <= pose.scale <= SCALE_LIMITS[1]:
        raise ValueError(f"pose scale {pose.scale} outside {SCALE_LIMITS}")


def pose_transform(points, pose, width, height):
    """Apply rotation, scale and translation about the frame centre."""
    c, s = np.cos(pose.angle), np.sin(pose.angle)
    rot = np.array([[c, -s], [s, c]])
    centre = np.array([width / 2.0, height / 2.0])
    return centre + pose.scale * points @ rot.T + np.array([pose.dx, pose.dy])


def render_frame(world, identity, pose):
    check_pose(pose, world.width)
    H, W = world.height, world.width
    landmarks = pose_transform(world.canonical_landmarks(identity), pose, W, H)
    amps = world.amplitudes(identity)
    widths = world.blob_widths(identity) * pose.scale
    ys, xs = np.mgrid[0:H, 0:W]
    px = xs + 0.5
    py = ys + 0.5
    img = np.full((H, W), 0.5)
    for (lx, ly), a, w in zip(landmarks, amps, widths):
        img += a * np.exp(-((px - lx) ** 2 + (py - ly) ** 2) / (2.0 * w * w))
    np.clip(img, 0.0, 1.0, out=img)
    pad = 2.0 * world.unit * pose.scale
    lo = landmarks.min(axis=0) - pad
    hi = landmarks.max(axis=0) + pad
    region = (
        float(max(lo[0], 0.0)),
        float(max(lo[1], 0.0)),
        float(min(hi[0], W)),
        float(min(hi[1], H)),
    )
    return RenderedFrame(pixels=img.astype(np.float32), landmarks=landmarks, face_region=region)


def synth_clip(world, identity, trajectory):
    return [render_frame(world, identity, p) for p in trajectory]


def region_mask(region, height, width):
    """Boolean pixel mask of pixels whose centres fall inside ``region``."""
    x0, y0, x1, y1 = region
    ys, xs = np.mgrid[0:height, 0:width]
    px = xs + 0.5
    py = ys + 0.5
    return (px >= x0) & (px <= x1) & (py >= y0) & (py <= y1)


# -- pair synthesis and filtering ---------------------------------------------


@dataclass(frozen=True)
class PoseRanges:
    angle_max: float = 0.3
    shift_max: float = 1.25
    scale_min: float = 0.9
    scale_max: float = 1.1


def random_pose(rng, ranges):
    u, rng = nm.uniforms(rng, 4)
    pose = Pose(
        angle=float((2 * u[0] - 1) * ranges.angle_max),
        dx=float((2 * u[1] - 1) * ranges.shift_max),
        dy=float((2 * u[2] - 1) * ranges.shift_max),
        scale=float(ranges.scale_min + u[3] * (ranges.scale_max - ranges.scale_min)),
    )
    return pose, rng


def linear_trajectory(start, end, n):
    if n == 1:
        return [start]
    out = []
    for i in range(n):
        a = i / (n - 1)
        out.append(
            Pose(
                angle=(1 - a) * start.angle + a * end.angle,
                dx=(1 - a) * start.dx + a * end.dx,
                dy=(1 - a) * start.dy + a * end.dy,
                scale=(1 - a) * start.scale + a * end.scale,
            )
        )
    return out


def filter_pairs(pairs, recognize, threshold=0.65, predicates=()):
    """Score every candidate and mark it kept iff its similarity exceeds ``threshold``.

    ``recognize`` maps an ``[H, W]`` image to its recognition embedding. Extra
    ``predicates`` (record -> reason string or None) mirror the quality gates
    a real pipeline runs before the similarity check; with none supplied the
    kept set is exactly ``{p : cos_sim(p) > threshold}``. Records are updated
    in place and returned in input order.
    """
    if not -1.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (-1, 1)")
    for rec in pairs:
        rec.kept = False
        rec.reason = ""
        rejected = None
        for pred in predicates:
            rejected = pred(rec)
            if rejected:
                break
        try:
            rec.cos_sim = nm.cosine_similarity(recognize(rec.ref.pixels), recognize(rec.target[0].pixels))
        except DegenerateInputError:
            rec.cos_sim = float("nan")
            rec.reason = "degenerate embedding"
            continue
        if rejected:
            rec.reason = rejected
        elif rec.cos_sim > threshold:
            rec.kept = True
        else:
            rec.reason = "below threshold"
    return list(pairs)


class EmptyDatasetError(EmptyInputError):
    pass


@dataclass
class Dataset:
    stage: str
    height: int
    width: int
    frames: int
    identities: list
    records: list

    @property
    def kept(self):
        return [r for r in self.records if r.kept]

    def summary(self):
        kept = sum(r.kept for r in self.records)
        return {
            "stage": self.stage,
            "candidates": len(self.records),
            "kept": kept,
            "dropped": len(self.records) - kept,
            "identities": len(self.identities),
        }


def make_dataset(world, recognize, n_ids, per_id, stage, rng, frames=4, ranges=PoseRanges(),
                 threshold=0.65, pose_rng=None, predicates=()):
    """Generate candidate pairs for ``n_ids`` identities and filter them.

    Identities come from ``rng.substream("identities")`` and poses from
    ``pose_rng`` (default ``rng.substream("poses")``), one sub-stream per
    identity, so changing the pose stream never changes the identity set.
    Image stage: the first candidate of every identity is a self-reference
    (reference equals target), the rest are cross-pose pairs. Video stage:
    a clip along a linear pose trajectory plus a reference at its own pose.
    """
    if stage not in ("image", "video"):
        raise ValueError(f"stage must be 'image' or 'video', got {stage!r}")
    id_rng = rng.substream("identities")
    pose_root = pose_rng if pose_rng is not None else rng.substream("poses")
    identities = []
    records = []
    for i in range(n_ids):
        ident, id_rng = make_identity(id_rng)
        identities.append(ident)
        prng = pose_root.substream(i)
        for j in range(per_id):
            ref_pose, prng = random_pose(prng, ranges)
            ref = render_frame(world, ident, ref_pose)
            if stage == "image":
                if j == 0:
                    rec = PairRecord(ref=ref, target=[ref], identity=i, kind="self",
                                     ref_pose=ref_pose, poses=[ref_pose])
                else:
                    tgt_pose, prng = random_pose(prng, ranges)
                    rec = PairRecord(ref=ref, target=[render_frame(world, ident, tgt_pose)],
                                     identity=i, kind="cross", ref_pose=ref_pose, poses=[tgt_pose])
            else:
                start, prng = random_pose(prng, ranges)
                end, prng = random_pose(prng, ranges)
                traj = linear_trajectory(start, end, frames)
                rec = PairRecord(ref=ref, target=synth_clip(world, ident, traj), identity=i,
                                 kind="clip", ref_pose=ref_pose, poses=traj)
            records.append(rec)
    filter_pairs(records, recognize, threshold, predicates)
    ds = Dataset(stage=stage, height=world.height, width=world.width,
                 frames=1 if stage == "image" else frames, identities=identities, records=records)
    if not ds.kept:
        raise EmptyDatasetError(
            f"filtering at threshold {threshold} dropped all {len(records)} candidates"
        )
    return ds
