"""Identity similarity and facial-motion metrics over per-frame embeddings and landmarks."""

from dataclasses import dataclass, field
import json

import numpy as np

from . import numerics as nm
from .errors import DegenerateInputError, DimensionError, EmptyInputError, FormatError

N_POINTS = 5


@dataclass(frozen=True)
class LandmarkSet:
    points: np.ndarray  # [5, 2] (x, y) pixels
    frame_w: float
    frame_h: float

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (N_POINTS, 2):
            raise DimensionError(f"expected {N_POINTS} landmark pairs, got shape {pts.shape}")
        if self.frame_w <= 0 or self.frame_h <= 0:
            raise ValueError("frame dimensions must be positive")
        if np.any(pts < 0) or np.any(pts[:, 0] > self.frame_w) or np.any(pts[:, 1] > self.frame_h):
            raise ValueError("landmarks fall outside the frame")
        object.__setattr__(self, "points", pts)


@dataclass
class VideoEval:
    embeddings: np.ndarray  # [F, k]
    references: np.ndarray  # [R, k]
    landmarks: list = field(default_factory=list)  # F LandmarkSets, or empty when unknown

    def __post_init__(self):
        self.embeddings = np.atleast_2d(np.asarray(self.embeddings, dtype=np.float64))
        self.references = np.atleast_2d(np.asarray(self.references, dtype=np.float64))
        if self.embeddings.shape[0] < 1 or self.references.shape[0] < 1:
            raise EmptyInputError("need at least one frame and one reference embedding")
        if self.embeddings.shape[1] != self.references.shape[1]:
            raise DimensionError(
                f"frame embeddings of width {self.embeddings.shape[1]} vs references of width "
                f"{self.references.shape[1]}"
            )
        if self.landmarks and len(self.landmarks) != self.n_frames:
            raise DimensionError(f"{len(self.landmarks)} landmark sets for {self.n_frames} frames")

    @property
    def n_frames(self):
        return self.embeddings.shape[0]


def reference_direction(refs):
    """Unit vector of the mean of the unit-normalised reference embeddings."""
    refs = np.atleast_2d(np.asarray(refs, dtype=np.float64))
    norms = np.linalg.norm(refs, axis=1)
    if np.any(norms == 0):
        raise DegenerateInputError("reference embedding with zero norm")
    mean = (refs / norms[:, None]).mean(axis=0)
    n = np.linalg.norm(mean)
    if n == 0:
        raise DegenerateInputError("reference embeddings cancel out")
    return mean / n


def frame_similarities(ev):
    ref = reference_direction(ev.references)
    return np.array([nm.cosine_similarity(e, ref) for e in ev.embeddings])


def id_similarity_avg(ev):
    return float(np.mean(frame_similarities(ev)))


def sampled_frames(n, k=8):
    """``min(k, n)`` evenly spaced frame indices including both ends."""
    k = min(k, n)
    return np.unique(np.round(np.linspace(0, n - 1, k)).astype(np.int64))


def similarity_decay(ev):
    if ev.n_frames < 2:
        raise EmptyInputError("similarity decay needs at least two frames")
    idx = sampled_frames(ev.n_frames)
    sims = frame_similarities(ev)
    return float(max(0.0, sims[idx[0]] - sims[idx[-1]]))


def align_landmarks(ls):
    """Landmarks centred on their centroid and divided by their bounding-box diagonal."""
    pts = ls.points if isinstance(ls, LandmarkSet) else np.asarray(ls, np.float64)
    diag = np.linalg.norm(pts.max(axis=0) - pts.min(axis=0))
    if diag == 0:
        raise DegenerateInputError("all landmarks coincide")
    return (pts - pts.mean(axis=0)) / diag


def _require_landmarks(ev):
    if not ev.landmarks:
        raise EmptyInputError("no landmarks attached to this clip")


def fm_ref(ev, ref_landmarks):
    _require_landmarks(ev)
    ref = align_landmarks(ref_landmarks)
    dists = [np.linalg.norm(align_landmarks(ls) - ref, axis=1).mean() for ls in ev.landmarks]
    return float(np.mean(dists))


def inter_frame_motion(ev):
    """Mean landmark displacement between each consecutive frame pair, in frame-normalised units."""
    _require_landmarks(ev)
    if len(ev.landmarks) < 2:
        raise EmptyInputError("inter-frame motion needs at least two frames")
    norm = [ls.points / np.array([ls.frame_w, ls.frame_h]) for ls in ev.landmarks]
    return np.array([np.linalg.norm(b - a, axis=1).mean() for a, b in zip(norm[:-1], norm[1:])])


def fm_inter(ev, statistic="max"):
    steps = inter_frame_motion(ev)
    if statistic == "max":
        return float(steps.max())
    if statistic == "mean":
        return float(steps.mean())
    raise ValueError(f"unknown statistic {statistic!r}")


@dataclass(frozen=True)
class Thresholds:
    identity: float = 0.5
    motion: float = 0.01


def face_recognized(ev):
    norms = np.linalg.norm(ev.embeddings, axis=1)
    return bool(np.any(np.isfinite(norms) & (norms > 0)))


def success_rates(evals, thresholds=Thresholds()):
    """Fraction of clips passing each check; ``None`` marks a check that cannot run."""
    evals = list(evals)
    if not evals:
        raise EmptyInputError("no clips to score")
    recognized = [face_recognized(e) for e in evals]
    ident = [r and id_similarity_avg(e) >= thresholds.identity for r, e in zip(recognized, evals)]
    out = {
        "face_recognized": float(np.mean(recognized)),
        "identity_check": float(np.mean(ident)),
        "motion": None,
        "text_alignment": None,
    }
    if all(e.landmarks and len(e.landmarks) > 1 for e in evals):
        out["motion"] = float(np.mean([fm_inter(e) >= thresholds.motion for e in evals]))
    return out


# -- reports ------------------------------------------------------------------


def clip_metrics(ev, ref_landmarks=None):
    row = {"frames": ev.n_frames, "id_similarity_avg": id_similarity_avg(ev)}
    row["similarity_decay"] = similarity_decay(ev) if ev.n_frames > 1 else None
    row["fm_ref"] = fm_ref(ev, ref_landmarks) if ev.landmarks and ref_landmarks is not None else None
    row["fm_inter"] = fm_inter(ev) if ev.landmarks and ev.n_frames > 1 else None
    return row


def _mean_or_none(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def summarize(rows):
    if not rows:
        raise EmptyInputError("no clips to summarise")
    keys = ("id_similarity_avg", "similarity_decay", "fm_ref", "fm_inter")
    return {k: _mean_or_none([r[k] for r in rows]) for k in keys} | {"clips": len(rows)}


def _fmt(v):
    if v is None:
        return "n/a"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def report_text(summary, rates=None):
    lines = [f"{'metric':<20} value"]
    for k, v in summary.items():
        lines.append(f"{k:<20} {_fmt(v)}")
    for k, v in (rates or {}).items():
        lines.append(f"{'rate.' + k:<20} {_fmt(v)}")
    return "\n".join(lines) + "\n"


def report_kv(summary, rates=None, rows=()):
    lines = [f"{k}={_fmt(v)}" for k, v in summary.items()]
    lines += [f"rate.{k}={_fmt(v)}" for k, v in (rates or {}).items()]
    for i, row in enumerate(rows):
        lines += [f"clip.{i}.{k}={_fmt(v)}" for k, v in row.items()]
    return "\n".join(lines) + "\n"


# -- line-delimited frame records ---------------------------------------------


def frame_record(video, embedding, landmarks=None, frame_w=None, frame_h=None):
    rec = {"video": video, "embedding": np.asarray(embedding, np.float64).tolist()}
    if landmarks is not None:
        rec["landmarks"] = np.asarray(landmarks, np.float64).tolist()
        rec["frame_w"] = frame_w
        rec["frame_h"] = frame_h
    return rec


def write_frame_records(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_frame_records(path):
    """Group frame lines by ``video`` key, keeping first-seen order.

    Returns ``{video: (embeddings [n, k], [LandmarkSet] or [])}``.
    """
    groups = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                video = str(rec["video"])
                emb = np.asarray(rec["embedding"], dtype=np.float64)
                if emb.ndim != 1:
                    raise ValueError("embedding must be a flat array")
                lm = None
                if "landmarks" in rec:
                    lm = LandmarkSet(np.asarray(rec["landmarks"]), float(rec["frame_w"]), float(rec["frame_h"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            embs, lms = groups.setdefault(video, ([], []))
            embs.append(emb)
            if lm is not None:
                lms.append(lm)
            if lms and len(lms) != len(embs):
                raise FormatError(f"{path}:{lineno}: landmarks missing on some frames of video {video!r}")
    return {k: (np.stack(e), l) for k, (e, l) in groups.items()}


def evaluate_files(samples_path, references_path, thresholds=Thresholds()):
    """Score every clip in ``samples_path`` against its references. Returns ``(rows, summary, rates)``."""
    samples = read_frame_records(samples_path)
    refs = read_frame_records(references_path)
    if not samples:
        raise EmptyInputError(f"{samples_path}: no clips")
    rows, evals = [], []
    for video, (embs, lms) in samples.items():
        if video not in refs:
            raise FormatError(f"{samples_path}: clip {video!r} has no reference in {references_path}")
        ref_embs, ref_lms = refs[video]
        ev = VideoEval(embeddings=embs, references=ref_embs, landmarks=lms)
        evals.append(ev)
        rows.append({"video": video} | clip_metrics(ev, ref_lms[0] if ref_lms else None))
    return rows, summarize(rows), success_rates(evals, thresholds)
