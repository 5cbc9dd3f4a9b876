"""Synthetic ordered-workflow datasets.

Every synthetic video runs through all classes in canonical order, each class
lasting a truncated-normal number of clips. A clip's feature is its class
prototype plus isotropic noise drawn uniformly from the ball of radius
``noise_scale``, so noise never moves a feature further than ``noise_scale``
from its prototype. Confusable pairs pull their prototypes together; at
overlap 1 they coincide and only order can tell them apart.

Default durations are synthetic choices, not measurements.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import FeatureSequence, feature_file_name, save_features
from .dataset import (CANONICAL_CLASSES, ActivitySegment, CaseManifest, DatasetManifest, VideoRecord,
                      make_label_set, save_manifest, write_annotations)

# mean / std duration in clips, per canonical class
DEFAULT_DURATIONS = {
    "sterile_preparation": (12.0, 3.0),
    "patient_roll_in": (6.0, 1.5),
    "patient_preparation": (10.0, 2.5),
    "robot_roll_up": (5.0, 1.5),
    "robot_docking": (6.0, 1.5),
    "surgery": (30.0, 8.0),
    "robot_undocking": (6.0, 1.5),
    "robot_roll_back": (5.0, 1.5),
    "patient_close": (10.0, 2.5),
    "patient_roll_out": (6.0, 1.5),
}

DEFAULT_NOISE_SCALE = 12.0

DEFAULT_ROOMS = ("OR1", "OR2")
DEFAULT_PROCEDURES = ("cholecystectomy", "hernia_repair", "lobectomy", "prostatectomy", "hysterectomy")
DEFAULT_SURGEONS = ("S01", "S02", "S03", "S04", "S05", "S06")


@dataclass
class WorkflowProfile:
    class_names: list[str]
    duration_mean: list[float]
    duration_std: list[float]
    prototypes: np.ndarray  # (K, D)
    noise_scale: float = 1.0
    confusion_pairs: list[tuple[str, str, float]] = field(default_factory=list)
    rooms: list[str] = field(default_factory=lambda: list(DEFAULT_ROOMS))
    procedures: list[str] = field(default_factory=lambda: list(DEFAULT_PROCEDURES))
    surgeons: list[str] = field(default_factory=lambda: list(DEFAULT_SURGEONS))
    clip_len: int = 16

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        K = len(self.class_names)
        if K < 2:
            raise ValueError("need at least 2 classes")
        if len(self.duration_mean) != K or len(self.duration_std) != K:
            raise ValueError("duration lists must have one entry per class")
        if any(m <= 0 for m in self.duration_mean) or any(s < 0 for s in self.duration_std):
            raise ValueError("duration means must be > 0 and stds >= 0")
        if self.prototypes.ndim != 2 or self.prototypes.shape[0] != K:
            raise ValueError(f"prototypes must be K x D with K={K}")
        if not np.all(np.isfinite(self.prototypes)):
            raise ValueError("prototypes must be finite")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        self.confusion_pairs = [(a, b, float(o)) for a, b, o in self.confusion_pairs]
        for a, b, o in self.confusion_pairs:
            if a not in self.class_names or b not in self.class_names:
                raise ValueError(f"confusion pair ({a}, {b}) names an unknown class")
            if not 0.0 <= o <= 1.0:
                raise ValueError("overlap must lie in [0, 1]")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def feature_dim(self) -> int:
        return self.prototypes.shape[1]

    def effective_prototypes(self) -> np.ndarray:
        """Prototypes after confusable pairs are pulled toward each other."""
        protos = self.prototypes.copy()
        index = {n: i for i, n in enumerate(self.class_names)}
        for a, b, overlap in self.confusion_pairs:
            ia, ib = index[a], index[b]
            pa, pb = protos[ia].copy(), protos[ib].copy()
            protos[ia] = pa + 0.5 * overlap * (pb - pa)
            protos[ib] = pb + 0.5 * overlap * (pa - pb)
        return protos

    def to_dict(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "duration_mean": list(map(float, self.duration_mean)),
            "duration_std": list(map(float, self.duration_std)),
            "prototypes": self.prototypes.tolist(),
            "noise_scale": self.noise_scale,
            "confusion_pairs": [list(p) for p in self.confusion_pairs],
            "rooms": list(self.rooms),
            "procedures": list(self.procedures),
            "surgeons": list(self.surgeons),
            "clip_len": self.clip_len,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorkflowProfile":
        d = dict(d)
        d["confusion_pairs"] = [tuple(p) for p in d.get("confusion_pairs", [])]
        return cls(**d)


def default_profile(feature_dim: int = 64, noise_scale: float = DEFAULT_NOISE_SCALE, overlap: float = 0.9,
                    prototype_seed: int = 1234) -> WorkflowProfile:
    """Canonical 10-class profile with robot docking/undocking made confusable.

    Prototypes are orthogonal with norm 4, so distinct classes sit
    4*sqrt(2) ~ 5.66 apart before the confusable pair is pulled together.
    """
    names = list(CANONICAL_CLASSES)
    K = len(names)
    if feature_dim < K:
        raise ValueError(f"feature_dim must be >= {K} for orthogonal prototypes")
    rng = np.random.default_rng(prototype_seed)
    q, _ = np.linalg.qr(rng.standard_normal((feature_dim, K)))
    protos = 4.0 * q.T
    return WorkflowProfile(
        class_names=names,
        duration_mean=[DEFAULT_DURATIONS[n][0] for n in names],
        duration_std=[DEFAULT_DURATIONS[n][1] for n in names],
        prototypes=protos,
        noise_scale=noise_scale,
        confusion_pairs=[("robot_docking", "robot_undocking", overlap)],
    )


def load_profile(path) -> WorkflowProfile:
    return WorkflowProfile.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def save_profile(profile: WorkflowProfile, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(profile.to_dict(), indent=2) + "\n", encoding="utf-8")
    return path


# --------------------------------------------------------------------------
# sampling


def sample_durations(profile: WorkflowProfile, rng: np.random.Generator) -> np.ndarray:
    """Per-class durations in clips: normal truncated to values rounding to >= 1."""
    out = np.empty(profile.num_classes, dtype=np.int64)
    for k, (m, s) in enumerate(zip(profile.duration_mean, profile.duration_std)):
        while True:
            x = rng.normal(m, s) if s > 0 else m
            if x >= 0.5:
                break
        out[k] = max(1, int(np.floor(x + 0.5)))
    return out


def ball_noise(rng: np.random.Generator, n: int, dim: int, radius: float) -> np.ndarray:
    """``n`` points uniform in the ``dim``-ball of ``radius``."""
    if radius == 0:
        return np.zeros((n, dim))
    g = rng.standard_normal((n, dim))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    r = rng.random(n) ** (1.0 / dim)
    return radius * r[:, None] * g


def render_clip_frames(class_ids: np.ndarray, clip_len: int, frame_size: int, K: int,
                       rng: np.random.Generator, noise: float = 0.05) -> np.ndarray:
    """Toy intensity video: per-class brightness and a bar moving at a class-specific speed.

    Returns uint8 frames of shape (len(class_ids) * clip_len, H, W, 1).
    """
    n_frames = len(class_ids) * clip_len
    frames = np.empty((n_frames, frame_size, frame_size), dtype=np.float32)
    xs = np.arange(frame_size)
    for t in range(n_frames):
        c = int(class_ids[t // clip_len])
        level = -0.8 + 1.6 * c / max(K - 1, 1)
        bar = (xs - (t * (c + 1))) % frame_size < max(2, frame_size // 8)
        img = np.full((frame_size, frame_size), level, dtype=np.float32)
        img[:, bar] = np.clip(level + 0.6, -1.0, 1.0) if level < 0.4 else level - 0.6
        frames[t] = img
    frames += rng.normal(0.0, noise, frames.shape).astype(np.float32)
    frames = np.clip(frames, -1.0, 1.0)
    return np.round((frames + 1.0) * 127.5).astype(np.uint8)[..., None]


@dataclass
class SyntheticCase:
    case: CaseManifest
    videos: list[VideoRecord]
    features: list[FeatureSequence]
    clip_labels: np.ndarray
    frames: list[np.ndarray] | None = None


def generate_case(profile: WorkflowProfile, rng: np.random.Generator, views: int = 4,
                  case_id: str = "case_000", room_id: str = "OR1", procedure_type: str = "",
                  surgeon_id: str = "", pixel: bool = False, frame_size: int = 16) -> SyntheticCase:
    if views < 1:
        raise ValueError("views must be >= 1")
    durations = sample_durations(profile, rng)
    clip_len = profile.clip_len
    labels = np.repeat(np.arange(profile.num_classes), durations)
    bounds = np.concatenate([[0], np.cumsum(durations)])
    segments = [ActivitySegment(k, int(bounds[k]) * clip_len, int(bounds[k + 1]) * clip_len)
                for k in range(profile.num_classes)]
    num_frames = int(bounds[-1]) * clip_len
    protos = profile.effective_prototypes()
    video_ids = [f"{case_id}_v{j}" for j in range(views)]
    videos, feats, frames = [], [], [] if pixel else None
    for j, vid in enumerate(video_ids):
        noise = ball_noise(rng, len(labels), profile.feature_dim, profile.noise_scale)
        feats.append(FeatureSequence(vid, protos[labels] + noise, clip_len))
        videos.append(VideoRecord(vid, case_id, num_frames, cart_id=f"cart{j // 2}", camera_id=f"cam{j % 2}",
                                  segments=segments, feature_path=feature_file_name(vid)))
        if pixel:
            frames.append(render_clip_frames(labels, clip_len, frame_size, profile.num_classes, rng))
    case = CaseManifest(case_id, room_id, procedure_type, surgeon_id, video_ids)
    return SyntheticCase(case, videos, feats, labels, frames)


@dataclass
class SyntheticDataset:
    manifest: DatasetManifest
    features: dict[str, FeatureSequence]
    frames: dict[str, np.ndarray] | None = None


def _assign(values, i, rng):
    # cycle through every value first so each scheme has at least len(values) groups
    if i < len(values):
        return values[i]
    return values[int(rng.integers(len(values)))]


def _case_job(args):
    profile, seed_seq, views, case_id, room, proc, surgeon, pixel, frame_size = args
    return generate_case(profile, np.random.default_rng(seed_seq), views, case_id, room, proc, surgeon,
                         pixel=pixel, frame_size=frame_size)


def generate_dataset(profile: WorkflowProfile, n_cases: int, views: int = 4, seed: int = 0,
                     out_dir=None, pixel: bool = False, frame_size: int = 16,
                     jobs: int = 1) -> SyntheticDataset:
    """Generate ``n_cases`` cases (``views`` videos each), optionally writing them to ``out_dir``.

    On disk: ``manifest.json``, ``annotations.csv``, ``profile.json``,
    ``features/<video_id>.orfeat`` and, in pixel mode, ``frames/<video_id>.npy``.
    """
    if n_cases < 1:
        raise ValueError("n_cases must be >= 1")
    root = np.random.SeedSequence(seed)
    meta_rng = np.random.default_rng(root.spawn(1)[0])
    case_seeds = np.random.SeedSequence([seed, 1]).spawn(n_cases)
    width = max(3, len(str(n_cases - 1)))
    order = {"rooms": meta_rng.permutation(n_cases), "procedures": meta_rng.permutation(n_cases),
             "surgeons": meta_rng.permutation(n_cases)}
    jobs_args = []
    for i in range(n_cases):
        jobs_args.append((
            profile, case_seeds[i], views, f"case_{i:0{width}d}",
            _assign(profile.rooms, int(order["rooms"][i]), meta_rng),
            _assign(profile.procedures, int(order["procedures"][i]), meta_rng),
            _assign(profile.surgeons, int(order["surgeons"][i]), meta_rng),
            pixel, frame_size,
        ))
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            cases = list(pool.map(_case_job, jobs_args))
    else:
        cases = [_case_job(a) for a in jobs_args]

    manifest = DatasetManifest(
        label_set=make_label_set(profile.class_names),
        cases=[c.case for c in cases],
        videos=[v for c in cases for v in c.videos],
    )
    features = {f.video_id: f for c in cases for f in c.features}
    frames = None
    if pixel:
        frames = {v.video_id: fr for c in cases for v, fr in zip(c.videos, c.frames)}
    dataset = SyntheticDataset(manifest, features, frames)
    if out_dir is not None:
        write_dataset(dataset, out_dir, profile)
    return dataset


def write_dataset(dataset: SyntheticDataset, out_dir, profile: WorkflowProfile | None = None) -> Path:
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    save_manifest(dataset.manifest, out / "manifest.json")
    write_annotations(
        [(v.video_id, s) for v in dataset.manifest.videos for s in v.segments],
        out / "annotations.csv",
        dataset.manifest.label_set,
    )
    if profile is not None:
        save_profile(profile, out / "profile.json")
    for vid, seq in dataset.features.items():
        save_features(seq, out / "features" / feature_file_name(vid))
    if dataset.frames is not None:
        (out / "frames").mkdir(exist_ok=True)
        for vid, fr in dataset.frames.items():
            np.save(out / "frames" / f"{vid}.npy", fr)
    return out
