"""Dataset manifests, activity annotations, validation and train/test splits.

All positions are frame indices. A manifest is immutable once loaded; every
function here is pure.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

CANONICAL_CLASSES = (
    "sterile_preparation",
    "patient_roll_in",
    "patient_preparation",
    "robot_roll_up",
    "robot_docking",
    "surgery",
    "robot_undocking",
    "robot_roll_back",
    "patient_close",
    "patient_roll_out",
)

BACKGROUND = -1

SCHEMES = ("random", "room", "procedure", "surgeon")
GROUP_ATTRIBUTE = {"room": "room_id", "procedure": "procedure_type", "surgeon": "surgeon_id"}

ANNOTATION_HEADER = ("video_id", "class_name", "start_frame", "end_frame")


class AnnotationError(ValueError):
    """Malformed annotation file."""


class ManifestValidationError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class ActivityClass:
    id: int
    name: str


@dataclass(frozen=True)
class ActivitySegment:
    class_id: int
    start_frame: int
    end_frame: int  # exclusive

    def __post_init__(self):
        if self.start_frame < 0:
            raise ValueError(f"start_frame must be >= 0, got {self.start_frame}")
        if self.end_frame <= self.start_frame:
            raise ValueError(
                f"end_frame ({self.end_frame}) must exceed start_frame ({self.start_frame})"
            )

    @property
    def length(self) -> int:
        return self.end_frame - self.start_frame


@dataclass(frozen=True)
class VideoRecord:
    video_id: str
    case_id: str
    num_frames: int
    cart_id: str = ""
    camera_id: str = ""
    segments: tuple[ActivitySegment, ...] = ()
    feature_path: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))


@dataclass(frozen=True)
class CaseManifest:
    case_id: str
    room_id: str
    procedure_type: str
    surgeon_id: str
    video_ids: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "video_ids", tuple(self.video_ids))


@dataclass(frozen=True)
class DatasetManifest:
    label_set: tuple[ActivityClass, ...]
    cases: tuple[CaseManifest, ...]
    videos: tuple[VideoRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "label_set", tuple(self.label_set))
        object.__setattr__(self, "cases", tuple(self.cases))
        object.__setattr__(self, "videos", tuple(self.videos))

    @property
    def num_classes(self) -> int:
        return len(self.label_set)

    @property
    def class_names(self) -> list[str]:
        return [c.name for c in sorted(self.label_set, key=lambda c: c.id)]

    def video(self, video_id: str) -> VideoRecord:
        for v in self.videos:
            if v.video_id == video_id:
                return v
        raise KeyError(video_id)

    def case_of(self) -> dict[str, CaseManifest]:
        """Map video_id -> owning case (via the video's case_id)."""
        by_id = {c.case_id: c for c in self.cases}
        return {v.video_id: by_id[v.case_id] for v in self.videos if v.case_id in by_id}

    def to_dict(self) -> dict:
        return {
            "label_set": [asdict(c) for c in self.label_set],
            "cases": [
                {**asdict(c), "video_ids": list(c.video_ids)} for c in self.cases
            ],
            "videos": [
                {
                    "video_id": v.video_id,
                    "case_id": v.case_id,
                    "num_frames": v.num_frames,
                    "cart_id": v.cart_id,
                    "camera_id": v.camera_id,
                    "segments": [asdict(s) for s in v.segments],
                    "feature_path": v.feature_path,
                }
                for v in self.videos
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(
            label_set=[ActivityClass(int(c["id"]), str(c["name"])) for c in d["label_set"]],
            cases=[
                CaseManifest(
                    case_id=c["case_id"],
                    room_id=c["room_id"],
                    procedure_type=c["procedure_type"],
                    surgeon_id=c["surgeon_id"],
                    video_ids=c["video_ids"],
                )
                for c in d["cases"]
            ],
            videos=[
                VideoRecord(
                    video_id=v["video_id"],
                    case_id=v["case_id"],
                    num_frames=int(v["num_frames"]),
                    cart_id=v.get("cart_id", ""),
                    camera_id=v.get("camera_id", ""),
                    segments=[ActivitySegment(**s) for s in v.get("segments", [])],
                    feature_path=v.get("feature_path"),
                )
                for v in d["videos"]
            ],
        )


def make_label_set(names: Sequence[str] = CANONICAL_CLASSES) -> tuple[ActivityClass, ...]:
    if len(names) < 2:
        raise ValueError("a label set needs at least 2 classes")
    if len(set(names)) != len(names):
        raise ValueError("class names must be unique")
    return tuple(ActivityClass(i, n) for i, n in enumerate(names))


def save_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(manifest.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def load_manifest(path) -> DatasetManifest:
    return DatasetManifest.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# --------------------------------------------------------------------------
# annotations


def parse_annotations(path, label_set: Sequence[ActivityClass] | None = None):
    """Read a ``video_id,class_name,start_frame,end_frame`` CSV.

    Returns ``[(video_id, ActivitySegment), ...]`` in file order. Class names
    are resolved against ``label_set`` (canonical classes by default).
    """
    label_set = make_label_set() if label_set is None else label_set
    name_to_id = {c.name: c.id for c in label_set}
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != ANNOTATION_HEADER:
            raise AnnotationError(f"line 1: expected header {','.join(ANNOTATION_HEADER)}, got {header}")
        for row in reader:
            lineno = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 4:
                raise AnnotationError(f"line {lineno}: expected 4 fields, got {len(row)}")
            video_id, class_name, start, end = (cell.strip() for cell in row)
            if class_name not in name_to_id:
                raise AnnotationError(f"line {lineno}: unknown class name {class_name!r}")
            try:
                start_i, end_i = int(start), int(end)
            except ValueError:
                raise AnnotationError(f"line {lineno}: frame indices must be integers") from None
            try:
                seg = ActivitySegment(name_to_id[class_name], start_i, end_i)
            except ValueError as exc:
                raise AnnotationError(f"line {lineno}: {exc}") from None
            rows.append((video_id, seg))

    by_video: dict[str, list[ActivitySegment]] = {}
    for vid, seg in rows:
        by_video.setdefault(vid, []).append(seg)
    for vid, segs in by_video.items():
        if _overlapping_pairs(segs):
            raise ManifestValidationError(f"overlapping segments in video {vid!r}")
    return rows


def write_annotations(rows: Iterable[tuple[str, ActivitySegment]], path, label_set=None) -> Path:
    label_set = make_label_set() if label_set is None else label_set
    id_to_name = {c.id: c.name for c in label_set}
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ANNOTATION_HEADER)
        for vid, seg in rows:
            w.writerow([vid, id_to_name[seg.class_id], seg.start_frame, seg.end_frame])
    return path


def _overlapping_pairs(segments):
    ordered = sorted(enumerate(segments), key=lambda p: (p[1].start_frame, p[1].end_frame))
    pairs = []
    for (i, a), (j, b) in zip(ordered, ordered[1:]):
        if b.start_frame < a.end_frame:
            pairs.append((i, j))
    return pairs


# --------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class ValidationIssue:
    kind: str  # dangling_reference | overlap | frame_range | ordering | label_set | duplicate
    message: str


@dataclass
class ValidationReport:
    issues: list[ValidationIssue] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues

    def __len__(self):
        return len(self.issues)

    def of_kind(self, kind: str) -> list[ValidationIssue]:
        return [i for i in self.issues if i.kind == kind]

    def add(self, kind, message):
        self.issues.append(ValidationIssue(kind, message))


def validate_manifest(manifest: DatasetManifest) -> ValidationReport:
    report = ValidationReport()

    ids = sorted(c.id for c in manifest.label_set)
    if ids != list(range(len(ids))):
        report.add("label_set", f"class ids must be dense 0..K-1, got {ids}")
    if len(ids) < 2:
        report.add("label_set", "label set needs at least 2 classes")
    valid_ids = set(ids)

    case_ids = [c.case_id for c in manifest.cases]
    video_ids = [v.video_id for v in manifest.videos]
    for name, seq in (("case", case_ids), ("video", video_ids)):
        dupes = sorted({x for x in seq if seq.count(x) > 1})
        for d in dupes:
            report.add("duplicate", f"duplicate {name} id {d!r}")
    case_set, video_set = set(case_ids), set(video_ids)

    for v in manifest.videos:
        if v.case_id not in case_set:
            report.add("dangling_reference", f"video {v.video_id!r} references missing case {v.case_id!r}")
    for c in manifest.cases:
        if not c.video_ids:
            report.add("dangling_reference", f"case {c.case_id!r} lists no videos")
        for vid in c.video_ids:
            if vid not in video_set:
                report.add("dangling_reference", f"case {c.case_id!r} references missing video {vid!r}")

    for v in manifest.videos:
        if v.num_frames <= 0:
            report.add("frame_range", f"video {v.video_id!r} has num_frames={v.num_frames}")
        starts = [s.start_frame for s in v.segments]
        if starts != sorted(starts):
            report.add("ordering", f"video {v.video_id!r} segments not sorted by start_frame")
        for k, s in enumerate(v.segments):
            if s.end_frame > v.num_frames:
                report.add(
                    "frame_range",
                    f"video {v.video_id!r} segment {k} ends at {s.end_frame} > num_frames {v.num_frames}",
                )
            if s.class_id not in valid_ids:
                report.add("label_set", f"video {v.video_id!r} segment {k} has unknown class {s.class_id}")
        for i, j in _overlapping_pairs(v.segments):
            report.add("overlap", f"video {v.video_id!r} segments {i} and {j} overlap")
    return report


# --------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitSpec:
    scheme: str
    train_video_ids: tuple[str, ...]
    test_video_ids: tuple[str, ...]
    seed: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "train_video_ids", tuple(self.train_video_ids))
        object.__setattr__(self, "test_video_ids", tuple(self.test_video_ids))

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "seed": self.seed,
            "params": self.params,
            "train_video_ids": list(self.train_video_ids),
            "test_video_ids": list(self.test_video_ids),
        }

    @classmethod
    def from_dict(cls, d) -> "SplitSpec":
        return cls(d["scheme"], d["train_video_ids"], d["test_video_ids"], int(d["seed"]), d.get("params", {}))


def save_split(split: SplitSpec, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(split.to_dict(), indent=2) + "\n", encoding="utf-8")
    return path


def load_split(path) -> SplitSpec:
    return SplitSpec.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def make_split(manifest: DatasetManifest, scheme: str, params: dict | None = None, seed: int = 0) -> SplitSpec:
    """Partition the manifest's videos into train and test.

    ``random`` samples ``round(train_fraction * N)`` videos for training and
    ignores case membership. ``room``, ``procedure`` and ``surgeon`` hold out
    whole groups of the case attribute: either named explicitly with
    ``train_groups`` / ``test_groups``, or chosen greedily (largest group
    first, ties by group key) until ``test_fraction`` is met or exceeded.
    An optional ``max_deviation`` bounds how far the achieved test fraction
    may overshoot the target.
    """
    params = dict(params or {})
    if scheme not in SCHEMES:
        raise SplitError(f"unknown split scheme {scheme!r}; expected one of {SCHEMES}")
    all_ids = [v.video_id for v in manifest.videos]
    if not all_ids:
        raise SplitError("manifest has no videos")

    if scheme == "random":
        frac = float(params.setdefault("train_fraction", 0.8))
        if not 0.0 < frac < 1.0:
            raise SplitError(f"train_fraction must be in (0, 1), got {frac}")
        n_train = round_half_up(frac * len(all_ids))
        rng = np.random.default_rng(seed)
        chosen = set(rng.permutation(len(all_ids))[:n_train].tolist())
        train = [vid for i, vid in enumerate(all_ids) if i in chosen]
        test = [vid for i, vid in enumerate(all_ids) if i not in chosen]
        return SplitSpec(scheme, train, test, seed, params)

    attr = GROUP_ATTRIBUTE[scheme]
    case_of = manifest.case_of()
    missing = [vid for vid in all_ids if vid not in case_of]
    if missing:
        raise SplitError(f"videos without a case cannot be grouped: {missing[:5]}")
    groups: dict[str, list[str]] = {}
    for vid in all_ids:
        groups.setdefault(getattr(case_of[vid], attr), []).append(vid)
    if len(groups) < 2:
        raise SplitError(f"{scheme} split needs at least 2 distinct {attr} values, found {sorted(groups)}")

    train_groups = params.get("train_groups")
    test_groups = params.get("test_groups")
    if train_groups is not None or test_groups is not None:
        named = list(train_groups or []) + list(test_groups or [])
        unknown = sorted(set(named) - set(groups))
        if unknown:
            raise SplitError(f"unknown {attr} value(s) {unknown}; known: {sorted(groups)}")
        if train_groups is not None and test_groups is not None:
            both = set(train_groups) & set(test_groups)
            if both:
                raise SplitError(f"{attr} value(s) {sorted(both)} on both sides")
            test_keys = set(test_groups)
            train_keys = set(train_groups)
        elif train_groups is not None:
            train_keys = set(train_groups)
            test_keys = set(groups) - train_keys
        else:
            test_keys = set(test_groups)
            train_keys = set(groups) - test_keys
    else:
        target = float(params.setdefault("test_fraction", 0.2))
        if not 0.0 < target < 1.0:
            raise SplitError(f"test_fraction must be in (0, 1), got {target}")
        order = sorted(groups, key=lambda g: (-len(groups[g]), g))
        test_keys, n_test = set(), 0
        for g in order:
            if n_test / len(all_ids) >= target:
                break
            test_keys.add(g)
            n_test += len(groups[g])
        train_keys = set(groups) - test_keys
        achieved = n_test / len(all_ids)
        max_dev = params.get("max_deviation")
        if not train_keys or (max_dev is not None and achieved - target > float(max_dev)):
            closest = _closest_group_fraction([len(v) for v in groups.values()], target)
            raise SplitError(
                f"test fraction {target} unreachable with whole {attr} groups; "
                f"closest achievable is {closest:.4f}"
            )

    if not train_keys or not test_keys:
        raise SplitError("split leaves one side empty")
    train = [vid for vid in all_ids if getattr(case_of[vid], attr) in train_keys]
    test = [vid for vid in all_ids if getattr(case_of[vid], attr) in test_keys]
    return SplitSpec(scheme, train, test, seed, params)


def _closest_group_fraction(sizes: list[int], target: float) -> float:
    """Test fraction nearest ``target`` over subsets leaving both sides non-empty."""
    total = sum(sizes)
    reachable = {0}
    for s in sizes:
        reachable |= {r + s for r in reachable}
    candidates = [r for r in reachable if 0 < r < total]
    if not candidates:
        return float("nan")
    best = min(candidates, key=lambda r: (abs(r / total - target), r))
    return best / total


def check_split(manifest: DatasetManifest, split: SplitSpec) -> list[str]:
    """Invariant violations of ``split`` against ``manifest`` (empty when sound)."""
    problems = []
    train, test = set(split.train_video_ids), set(split.test_video_ids)
    if train & test:
        problems.append(f"{len(train & test)} videos on both sides")
    known = {v.video_id for v in manifest.videos}
    if (train | test) - known:
        problems.append("split references videos not in the manifest")
    if split.scheme in GROUP_ATTRIBUTE:
        case_of = manifest.case_of()
        attr = GROUP_ATTRIBUTE[split.scheme]
        straddling = {case_of[v].case_id for v in train} & {case_of[v].case_id for v in test}
        if straddling:
            problems.append(f"cases on both sides: {sorted(straddling)[:5]}")
        shared = {getattr(case_of[v], attr) for v in train} & {getattr(case_of[v], attr) for v in test}
        if shared:
            problems.append(f"{attr} values on both sides: {sorted(shared)}")
    return problems


# --------------------------------------------------------------------------
# clip labels


def clip_labels_for_video(video: VideoRecord, clip_len: int) -> list[int]:
    """Label of each full clip by maximal frame overlap; -1 where nothing overlaps.

    Ties go to the earlier-starting segment.
    """
    if clip_len < 1:
        raise ValueError("clip_len must be >= 1")
    n_clips = video.num_frames // clip_len
    segs = sorted(video.segments, key=lambda s: s.start_frame)
    labels = []
    for t in range(n_clips):
        lo, hi = t * clip_len, (t + 1) * clip_len
        best, best_overlap = BACKGROUND, 0
        for s in segs:
            overlap = min(hi, s.end_frame) - max(lo, s.start_frame)
            if overlap > best_overlap:
                best, best_overlap = s.class_id, overlap
        labels.append(best)
    return labels
