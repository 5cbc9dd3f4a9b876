import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from orflow.dataset import (CANONICAL_CLASSES, ActivitySegment, AnnotationError, DatasetManifest,
                            ManifestValidationError, SplitError, VideoRecord, check_split,
                            clip_labels_for_video, load_manifest, load_split, make_split, parse_annotations,
                            round_half_up, save_manifest, save_split, validate_manifest)
from orflow.synthgen import default_profile, generate_dataset

from conftest import build_manifest, random_manifest


def write_csv(path, rows, header="video_id,class_name,start_frame,end_frame"):
    path.write_text("\n".join([header, *rows]) + "\n")
    return path


def test_parse_single_row(tmp_path):
    rows = parse_annotations(write_csv(tmp_path / "a.csv", ["vid_001,sterile_preparation,0,4500"]))
    assert rows == [("vid_001", ActivitySegment(0, 0, 4500))]


def test_parse_full_canonical_video(tmp_path):
    bounds = [0, 450, 700, 1300, 1500, 1800, 5000, 5300, 5500, 6100, 6400]
    lines = [f"vid_002,{name},{bounds[k]},{bounds[k + 1]}" for k, name in enumerate(CANONICAL_CLASSES)]
    rows = parse_annotations(write_csv(tmp_path / "a.csv", lines))
    assert len(rows) == 10
    assert [s.class_id for _, s in rows] == list(range(10))
    assert [(s.start_frame, s.end_frame) for _, s in rows] == list(zip(bounds, bounds[1:]))


@pytest.mark.parametrize("row, fragment", [
    ("vid,sterile_preparation,10,10", "line 2"),
    ("vid,sterile_preparation,10,5", "line 2"),
    ("vid,not_a_class,0,5", "unknown class"),
    ("vid,surgery,a,5", "integers"),
    ("vid,surgery,0", "4 fields"),
])
def test_parse_rejects_bad_rows(tmp_path, row, fragment):
    with pytest.raises(AnnotationError, match=fragment):
        parse_annotations(write_csv(tmp_path / "a.csv", [row]))


def test_parse_reports_line_number(tmp_path):
    path = write_csv(tmp_path / "a.csv", ["v,surgery,0,5", "v,surgery,5,9", "v,surgery,9,3"])
    with pytest.raises(AnnotationError, match="line 4"):
        parse_annotations(path)


def test_parse_overlap_names_video(tmp_path):
    path = write_csv(tmp_path / "a.csv", ["ok,surgery,0,5", "bad,surgery,0,50", "bad,patient_close,40,60"])
    with pytest.raises(ManifestValidationError, match="'bad'"):
        parse_annotations(path)


def test_parse_requires_header(tmp_path):
    with pytest.raises(AnnotationError, match="header"):
        parse_annotations(write_csv(tmp_path / "a.csv", [], header="vid_001,surgery,0,5"))


def test_validate_synthetic_manifest_is_clean():
    ds = generate_dataset(default_profile(), 4, views=2, seed=3)
    assert validate_manifest(ds.manifest).ok


def test_validate_dangling_case():
    m = build_manifest([("OR1", "p", "s")], views=1)
    bad = DatasetManifest(m.label_set, m.cases, [*m.videos, VideoRecord("orphan", "nope", 100)])
    report = validate_manifest(bad)
    assert len(report.of_kind("dangling_reference")) == 1
    assert len(report) == 1


def test_validate_frame_range_names_video_and_segment():
    m = build_manifest([("OR1", "p", "s")], views=1, frames=100)
    v = m.videos[0]
    bad_video = VideoRecord(v.video_id, v.case_id, 100, segments=[ActivitySegment(0, 0, 50), ActivitySegment(1, 50, 120)])
    report = validate_manifest(DatasetManifest(m.label_set, m.cases, [bad_video]))
    assert len(report) == 1
    issue = report.issues[0]
    assert issue.kind == "frame_range" and v.video_id in issue.message and "segment 1" in issue.message


def test_validate_overlap():
    m = build_manifest([("OR1", "p", "s")], views=1, frames=100)
    v = m.videos[0]
    bad_video = VideoRecord(v.video_id, v.case_id, 100, segments=[ActivitySegment(0, 0, 50), ActivitySegment(1, 40, 90)])
    report = validate_manifest(DatasetManifest(m.label_set, m.cases, [bad_video]))
    assert [i.kind for i in report.issues] == ["overlap"]


def test_manifest_json_roundtrip(tmp_path):
    ds = generate_dataset(default_profile(), 3, views=2, seed=0)
    path = save_manifest(ds.manifest, tmp_path / "m.json")
    assert load_manifest(path) == ds.manifest
    assert set(json.loads(path.read_text())) == {"label_set", "cases", "videos"}


# splits


def test_random_split_eighty_twenty():
    m = build_manifest([("OR1", "p", "s")] * 100)
    split = make_split(m, "random", {"train_fraction": 0.8}, seed=5)
    assert len(m.videos) == 400
    assert (len(split.train_video_ids), len(split.test_video_ids)) == (320, 80)


def test_room_split_or1_share():
    # 230 of 400 videos in OR1 (57.5%); some cases have missing views
    cases = [("OR1", "p", "s")] * 56 + [("OR1", "p", "s", 3)] * 2 + [("OR2", "p", "s")] * 42 + [("OR2", "p", "s", 2)]
    m = build_manifest(cases)
    assert len(m.videos) == 400
    split = make_split(m, "room", {"train_groups": ["OR1"]}, seed=0)
    assert len(split.train_video_ids) == 230
    assert check_split(m, split) == []


def test_procedure_split_greedy_hand_enumerated():
    # 5 procedures x 4 cases, 1 view: all groups hold 4 videos (20%), so the
    # greedy pass takes exactly the lexicographically first one.
    procs = ["appendectomy", "colectomy", "hernia", "lobectomy", "nephrectomy"]
    m = build_manifest([("OR1", p, "s") for p in procs for _ in range(4)], views=1)
    split = make_split(m, "procedure", {"test_fraction": 0.2}, seed=0)
    case_of = m.case_of()
    assert {case_of[v].procedure_type for v in split.test_video_ids} == {"appendectomy"}
    assert len(split.test_video_ids) == 4


def test_greedy_takes_largest_group_first():
    m = build_manifest([("OR1", "a", "s1")] * 2 + [("OR1", "b", "s2")] * 5 + [("OR1", "c", "s3")] * 3, views=1)
    split = make_split(m, "surgeon", {"test_fraction": 0.3}, seed=0)
    assert {m.case_of()[v].surgeon_id for v in split.test_video_ids} == {"s2"}


def test_unreachable_fraction_reports_closest():
    m = build_manifest([("OR1", "a", "s")] * 9 + [("OR1", "b", "s")], views=1)
    with pytest.raises(SplitError, match="closest achievable is 0.9000"):
        make_split(m, "procedure", {"test_fraction": 0.95}, seed=0)
    with pytest.raises(SplitError, match="closest achievable is 0.1000"):
        make_split(m, "procedure", {"test_fraction": 0.2, "max_deviation": 0.1}, seed=0)


def test_unknown_group_value():
    m = build_manifest([("OR1", "a", "s"), ("OR2", "b", "t")], views=1)
    with pytest.raises(SplitError, match="OR9"):
        make_split(m, "room", {"train_groups": ["OR9"]})


def test_unknown_scheme():
    m = build_manifest([("OR1", "a", "s"), ("OR2", "b", "t")], views=1)
    with pytest.raises(SplitError):
        make_split(m, "camera")


def test_split_json_roundtrip(tmp_path):
    m = build_manifest([("OR1", "a", "s"), ("OR2", "b", "t")] * 3, views=2)
    split = make_split(m, "random", {"train_fraction": 0.5}, seed=9)
    path = save_split(split, tmp_path / "s.json")
    assert load_split(path) == split
    assert set(json.loads(path.read_text())) == {"scheme", "seed", "params", "train_video_ids", "test_video_ids"}


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scheme=st.sampled_from(["random", "room", "procedure", "surgeon"]),
       frac=st.floats(0.1, 0.9))
def test_split_invariants_property(seed, scheme, frac):
    m = random_manifest(np.random.default_rng(seed))
    params = {"train_fraction": frac} if scheme == "random" else {"test_fraction": frac}
    try:
        split = make_split(m, scheme, params, seed)
    except SplitError:
        return  # whole groups cannot realize this fraction
    assert check_split(m, split) == []
    assert len(split.train_video_ids) + len(split.test_video_ids) == len(m.videos)
    assert make_split(m, scheme, params, seed) == split
    if scheme == "random":
        assert len(split.train_video_ids) == round_half_up(frac * len(m.videos))


# clip labels


def video(num_frames, segments):
    return VideoRecord("v", "c", num_frames, segments=[ActivitySegment(*s) for s in segments])


def test_clip_labels_single_segment():
    assert clip_labels_for_video(video(48, [(3, 0, 48)]), 16) == [3, 3, 3]


def test_clip_labels_majority_overlap():
    assert clip_labels_for_video(video(32, [(0, 0, 20), (1, 20, 32)]), 16) == [0, 1]


def test_clip_labels_background_and_dropped_tail():
    assert clip_labels_for_video(video(40, [(2, 0, 8)]), 16) == [2, -1]


def test_clip_labels_tie_goes_to_earlier_segment():
    assert clip_labels_for_video(video(16, [(5, 8, 16), (4, 0, 8)]), 16) == [4]


@settings(max_examples=100, deadline=None)
@given(n=st.integers(1, 500), clip_len=st.integers(1, 40))
def test_clip_labels_length(n, clip_len):
    assert len(clip_labels_for_video(video(n, [(0, 0, n)]), clip_len)) == n // clip_len
