import numpy as np
import pytest

from orflow.dataset import (ActivitySegment, CaseManifest, DatasetManifest, VideoRecord, clip_labels_for_video,
                            make_label_set)
from orflow.synthgen import default_profile, generate_dataset


def build_manifest(cases, views=4, frames=1600, label_names=None):
    """``cases``: list of (room, procedure, surgeon) or (room, procedure, surgeon, n_views)."""
    label_set = make_label_set(label_names) if label_names else make_label_set()
    case_objs, videos = [], []
    for i, spec in enumerate(cases):
        room, proc, surgeon = spec[:3]
        n_views = spec[3] if len(spec) > 3 else views
        cid = f"c{i:04d}"
        vids = [f"{cid}_v{j}" for j in range(n_views)]
        case_objs.append(CaseManifest(cid, room, proc, surgeon, vids))
        for vid in vids:
            videos.append(VideoRecord(vid, cid, frames, segments=[ActivitySegment(0, 0, frames)]))
    return DatasetManifest(label_set, case_objs, videos)


def random_manifest(rng, max_cases=30):
    n_cases = int(rng.integers(4, max_cases + 1))
    rooms = [f"OR{k}" for k in range(1, int(rng.integers(2, 4)) + 1)]
    procs = [f"proc{k:02d}" for k in range(int(rng.integers(2, 8)))]
    surgeons = [f"S{k}" for k in range(int(rng.integers(2, 7)))]
    cases = []
    for i in range(n_cases):
        # first cases cover every value so each scheme has >= 2 groups
        cases.append((
            rooms[i % len(rooms)] if i < len(rooms) else rooms[int(rng.integers(len(rooms)))],
            procs[i % len(procs)] if i < len(procs) else procs[int(rng.integers(len(procs)))],
            surgeons[i % len(surgeons)] if i < len(surgeons) else surgeons[int(rng.integers(len(surgeons)))],
            int(rng.integers(1, 5)),
        ))
    return build_manifest(cases)


def synthetic_videos(n_cases, seed=0, views=1, **profile_kw):
    """``[(features, clip_labels), ...]`` from the default profile, one entry per video."""
    profile = default_profile(**profile_kw)
    ds = generate_dataset(profile, n_cases, views=views, seed=seed)
    return [(ds.features[v.video_id].features, np.asarray(clip_labels_for_video(v, profile.clip_len)))
            for v in ds.manifest.videos]


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one pass/fail line per acceptance criterion, printed after the run

_ACCEPTANCE: dict[int, tuple[str, bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when not in ("setup", "call"):
        return
    number, title = marker.args
    ok = report.passed
    if report.when == "setup" and ok:
        return
    prev = _ACCEPTANCE.get(number, (title, True))
    _ACCEPTANCE[number] = (title, prev[1] and ok)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, ok = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}")
