import struct

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from orflow.backbone import (FEATURE_MAGIC, FeatureFormatError, FeatureSequence, ToyBackbone, backbone_extractor,
                             extract_features, load_features, save_features, toy_backbone_forward)


def test_feature_roundtrip_bit_exact(tmp_path, rng):
    seq = FeatureSequence("vid_é", rng.standard_normal((50, 1024)), 16)
    path = save_features(seq, tmp_path / "a.orfeat")
    back = load_features(path)
    assert back.video_id == "vid_é" and back.clip_len == 16
    assert back.features.tobytes() == seq.features.tobytes()
    save_features(back, tmp_path / "b.orfeat")
    assert (tmp_path / "a.orfeat").read_bytes() == (tmp_path / "b.orfeat").read_bytes()


def test_feature_header_layout(tmp_path):
    payload = np.arange(80, dtype="<f4").tobytes()
    path = tmp_path / "h.orfeat"
    path.write_bytes(FEATURE_MAGIC + struct.pack("<II", 10, 8) + payload)
    seq = load_features(path)
    assert seq.features.shape == (10, 8)
    assert seq.features[1, 0] == 8.0


def test_feature_truncated(tmp_path):
    path = tmp_path / "t.orfeat"
    path.write_bytes(FEATURE_MAGIC + struct.pack("<II", 10, 8) + np.zeros(79, "<f4").tobytes())
    with pytest.raises(FeatureFormatError, match="truncated"):
        load_features(path)


def test_feature_bad_magic(tmp_path):
    path = tmp_path / "m.orfeat"
    path.write_bytes(b"NOTMAGIC" + struct.pack("<II", 1, 1) + b"\0\0\0\0")
    with pytest.raises(FeatureFormatError, match="magic"):
        load_features(path)


def test_feature_oversized_payload(tmp_path):
    path = tmp_path / "o.orfeat"
    path.write_bytes(FEATURE_MAGIC + struct.pack("<II", 2, 2) + np.zeros(5, "<f4").tobytes())
    with pytest.raises(FeatureFormatError, match="inconsistent"):
        load_features(path)


def fixed_dim_extractor(D):
    def extract(clips):
        flat = clips.reshape(len(clips), -1)
        return np.repeat(flat.mean(axis=1, keepdims=True), D, axis=1)
    extract.feature_dim = D
    return extract


def test_extract_shape():
    frames = np.zeros((1600, 4, 4, 1), dtype=np.float32)
    seq = extract_features(frames, fixed_dim_extractor(1024), 16, "v")
    assert seq.features.shape == (100, 1024)


def test_extract_dimension_mismatch():
    frames = np.zeros((32, 4, 4, 1), dtype=np.float32)
    with pytest.raises(ValueError, match="D=8"):
        extract_features(frames, fixed_dim_extractor(8), 16, feature_dim=16)


def small_backbone(**kw):
    torch.manual_seed(0)
    return ToyBackbone(num_classes=5, feature_dim=12, input_size=8, **kw).double()


def test_zero_frames_with_zeroed_final_stage_give_zero_features():
    model = small_backbone()
    last_conv = model.stages[-2]
    torch.nn.init.zeros_(last_conv.weight)
    torch.nn.init.zeros_(last_conv.bias)
    frames = np.zeros((64, 8, 8, 1))
    seq = extract_features(frames, backbone_extractor(model), 16)
    assert seq.features.shape == (4, 12)
    assert np.all(seq.features == 0.0)


def test_identical_clips_identical_rows(rng):
    model = small_backbone()
    clip = rng.uniform(-1, 1, (16, 8, 8, 1))
    other = rng.uniform(-1, 1, (16, 8, 8, 1))
    frames = np.concatenate([other] * 3 + [clip] + [other] * 3 + [clip])
    seq = extract_features(frames, backbone_extractor(model), 16)
    np.testing.assert_array_equal(seq.features[3], seq.features[7])


def test_forward_shapes_and_determinism(rng):
    model = small_backbone()
    clip = rng.uniform(-1, 1, (16, 8, 8, 1))
    feat, logits = toy_backbone_forward(clip, model)
    assert feat.shape == (12,) and logits.shape == (5,)
    feat2, logits2 = toy_backbone_forward(clip, model)
    np.testing.assert_array_equal(logits, logits2)


def test_permuting_head_rows_permutes_logits(rng):
    model = small_backbone()
    clip = rng.uniform(-1, 1, (16, 8, 8, 1))
    _, logits = toy_backbone_forward(clip, model)
    perm = torch.tensor([3, 0, 4, 1, 2])
    with torch.no_grad():
        model.head.weight.copy_(model.head.weight[perm])
        model.head.bias.copy_(model.head.bias[perm])
    _, permuted = toy_backbone_forward(clip, model)
    np.testing.assert_array_equal(permuted, logits[perm.numpy()])


def test_wrong_input_size(rng):
    with pytest.raises(ValueError, match="expects 8x8x1"):
        toy_backbone_forward(rng.uniform(-1, 1, (16, 9, 9, 1)), small_backbone())


def test_non_finite_activation_raises():
    model = small_backbone()
    clip = np.zeros((16, 8, 8, 1))
    clip[0, 0, 0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        toy_backbone_forward(clip, model)


def test_head_gradient_matches_central_differences(rng):
    model = small_backbone()
    clips = torch.as_tensor(rng.uniform(-1, 1, (3, 16, 8, 8, 1)))
    target = torch.tensor([1, 4, 0])

    def loss_value():
        with torch.no_grad():
            return F.cross_entropy(model(clips)[1], target).item()

    model.zero_grad()
    F.cross_entropy(model(clips)[1], target).backward()
    analytic = model.head.weight.grad.clone()
    h = 1e-5
    W = model.head.weight
    for i in range(W.shape[0]):
        for j in range(W.shape[1]):
            orig = W.data[i, j].item()
            W.data[i, j] = orig + h
            up = loss_value()
            W.data[i, j] = orig - h
            down = loss_value()
            W.data[i, j] = orig
            numeric = (up - down) / (2 * h)
            a = analytic[i, j].item()
            assert abs(a - numeric) <= 1e-4 * max(abs(a), abs(numeric), 1e-6)
