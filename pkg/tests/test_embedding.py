import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from openess.embedding import (EmbeddingFormatError, FeatureMap, TextEmbeddingSet,
                               average_prompt_embeddings, dump_feature_map, dump_text_embeddings,
                               load_feature_map, load_text_embeddings, parse_feature_map,
                               parse_text_embeddings, random_text_embeddings, synth_features,
                               write_feature_map, write_text_embeddings)
from openess.labelmap import (IGNORE, LabelFormatError, check_labels, dump_labels,
                              labels_to_gray, parse_labels, read_labels, read_pgm,
                              similarity_to_gray, write_labels, write_pgm)


def fmap_bytes(d, h, w, values):
    return struct.pack("<5sIII", b"FMAP1", d, h, w) + np.asarray(values, "<f4").tobytes()


# -------------------------------------------------------------------------- feature maps


def test_feature_map_layout_is_channel_major():
    fm = parse_feature_map(fmap_bytes(2, 1, 3, [0, 1, 2, 10, 11, 12]))
    assert fm.shape == (2, 1, 3)
    assert fm.pixels().tolist() == [[0, 10], [1, 11], [2, 12]]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 6), st.integers(1, 6), st.integers(0, 1000))
def test_feature_map_round_trip(d, h, w, seed):
    v = np.random.default_rng(seed).standard_normal((d, h, w)).astype(np.float32)
    fm = parse_feature_map(dump_feature_map(FeatureMap(v)))
    assert np.array_equal(fm.values, v.astype(np.float64))


def test_feature_map_file_round_trip(tmp_path):
    fm = FeatureMap(np.arange(12, dtype=float).reshape(3, 2, 2))
    write_feature_map(tmp_path / "a.fmap", fm)
    assert np.array_equal(load_feature_map(tmp_path / "a.fmap").values, fm.values)


@pytest.mark.parametrize("data,msg", [
    (b"FMAP", "malformed"),
    (b"FMAP2" + bytes(12), "malformed"),
    (fmap_bytes(1, 2, 2, [0, 0, 0]), "truncated"),
    (fmap_bytes(1, 1, 2, [0, np.nan]), "non-finite"),
    (fmap_bytes(1, 1, 2, [np.inf, 0]), "non-finite"),
])
def test_feature_map_errors(data, msg):
    with pytest.raises(EmbeddingFormatError, match=msg):
        parse_feature_map(data)


def test_non_finite_allowed_when_lenient():
    fm = parse_feature_map(fmap_bytes(1, 1, 2, [np.nan, 1]), strict=False)
    assert np.isnan(fm.values[0, 0, 0])


def test_zero_channels_rejected():
    with pytest.raises(ValueError):
        parse_feature_map(fmap_bytes(0, 2, 2, []))


# ------------------------------------------------------------------------- text vectors


def test_text_embedding_round_trip(tmp_path):
    t = random_text_embeddings(["background", "car", "people"], 16, seed=3)
    write_text_embeddings(tmp_path / "t.temb", t)
    back = load_text_embeddings(tmp_path / "t.temb")
    assert back.names == t.names
    assert np.allclose(back.vectors, t.vectors, atol=1e-6)
    assert np.allclose(np.linalg.norm(back.vectors, axis=1), 1.0, atol=1e-12)
    assert back.index("car") == 1


def test_random_text_embeddings_orthonormal():
    t = random_text_embeddings([str(i) for i in range(6)], 8, seed=1)
    assert np.allclose(t.vectors @ t.vectors.T, np.eye(6), atol=1e-12)
    with pytest.raises(ValueError):
        random_text_embeddings(["a", "b", "c"], 2)


def test_text_embedding_validation():
    with pytest.raises(ValueError, match="unit norm"):
        TextEmbeddingSet(["a"], np.array([[2.0, 0.0]]))
    with pytest.raises(ValueError, match="unique"):
        TextEmbeddingSet(["a", "a"], np.eye(2))
    with pytest.raises(ValueError):
        TextEmbeddingSet(["a"], np.eye(2))


def test_text_embedding_truncated():
    data = dump_text_embeddings(random_text_embeddings(["a", "b"], 4))
    with pytest.raises(EmbeddingFormatError, match="truncated"):
        parse_text_embeddings(data[:-1])
    with pytest.raises(EmbeddingFormatError, match="malformed"):
        parse_text_embeddings(b"TEMB0" + data[5:])


def test_prompt_averaging_matches_hand_computation():
    s = 1 / np.sqrt(2)
    t = average_prompt_embeddings([("car", [1.0, 0.0]), ("road", [0.0, 1.0]), ("car", [0.0, 1.0])])
    assert t.names == ["car", "road"]
    assert np.allclose(t.vectors, [[s, s], [0.0, 1.0]])


def test_prompt_averaging_errors():
    with pytest.raises(ValueError, match="degenerate"):
        average_prompt_embeddings([("a", [1.0, 0.0]), ("a", [-1.0, 0.0])])
    with pytest.raises(ValueError):
        average_prompt_embeddings([])
    with pytest.raises(ValueError):
        average_prompt_embeddings([("a", [1.0, 0.0]), ("b", [1.0, 0.0, 0.0])])


def test_synth_features_without_noise_are_anchors():
    anchors = random_text_embeddings(["a", "b"], 4, seed=0)
    lab = np.array([[0, 1], [IGNORE, 1]], dtype=np.uint8)
    fm = synth_features(lab, 4, 0.0, seed=0, anchors=anchors)
    px = fm.pixels()
    assert np.allclose(px[0], anchors.vectors[0])
    assert np.allclose(px[1], anchors.vectors[1]) and np.allclose(px[3], anchors.vectors[1])
    assert np.all(px[2] == 0)


def test_synth_features_noise_level():
    lab = np.zeros((64, 64), dtype=np.uint8)
    fm = synth_features(lab, 8, 0.5, seed=2)
    resid = fm.pixels() - fm.pixels().mean(0)
    assert abs(resid.std() - 0.5) < 0.02


def test_synth_features_rejects_unknown_class():
    anchors = random_text_embeddings(["a"], 4)
    with pytest.raises(ValueError):
        synth_features(np.array([[1]], dtype=np.uint8), 4, 0.0, 0, anchors)


# ----------------------------------------------------------------------- label maps


def test_label_round_trip(tmp_path):
    lab = np.array([[0, 1, 255], [2, 2, 0]], dtype=np.uint8)
    write_labels(tmp_path / "a.lbl", lab)
    assert np.array_equal(read_labels(tmp_path / "a.lbl"), lab)
    assert parse_labels(dump_labels(lab)).shape == (2, 3)


def test_label_errors():
    with pytest.raises(LabelFormatError, match="truncated"):
        parse_labels(dump_labels(np.zeros((2, 2), np.uint8))[:-1])
    with pytest.raises(LabelFormatError, match="malformed"):
        parse_labels(b"LBL")
    with pytest.raises(ValueError):
        check_labels(np.array([[3]]), 3)
    check_labels(np.array([[2, 255]]), 3)


def test_pgm_round_trip(tmp_path):
    img = np.array([[0, 127.6, 300], [-4, 12, 255]])
    write_pgm(tmp_path / "a.pgm", img)
    assert read_pgm(tmp_path / "a.pgm").tolist() == [[0, 128, 255], [0, 12, 255]]


def test_pgm_with_comment(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# hi\n2 1\n255\n\x05\x06")
    assert read_pgm(tmp_path / "c.pgm").tolist() == [[5, 6]]


def test_gray_mappings():
    assert similarity_to_gray(np.array([-1.0, 0.0, 1.0, 2.0])).tolist() == [0, 127.5, 255, 255]
    g = labels_to_gray(np.array([[0, 1, 255]]), 2)
    assert g.tolist() == [[127.5, 255, 0]]


def test_feature_map_single_pixel_values():
    fm = parse_feature_map(fmap_bytes(2, 1, 1, [0.5, -0.5]))
    assert fm.values[:, 0, 0].tolist() == [0.5, -0.5]


def test_feature_map_empty_payload_rejected():
    with pytest.raises(EmbeddingFormatError):
        parse_feature_map(fmap_bytes(2, 1, 1, []))


def test_identical_prompts_are_idempotent():
    v = np.array([0.6, 0.8])
    t = average_prompt_embeddings([("a", v), ("a", v)])
    assert np.allclose(t.vectors[0], v, atol=1e-15)


def test_synth_features_deterministic():
    lab = np.random.default_rng(0).integers(0, 3, (10, 10)).astype(np.uint8)
    a = synth_features(lab, 8, 0.3, seed=4)
    b = synth_features(lab, 8, 0.3, seed=4)
    assert np.array_equal(a.values, b.values)


def test_synth_feature_class_means_converge_to_anchors():
    anchors = random_text_embeddings(["a", "b"], 16, seed=2)
    lab = np.zeros((40, 60), np.uint8)
    lab[:, 30:] = 1  # 1200 pixels per class
    fm = synth_features(lab, 16, 0.1, seed=3, anchors=anchors)
    px = fm.pixels()
    for z in range(2):
        mean = px[lab.ravel() == z].mean(0)
        assert np.max(np.abs(mean - anchors.vectors[z])) < 1e-2
