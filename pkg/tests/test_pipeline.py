import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cloakbench.pipeline import (
    DetectGate,
    JpegRoundtrip,
    QuantizeU8,
    ResizeTo,
    apply_chain,
    detect_gate,
    export_dataset,
    ingest_directory,
    jpeg_roundtrip,
    load_png,
    quantize_u8,
    resize,
    save_png,
    split,
    synth_dataset,
)

rng = np.random.default_rng(55)


# --- synthetic data ---------------------------------------------------------


def test_synth_is_deterministic():
    a = synth_dataset(3, 4, 16, seed=11)
    b = synth_dataset(3, 4, 16, seed=11)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.identities == b.identities
    c = synth_dataset(3, 4, 16, seed=12)
    assert a.images.tobytes() != c.images.tobytes()


def test_synth_range_and_shape():
    ds = synth_dataset(3, 5, 16, seed=2)
    assert ds.images.shape == (15, 16, 16, 3)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 255.0
    assert ds.num_classes == 3


def test_synth_rejects_degenerate():
    with pytest.raises(ValueError):
        synth_dataset(1, 4, 16, seed=0)
    with pytest.raises(ValueError):
        synth_dataset(3, 0, 16, seed=0)


def test_split_single_image_class_fails():
    ds = synth_dataset(3, 1, 16, seed=3)
    with pytest.raises(ValueError, match="cannot populate"):
        split(ds, 0.5, seed=0)


def test_split_is_deterministic_stratified_disjoint():
    ds = synth_dataset(4, 10, 16, seed=4)
    s1 = split(ds, 0.7, seed=9)
    s2 = split(ds, 0.7, seed=9)
    assert (s1.split == s2.split).all()
    for cls in range(4):
        n_train = int(((s1.labels == cls) & (s1.split == "train")).sum())
        assert abs(n_train - 7) <= 1
        assert 1 <= n_train <= 9
    assert set(s1.train_indices())

    assert not set(s1.train_indices()) & set(s1.eval_indices())
    assert len(s1.train_indices()) + len(s1.eval_indices()) == len(ds.labels)


# --- quantize ---------------------------------------------------------------


def test_quantize_rounds_half_away():
    np.testing.assert_array_equal(
        quantize_u8(np.array([[[100.5, 0.4, 254.5]]], np.float32)),
        np.array([[[101.0, 0.0, 255.0]]], np.float32),
    )


def test_quantize_clamps():
    np.testing.assert_array_equal(
        quantize_u8(np.array([-3.0, 300.0], np.float32)), [0.0, 255.0]
    )


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, (2, 2, 3), elements=st.floats(0, 255, width=32)))
def test_quantize_idempotent_and_close(img):
    q = quantize_u8(img)
    np.testing.assert_array_equal(quantize_u8(q), q)
    assert np.abs(q - img).max() <= 0.5


# --- jpeg -------------------------------------------------------------------


def test_jpeg_quality_100_flat_image():
    flat = np.full((32, 32, 3), 128.0, np.float32)
    out = jpeg_roundtrip(flat, 100)
    assert np.abs(out - flat).max() <= 2.0


def test_jpeg_preserves_dimensions():
    for side in (17, 32, 48):
        img = rng.uniform(0, 255, (side, side, 3)).astype(np.float32)
        assert jpeg_roundtrip(img, 75).shape == img.shape


def test_jpeg_is_deterministic():
    img = rng.uniform(0, 255, (24, 24, 3)).astype(np.float32)
    assert jpeg_roundtrip(img, 80).tobytes() == jpeg_roundtrip(img, 80).tobytes()


def test_jpeg_degradation_monotone_in_quality():
    # codec-oracle check on a fixed textured image: lower quality never
    # reduces the mean absolute deviation (small slack for codec wobble)
    img = synth_dataset(2, 1, 32, seed=21).images[0]
    mads = []
    for q in (95, 75, 50, 25):
        mads.append(float(np.abs(jpeg_roundtrip(img, q) - quantize_u8(img)).mean()))
    for lo_q, hi_q in zip(mads, mads[1:]):
        assert hi_q >= lo_q - 1e-6


def test_jpeg_rejects_bad_quality():
    img = np.zeros((8, 8, 3), np.float32)
    for q in (0, 101, -5):
        with pytest.raises(ValueError):
            jpeg_roundtrip(img, q)


# --- resize -----------------------------------------------------------------


def test_resize_identity_is_exact():
    img = rng.uniform(0, 255, (20, 20, 3)).astype(np.float32)
    np.testing.assert_array_equal(resize(img, 20), img)


def test_resize_constant_stays_constant():
    img = np.full((10, 10, 3), 77.25, np.float32)
    for side in (3, 7, 16, 33):
        out = resize(img, side)
        assert out.shape == (side, side, 3)
        np.testing.assert_allclose(out, 77.25, atol=1e-4)


def test_resize_checkerboard_hand_oracle():
    cb = np.zeros((2, 2, 3), np.float32)
    cb[0, 1] = cb[1, 0] = 255.0
    out = resize(cb, 3)
    expected = np.array(
        [[0.0, 127.5, 255.0], [127.5, 127.5, 127.5], [255.0, 127.5, 0.0]], np.float32
    )
    for c in range(3):
        np.testing.assert_allclose(out[:, :, c], expected, atol=1e-4)


def test_resize_rejects_degenerate_target():
    with pytest.raises(ValueError):
        resize(np.zeros((4, 4, 3), np.float32), 0)


def test_resize_stays_in_range():
    img = rng.uniform(0, 255, (16, 16, 3)).astype(np.float32)
    out = resize(img, 48)
    assert out.min() >= 0.0 and out.max() <= 255.0


# --- detection gate ---------------------------------------------------------


def test_gate_default_passes_everything():
    assert detect_gate(np.zeros((4, 4, 3), np.float32)) == (True, None)


def test_gate_custom_threshold_detector():
    detector = lambda img: float(img.mean()) > 100.0
    ok, _ = detect_gate(np.full((4, 4, 3), 200.0, np.float32), detector)
    bad, reason = detect_gate(np.full((4, 4, 3), 10.0, np.float32), detector)
    assert ok and not bad and reason == "rejected by detector"


def test_gate_detector_error_becomes_failure():
    def broken(img):
        raise RuntimeError("boom")

    ok, reason = detect_gate(np.zeros((4, 4, 3), np.float32), broken)
    assert not ok and "boom" in reason


# --- chains -----------------------------------------------------------------


def test_empty_chain_is_identity():
    img = rng.uniform(0, 255, (8, 8, 3)).astype(np.float32)
    result = apply_chain(img, ())
    np.testing.assert_array_equal(result.image, img)
    assert result.passed and result.storage_delta == 0.0


def test_chain_order_and_storage_delta():
    img = rng.uniform(0, 255, (16, 16, 3)).astype(np.float32)
    result = apply_chain(
        img, (QuantizeU8(), JpegRoundtrip(75), ResizeTo(8), DetectGate(None))
    )
    assert result.image.shape == (8, 8, 3)
    assert result.passed
    # delta is measured against the input right before the resize step
    stored = jpeg_roundtrip(quantize_u8(img), 75)
    assert result.storage_delta == pytest.approx(float(np.abs(stored - img).max()))


def test_chain_gate_failure_reported():
    result = apply_chain(
        np.zeros((4, 4, 3), np.float32), (DetectGate(lambda img: False),)
    )
    assert not result.passed and result.fail_reason


# --- png import/export ------------------------------------------------------


def test_png_round_trip_exact_for_quantized(tmp_path):
    img = quantize_u8(rng.uniform(0, 255, (16, 16, 3)).astype(np.float32))
    save_png(img, tmp_path / "x.png")
    np.testing.assert_array_equal(load_png(tmp_path / "x.png"), img)


def test_ingest_directory_sorted_labels(tmp_path):
    ds = synth_dataset(2, 3, 16, seed=13)
    root = tmp_path / "tree"
    for i, img in enumerate(ds.images):
        name = "bob" if ds.labels[i] else "alice"
        save_png(img, root / name / f"{i:03d}.png")
    loaded = ingest_directory(root)
    assert loaded.identities == ["alice", "bob"]
    assert loaded.images.shape[0] == 6
    again = ingest_directory(root)
    assert loaded.images.tobytes() == again.images.tobytes()
    assert (loaded.labels == again.labels).all()


def test_ingest_empty_directory_fails(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(ValueError, match="no identity"):
        ingest_directory(tmp_path / "empty")


def test_ingest_skips_unreadable_with_warning(tmp_path):
    root = tmp_path / "tree"
    save_png(np.zeros((8, 8, 3), np.float32), root / "a" / "good.png")
    (root / "a" / "bad.png").write_bytes(b"not a png at all")
    ds = ingest_directory(root)
    assert len(ds.labels) == 1
    assert any("bad.png" in w for w in ds.provenance["warnings"])


def test_ingest_rejects_mixed_sizes(tmp_path):
    root = tmp_path / "tree"
    save_png(np.zeros((8, 8, 3), np.float32), root / "a" / "one.png")
    save_png(np.zeros((9, 9, 3), np.float32), root / "a" / "two.png")
    with pytest.raises(ValueError, match="shape"):
        ingest_directory(root)


def test_export_then_ingest_round_trip(tmp_path):
    ds = synth_dataset(3, 2, 16, seed=17)
    export_dataset(ds, tmp_path / "out")
    loaded = ingest_directory(tmp_path / "out")
    assert loaded.identities == ds.identities
    np.testing.assert_array_equal(
        loaded.images, np.stack([quantize_u8(im) for im in ds.images])
    )
