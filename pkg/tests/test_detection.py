import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import ref_echo_plane
from perturbscope.detection import (DetectionResult, DetectionRow, ExternalReconstructor, HighPassReconstructor,
                                    OracleReconstructor, PairedDiffReconstructor, PerturbationMap, batch_detect,
                                    detect, make_reconstructor, psnr, purify, shannon_entropy, subtract,
                                    summarize, write_summary_csv)
from perturbscope.errors import AdapterError
from perturbscope.imaging import u8_to_f32
from perturbscope.synthesis import grid

finite = st.floats(-10, 10, allow_nan=False)




def test_entropy_examples():
    assert shannon_entropy(np.full((4, 4), 0.3)) == 0.0
    two = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert shannon_entropy(two) == 1.0
    full = np.arange(256, dtype=np.float64).reshape(16, 16)
    assert shannon_entropy(full) == 8.0
    with pytest.raises(ValueError):
        shannon_entropy(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        shannon_entropy(two, bins=1)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=finite),
       st.integers(0, 2**32 - 1))
def test_entropy_bounds_and_invariances(plane, seed):
    h = shannon_entropy(plane)
    assert 0.0 <= h <= 8.0
    perm = np.random.default_rng(seed).permutation(plane.ravel()).reshape(plane.shape)
    assert shannon_entropy(perm) == h
    assert shannon_entropy(-plane) == h


def test_multichannel_reduced_by_channel_mean(rng):
    d = rng.normal(size=(5, 5, 3))
    assert shannon_entropy(PerturbationMap(d)) == shannon_entropy(d.mean(axis=2))


def test_perturbation_map_rejects_non_finite():
    with pytest.raises(ValueError):
        PerturbationMap(np.array([[np.nan]]))


def test_threshold_comparison():
    flat = OracleReconstructor(np.zeros((4, 4)))
    img = np.zeros((4, 4))
    res = detect(img, flat, 0.07)
    assert res.entropy == 0.0 and not res.detected
    r = DetectionResult(0.05, 0.07, 0.05 > 0.07, "x")
    assert not r.detected
    assert DetectionResult(1.271, 0.07, 1.271 > 0.07, "x").detected


def test_detected_iff_above_threshold(rng):
    img = rng.random((8, 8, 3))
    clean = rng.random((8, 8, 3))
    res = detect(img, PairedDiffReconstructor(), 0.07, clean)
    assert res.detected == (res.entropy > res.threshold)
    assert res.reconstructor_id == "paired"
    assert res.delta_hat is not None


def test_paired_purify_is_exact(rng):
    for _ in range(20):
        clean = rng.random((6, 7, 3)).astype(np.float32).astype(np.float64)
        pert = rng.random((6, 7, 3)).astype(np.float32).astype(np.float64)
        out = purify(pert, PairedDiffReconstructor(), clean, clip_output=False)
        assert np.array_equal(out, clean)


def test_zero_delta_purify_identity(rng):
    x = rng.random((5, 5, 3))
    assert np.array_equal(purify(x, OracleReconstructor(np.zeros((5, 5)))), x)


def test_purify_plus_delta_recovers_input_where_unclipped(rng):
    x = rng.random((8, 8, 3))
    d = rng.normal(0, 0.1, (8, 8))
    rec = OracleReconstructor(d)
    out = purify(x, rec)
    free = (x - d[..., None] >= 0) & (x - d[..., None] <= 1)
    assert np.allclose((out + d[..., None])[free], x[free], rtol=0, atol=1e-15)


def test_subtract_accepts_u8_and_checks_shape():
    x = np.full((2, 2, 3), 255, dtype=np.uint8)
    out = subtract(x, PerturbationMap(np.full((2, 2), 0.5)))
    assert np.allclose(out, 0.5)
    with pytest.raises(ValueError):
        subtract(x, PerturbationMap(np.zeros((3, 2))))


def test_oracle_shape_check():
    with pytest.raises(ValueError):
        OracleReconstructor(np.zeros((3, 3))).reconstruct(np.zeros((4, 4)))


def test_paired_needs_reference(rng):
    with pytest.raises(ValueError):
        PairedDiffReconstructor().reconstruct(rng.random((3, 3)))


def test_highpass_flat_image_gives_zero():
    res = HighPassReconstructor().reconstruct(np.full((9, 9, 3), 0.4))
    assert not res.delta.any()


def test_highpass_finds_impulse():
    img = np.zeros((9, 9))
    img[4, 4] = 1.0
    d = HighPassReconstructor().reconstruct(img).delta
    assert d[4, 4] == 1.0 and np.count_nonzero(d) == 1


def test_make_reconstructor():
    assert make_reconstructor("paired").id == "paired"
    assert make_reconstructor("highpass").id == "highpass"
    assert isinstance(make_reconstructor("external:foo --bar"), ExternalReconstructor)
    with pytest.raises(ValueError):
        make_reconstructor("oracle")
    with pytest.raises(ValueError):
        make_reconstructor("neural")


def test_psnr():
    a = np.zeros((4, 4))
    assert psnr(a, a) == float("inf")
    assert psnr(a, a + 0.1) == pytest.approx(20.0)


# --- external adapter ------------------------------------------------------


def test_external_echo_roundtrip(stub_dir, rng):
    img = rng.random((5, 6, 3))
    rec = ExternalReconstructor(stub_dir["echo"])
    res = detect(img, rec, 0.07)
    expected = ref_echo_plane(5, 6).astype(np.float64)
    assert np.array_equal(res.delta_hat.delta, expected)
    assert res.entropy == shannon_entropy(expected)
    out = purify(img, rec, clip_output=False)
    assert np.array_equal(out, img - expected[..., None])


@pytest.mark.parametrize("name, pattern", [
    ("truncated", "PMAP"),
    ("badmagic", "magic"),
    ("wrongsize", r"\(3, 3\)"),
    ("nan", "non-finite"),
    ("fail", "exit"),
    ("silent", "no PMAP"),
])
def test_external_protocol_violations(stub_dir, rng, name, pattern):
    rec = ExternalReconstructor(stub_dir[name])
    with pytest.raises(AdapterError, match=pattern):
        detect(rng.random((4, 4, 3)), rec, 0.07)


def test_external_failure_keeps_diagnostics(stub_dir):
    with pytest.raises(AdapterError) as info:
        ExternalReconstructor(stub_dir["fail"]).reconstruct(np.zeros((4, 4)))
    assert info.value.returncode == 3
    assert "weights" in info.value.stderr


def test_external_timeout(stub_dir):
    with pytest.raises(AdapterError, match="timed out"):
        ExternalReconstructor(stub_dir["sleep"], timeout=0.5).reconstruct(np.zeros((4, 4)))


def test_external_missing_command():
    with pytest.raises(AdapterError):
        ExternalReconstructor("/nonexistent/reconstructor").reconstruct(np.zeros((4, 4)))


# --- batch -----------------------------------------------------------------


def test_batch_detect_grid_layout(tmp_path, rng):
    base = rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
    res = grid(base, tmp_path, seed=1)
    out = batch_detect(res.rows, "oracle", 0.07, root=tmp_path)
    assert len(out.rows) == 288
    kinds = [s.group_kind for s in out.summary]
    assert kinds.count("mask") == 6 and kinds.count("noise") == 6 and kinds.count("lightness") == 8
    write_summary_csv(out.summary, tmp_path / "a.csv")
    again = batch_detect(res.rows, "oracle", 0.07, root=tmp_path)
    write_summary_csv(again.summary, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header == "group_kind,group_value,n,mean_entropy_bits,detect_rate_pct"


def test_batch_detect_missing_rows_flagged(tmp_path, rng):
    base = rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
    res = grid(base, tmp_path, ["uniform"], ["gauss"], [0.1, 0.2], seed=1)
    (tmp_path / res.rows[0].image_path).unlink()
    out = batch_detect(res.rows, "oracle", 0.07, root=tmp_path)
    assert out.missing == [res.rows[0].image_path]
    assert out.summary[-1].group_kind == "missing"


def test_all_clean_rate_zero(tmp_path):
    base = np.full((16, 16, 3), 90, dtype=np.uint8)
    rows = [DetectionRow(f"c{i}", {"label": "clean"}, 0.0, False) for i in range(4)]
    s = summarize(rows, ["label"])
    assert s[0].detect_rate_pct == 0.0
    res = detect(u8_to_f32(base), OracleReconstructor(np.zeros((16, 16))), 1e-9)
    assert not res.detected


def test_reconstructors_accept_u8(rng):
    clean = rng.integers(0, 200, size=(6, 6, 3), dtype=np.uint8)
    pert = clean + 7
    d = PairedDiffReconstructor().reconstruct(pert, clean).delta
    assert np.allclose(d, 7 / 255)
    assert np.array_equal(purify(pert, PairedDiffReconstructor(), clean), u8_to_f32(clean))
    hp = HighPassReconstructor().reconstruct(pert).delta
    assert np.abs(hp).max() <= 1.0
