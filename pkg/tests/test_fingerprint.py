import numpy as np
import pytest

from oracles import naive_silhouette
from perturbscope.detection import OracleReconstructor, PairedDiffReconstructor, detect
from perturbscope.errors import MissingStageError, UndefinedScoreError
from perturbscope.fingerprint import (DIMS, Fingerprint, build_fingerprint, cluster_quality, distance_matrix,
                                      project_2d, resample_profile, silhouette, write_fingerprints_csv, zscore)
from perturbscope.imaging import PairedSample, load_png, to_grayscale, u8_to_f32
from perturbscope.pipeline import bundled_samples
from perturbscope.spectral import fft_log_magnitude, fingerprint_pair


def fps_from(points, bases=None, labels=None):
    n = len(points)
    bases = bases or ["b"] * n
    labels = labels or ["l"] * n
    return [Fingerprint(np.asarray(p, dtype=float), b, l, str(i))
            for i, (p, b, l) in enumerate(zip(points, bases, labels))]


def test_clean_fingerprint_layout(rng):
    spec = fft_log_magnitude(rng.random((16, 16)))
    fp = build_fingerprint(spec, base_image_id="a", protection_label="clean")
    assert fp.vector.shape == (DIMS,) == (132,)
    assert not fp.vector[64:].any()


def test_pair_fingerprint_and_determinism(rng):
    clean = rng.random((16, 16, 3))
    pert = np.clip(clean + rng.normal(0, 0.02, clean.shape), 0, 1)
    pair = PairedSample(clean, pert)
    det = detect(pert, PairedDiffReconstructor(), 0.07, clean)
    a = build_fingerprint(fingerprint_pair(pair), det, base_image_id="a", protection_label="x")
    b = build_fingerprint(fingerprint_pair(pair), det, base_image_id="a", protection_label="x")
    assert a.vector.tobytes() == b.vector.tobytes()
    assert a.vector[128] == det.entropy
    assert a.vector[64:128].any()


def test_missing_stages_named(rng):
    pair = PairedSample(rng.random((8, 8)), rng.random((8, 8)))
    with pytest.raises(MissingStageError) as info:
        build_fingerprint(fingerprint_pair(pair), None, base_image_id="a", protection_label="x")
    assert info.value.stage == "detection"
    with pytest.raises(MissingStageError) as info:
        build_fingerprint(None, base_image_id="a", protection_label="x")
    assert info.value.stage == "spectral"


def test_rotation_keeps_radial_blocks():
    img = u8_to_f32(load_png(bundled_samples()[2]))
    rot = np.rot90(img).copy()
    a = build_fingerprint(fft_log_magnitude(to_grayscale(img)), base_image_id="a", protection_label="c")
    b = build_fingerprint(fft_log_magnitude(to_grayscale(rot)), base_image_id="a", protection_label="c")
    np.testing.assert_allclose(a.vector[:64], b.vector[:64], atol=1e-3)


def test_resample_profile_endpoints():
    v = np.array([3.0, 1.0, 2.0])
    out = resample_profile(v, 5)
    assert out[0] == 3.0 and out[-1] == 2.0 and out[2] == 1.0
    assert np.all(resample_profile(np.array([4.0])) == 4.0)


def test_zscore_drops_constant_dims():
    x = np.array([[1.0, 5.0, 0.0], [3.0, 5.0, 1.0]])
    z = zscore(x)
    assert z.shape == (2, 2)
    np.testing.assert_allclose(z.std(axis=0), 1.0)


def test_distance_matrix_properties(rng):
    pts = rng.random((5, 4))
    pts[3] = pts[1]
    d = distance_matrix(fps_from(pts))
    assert np.array_equal(d, d.T)
    assert d[1, 3] == 0.0
    line = fps_from([[0.0, 0.0], [1.0, 2.0], [3.0, 6.0]])
    d = distance_matrix(line)
    assert d[0, 2] == pytest.approx(d[0, 1] + d[1, 2], rel=1e-12)


def test_pca_recovers_rank_two_geometry(rng):
    flat = rng.normal(size=(12, 2)) * [3.0, 1.0]
    basis = np.linalg.qr(rng.normal(size=(132, 2)))[0]
    pts = flat @ basis.T + 7.0
    fps = fps_from(pts)
    emb = project_2d(fps)
    assert not emb.degenerate
    # z-scoring rescales axes, so compare against distances in the z-scored space
    z = zscore(pts)
    d_ref = np.linalg.norm(z[:, None] - z[None], axis=2)
    d_emb = np.linalg.norm(emb.points[:, None] - emb.points[None], axis=2)
    np.testing.assert_allclose(d_emb, d_ref, atol=1e-6)
    assert emb.points.tobytes() == project_2d(fps).points.tobytes()


def test_pca_identical_inputs_at_origin():
    emb = project_2d(fps_from([np.ones(132)] * 4))
    assert emb.degenerate and not emb.points.any()


def test_pca_rank_one_flags_degenerate():
    emb = project_2d(fps_from([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]))
    assert emb.degenerate
    assert not emb.points[:, 1].any()


def test_silhouette_matches_naive(rng):
    pts = rng.normal(size=(14, 3))
    labels = list("aaaabbbbbcccdd")
    d = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    assert silhouette(d, labels) == pytest.approx(naive_silhouette(pts, labels), abs=1e-12)


def test_silhouette_separated_blobs(rng):
    pts = np.vstack([rng.normal(0, 0.1, (10, 4)), rng.normal(20, 0.1, (10, 4))])
    fps = fps_from(pts, bases=["x"] * 10 + ["y"] * 10)
    assert cluster_quality(fps, "base") > 0.9


def test_silhouette_random_labels_near_zero(rng):
    scores = []
    for _ in range(10):
        pts = rng.normal(size=(40, 5))
        labels = list(rng.permutation(["p"] * 20 + ["q"] * 20))
        scores.append(cluster_quality(fps_from(pts, labels=labels), "label"))
    assert abs(np.mean(scores)) < 0.2


def test_silhouette_perfect_duplicates_is_one():
    pts = [[0.0, 0.0]] * 3 + [[5.0, 1.0]] * 3
    assert cluster_quality(fps_from(pts, labels=list("aaabbb")), "label") == 1.0


def test_silhouette_undefined_cases():
    d = np.zeros((3, 3))
    with pytest.raises(UndefinedScoreError):
        silhouette(d, ["a", "b", "c"])
    with pytest.raises(UndefinedScoreError):
        silhouette(d, ["a", "a", "a"])
    with pytest.raises(ValueError):
        cluster_quality(fps_from(np.eye(3)), "colour")


def test_fingerprint_csv(tmp_path, rng):
    fps = fps_from(rng.random((4, 132)), bases=list("aabb"), labels=list("xyxy"))
    write_fingerprints_csv(fps, tmp_path / "f.csv", project_2d(fps))
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert len(lines) == 5
    assert lines[0].split(",")[:5] == ["sample_id", "base_image_id", "protection_label", "pc1", "pc2"]
    assert len(lines[1].split(",")) == 5 + 132


def test_oracle_fingerprint_from_delta(rng):
    clean = rng.random((8, 8))
    d = rng.normal(0, 0.01, (8, 8))
    res = detect(clean + d, OracleReconstructor(d), 0.07)
    fp = build_fingerprint(fingerprint_pair(PairedSample(clean, clean + d)), res,
                           base_image_id="a", protection_label="x")
    assert fp.vector[129] == pytest.approx(d.mean())
    assert fp.vector[130] == pytest.approx(d.std())
