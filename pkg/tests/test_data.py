import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mbunmix import data as D


def _bundle(rng, h=5, w=4, bands=6, c=3):
    ab = rng.dirichlet(np.ones(c), size=(h, w)).astype(np.float32)
    cube = rng.random((h, w, bands)).astype(np.float32)
    return D.Bundle("scene", cube, ab, [f"m{i}" for i in range(c)])


def test_bundle_roundtrip_bit_exact(tmp_path, rng):
    b = _bundle(rng)
    tiny = np.float32(1e-45)  # smallest positive denormal
    b.cube[0, 0, :4] = [tiny, -tiny, 0.0, -0.0]
    b.cube[1, 1, 0] = np.float32(16777216.0)
    D.save_bundle(tmp_path / "b", b)
    back = D.load_bundle(tmp_path / "b")
    assert back.cube.tobytes() == b.cube.tobytes()
    assert back.abundances.tobytes() == b.abundances.tobytes()
    assert np.signbit(back.cube[0, 0, 3])
    assert back.endmember_names == b.endmember_names and back.name == "scene"


def test_bundle_layout_is_row_major_little_endian(tmp_path, rng):
    b = _bundle(rng)
    D.save_bundle(tmp_path / "b", b)
    raw = np.fromfile(tmp_path / "b" / "cube.f32", dtype="<f4")
    np.testing.assert_array_equal(raw, b.cube.reshape(-1))
    meta = json.loads((tmp_path / "b" / "metadata.json").read_text())
    assert (meta["height"], meta["width"], meta["bands"], meta["endmembers"]) == (5, 4, 6, 3)


def test_short_payload_is_rejected(tmp_path, rng):
    D.save_bundle(tmp_path / "b", _bundle(rng))
    path = tmp_path / "b" / "cube.f32"
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(D.BundleError, match="bytes"):
        D.load_bundle(tmp_path / "b")


def test_endmember_count_mismatch_is_rejected(tmp_path, rng):
    D.save_bundle(tmp_path / "b", _bundle(rng, c=3))
    meta_path = tmp_path / "b" / "metadata.json"
    meta = json.loads(meta_path.read_text())
    meta["endmembers"] = 4
    meta.pop("endmember_names")
    meta_path.write_text(json.dumps(meta))
    with pytest.raises(D.BundleError):
        D.load_bundle(tmp_path / "b")


def test_missing_and_non_finite(tmp_path, rng):
    with pytest.raises(D.BundleError):
        D.load_bundle(tmp_path / "nothing")
    b = _bundle(rng)
    b.cube[0, 0, 0] = np.nan
    D.save_bundle(tmp_path / "b", b)
    with pytest.raises(D.BundleError, match="non-finite"):
        D.load_bundle(tmp_path / "b")


def test_simplex_violation_only_warns(tmp_path, rng, caplog):
    b = _bundle(rng)
    b.abundances[0, 0] = [0.5, 0.5, 0.5]
    D.save_bundle(tmp_path / "b", b)
    with caplog.at_level(logging.WARNING):
        D.load_bundle(tmp_path / "b")
    assert "simplex" in caplog.text


def test_patch_single_pixel_and_interior(rng):
    cube = rng.random((6, 7, 4))
    np.testing.assert_array_equal(D.extract_patch(cube, 2, 3, 1)[0, 0], cube[2, 3])
    np.testing.assert_array_equal(D.extract_patch(cube, 2, 3, 3), cube[1:4, 2:5])


def test_corner_patch_replicates_edges(rng):
    cube = rng.random((4, 4, 2))
    patch = D.extract_patch(cube, 0, 0, 3)
    np.testing.assert_array_equal(patch[1:, 1:], cube[:2, :2])
    np.testing.assert_array_equal(patch[0, 1:], cube[0, :2])
    np.testing.assert_array_equal(patch[1:, 0], cube[:2, 0])
    np.testing.assert_array_equal(patch[0, 0], cube[0, 0])
    with pytest.raises(ValueError):
        D.extract_patch(cube, 0, 0, 2)


def test_batch_patches_agree_with_single(rng):
    cube = rng.random((5, 6, 3))
    idx = np.arange(30)
    batch = D.extract_patches(cube, idx, 5)
    assert batch.shape == (30, 5, 5, 3)
    for i in idx:
        np.testing.assert_array_equal(batch[i], D.extract_patch(cube, i // 6, i % 6, 5))


def test_samson_sizes():
    split = D.monte_carlo_split(95 * 95, 3025, folds=2, seed=1, pool_size=6000)
    assert len(split.folds[0].test) == 3025 and len(split.folds[0].pool) == 6000
    sizes = [len(D.subsample_training(split, 0, f)) for f in D.SUPPORTED_FRACTIONS[:-1]]
    assert sizes == [60, 360, 780, 1980, 3960]
    assert len(D.subsample_training(split, 0, 1.0)) == 6000


def test_split_determinism_and_fold_count():
    a = D.monte_carlo_split(500, 100, folds=30, seed=4)
    b = D.monte_carlo_split(500, 100, folds=30, seed=4)
    assert len(a) == 30
    for fa, fb in zip(a.folds, b.folds):
        np.testing.assert_array_equal(fa.test, fb.test)
        assert len(fa.test) == 100
    assert len({fa.test.tobytes() for fa in a.folds}) == 30


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(50, 400), folds=st.integers(1, 4))
def test_split_properties(seed, n, folds):
    split = D.monte_carlo_split(n, n // 3, folds=folds, seed=seed)
    for k, fold in enumerate(split.folds):
        assert not np.intersect1d(fold.test, fold.pool).size
        previous = None
        for frac in sorted(D.SUPPORTED_FRACTIONS):
            try:
                subset = D.subsample_training(split, k, frac, seed=seed)
            except ValueError:
                continue
            assert np.isin(subset, fold.pool).all()
            if previous is not None:
                assert np.isin(previous, subset).all()
            previous = subset


def test_infeasible_splits():
    with pytest.raises(ValueError):
        D.monte_carlo_split(10, 10)
    with pytest.raises(ValueError):
        D.monte_carlo_split(10, 5, pool_size=6)
    split = D.monte_carlo_split(40, 20, folds=1)
    with pytest.raises(ValueError):
        D.subsample_training(split, 0, 0.01)
    with pytest.raises(ValueError):
        D.subsample_training(split, 0, 0.5)


def test_noise_variance_definition():
    cube = np.full((10, 10, 5), 2.0)
    assert D.noise_variance(cube, 20) == pytest.approx(4.0 / 100)


def test_awgn_hits_target_snr():
    rng = np.random.default_rng(0)
    cube = rng.random((100, 100, 50)).astype(np.float32)
    for snr in (20, 30, 40, 50):
        noisy = D.add_awgn(cube, snr, seed=snr)
        noise = noisy.astype(np.float64) - cube
        measured = 10 * np.log10(np.mean(cube.astype(np.float64) ** 2) / np.mean(noise ** 2))
        assert abs(measured - snr) < 0.2
    rms = np.sqrt(np.mean((D.add_awgn(cube, 50, seed=1).astype(np.float64) - cube) ** 2))
    assert rms == pytest.approx(np.sqrt(np.mean(cube.astype(np.float64) ** 2)) / 10 ** 2.5, rel=0.01)


def test_awgn_edge_cases():
    cube = np.ones((3, 3, 3), dtype=np.float32)
    out = D.add_awgn(cube, np.inf)
    np.testing.assert_array_equal(out, cube)
    assert out is not cube
    np.testing.assert_array_equal(D.add_awgn(cube, 20, seed=3), D.add_awgn(cube, 20, seed=3))
    with pytest.raises(ValueError):
        D.add_awgn(np.zeros((2, 2, 2)), 20)


def test_synth_scene_contract():
    cfg = D.SynthConfig(height=20, width=24, bands=30, endmembers=4)
    cube, A, E = D.synth_generate(cfg)
    assert cube.shape == (20, 24, 30) and A.shape == (20, 24, 4) and E.shape == (4, 30)
    np.testing.assert_allclose(A.sum(-1), 1.0, atol=1e-6)
    assert (A >= 0).all() and (E >= 0).all() and (E <= 1).all()
    np.testing.assert_allclose(cube, A.astype(np.float64) @ E.astype(np.float64), atol=1e-6)
    # abundances vary spatially, not a near-constant field
    assert A.std(axis=(0, 1)).min() > 0.05


def test_synth_one_hot_pixel_equals_endmember():
    cube, A, E = D.synth_generate(D.SynthConfig(height=8, width=8, bands=20))
    A = A.copy()
    A[3, 3] = [0, 1, 0]
    recon = A.astype(np.float64) @ E.astype(np.float64)
    np.testing.assert_allclose(recon[3, 3], E[1], atol=1e-7)


def test_synth_seeded_and_validated():
    a = D.synth_generate(D.SynthConfig(seed=5, snr_db=30))
    b = D.synth_generate(D.SynthConfig(seed=5, snr_db=30))
    for x, y in zip(a, b):
        assert x.tobytes() == y.tobytes()
    with pytest.raises(ValueError):
        D.SynthConfig(bands=3, endmembers=4)
