"""Image I/O, the patch grid, and the patch-based denoiser."""

import math

import numpy as np
import pytest

from greedylearn.autodiff import GradientTape
from greedylearn.errors import (
    CorruptHeader,
    EmptyBatch,
    ImageTooSmall,
    ShapeMismatch,
    UnsupportedFormat,
)
from greedylearn.imaging import (
    DenoiserModel,
    ImagingTrainConfig,
    denoise,
    extract_patches,
    load_image,
    patch_average_op,
    psnr,
    reconstruct_average,
    sample_crops,
    save_image,
    train_image_denoiser,
)
from greedylearn.pursuit import Dictionary
from greedylearn.unrolled import AttentionParams, LgmParams


def test_pgm_round_trip_is_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(9, 13)).astype(np.float64)
    path = tmp_path / "img.pgm"
    save_image(path, img)
    assert np.array_equal(load_image(path), img)


def test_save_image_rounds_and_clips(tmp_path):
    img = np.array([[-4.0, 0.4, 254.6, 300.0]])
    path = tmp_path / "clip.pgm"
    save_image(path, img)
    assert np.array_equal(load_image(path), [[0.0, 0.0, 255.0, 255.0]])


def test_load_image_handles_comments_and_whitespace(tmp_path):
    raster = bytes(range(24))
    data = b"P5 # magic\n# a comment line\n  6\t4 # dims\n255\n" + raster
    path = tmp_path / "commented.pgm"
    path.write_bytes(data)
    img = load_image(path)
    assert img.shape == (4, 6)
    assert np.array_equal(img.ravel(), np.arange(24.0))


def test_load_image_rejects_bad_files(tmp_path):
    cases = [
        (b"P2\n2 2\n255\n1 2 3 4", UnsupportedFormat),  # ascii variant
        (b"P5\n2 2\n65535\n" + bytes(8), UnsupportedFormat),
        (b"P5\n2 2\n", CorruptHeader),  # truncated header
        (b"P5\n2 x\n255\n" + bytes(4), CorruptHeader),
        (b"P5\n0 2\n255\n", CorruptHeader),
        (b"P5\n3 3\n255\n" + bytes(5), CorruptHeader),  # short raster
    ]
    for k, (data, exc) in enumerate(cases):
        path = tmp_path / f"bad{k}.pgm"
        path.write_bytes(data)
        with pytest.raises(exc):
            load_image(path)


def test_psnr_closed_forms():
    a = np.zeros((4, 4))
    assert psnr(a, a) == float("inf")
    b = np.ones((4, 4))
    assert abs(psnr(a, b) - 10.0 * math.log10(255.0**2)) < 1e-12
    assert abs(psnr(a, b, peak=1.0)) < 1e-12  # MSE 1 at unit peak
    with pytest.raises(ShapeMismatch):
        psnr(np.zeros((2, 2)), np.zeros((3, 3)))


def test_extract_patches_layout_is_column_major():
    img = np.arange(9.0).reshape(3, 3)
    patches = extract_patches(img, 2)
    assert patches.shape == (4, 4)
    # patch k starts at raster corner (k // 2, k % 2); entries run down columns
    for k, (i, j) in enumerate([(0, 0), (0, 1), (1, 0), (1, 1)]):
        expected = [img[i, j], img[i + 1, j], img[i, j + 1], img[i + 1, j + 1]]
        assert np.array_equal(patches[:, k], expected)


def test_extract_patches_count_for_ten_by_ten():
    img = np.zeros((10, 10))
    assert extract_patches(img, 8).shape == (64, 9)


def test_extract_patches_rejects_small_images():
    with pytest.raises(ImageTooSmall):
        extract_patches(np.zeros((7, 20)), 8)


def test_reconstruct_inverts_extract_exactly():
    rng = np.random.default_rng(1)
    for h, w, p in [(10, 10, 8), (9, 14, 4), (8, 8, 8), (24, 17, 5)]:
        img = rng.standard_normal((h, w))
        back = reconstruct_average(extract_patches(img, p), (h, w), p)
        assert np.max(np.abs(back - img)) < 1e-12


def brute_force_cover(h, w, p):
    counts = np.zeros((h, w))
    for i in range(h - p + 1):
        for j in range(w - p + 1):
            counts[i:i + p, j:j + p] += 1.0
    return counts


def test_cover_counts_match_brute_force():
    for h, w, p in [(10, 10, 8), (9, 14, 4), (8, 8, 8), (24, 17, 5), (12, 30, 3)]:
        img = np.ones((h, w))
        averaged = reconstruct_average(extract_patches(img, p) * 0.0 + 1.0,
                                       (h, w), p)
        assert np.allclose(averaged, 1.0, atol=1e-14)
        # recover the counts from a sum of ones
        patches = np.ones((p * p, (h - p + 1) * (w - p + 1)))
        counts = brute_force_cover(h, w, p)
        sums = reconstruct_average(patches, (h, w), p) * counts
        assert np.allclose(sums, counts, atol=1e-12)


def test_reconstruct_average_with_prior_term():
    rng = np.random.default_rng(2)
    h, w, p, lam = 9, 11, 3, 2.5
    img = rng.standard_normal((h, w))
    noisy = rng.standard_normal((h, w))
    patches = extract_patches(img, p)
    out = reconstruct_average(patches, (h, w), p, lam, noisy)
    counts = brute_force_cover(h, w, p)
    expected = (lam * noisy + img * counts) / (lam + counts)
    assert np.max(np.abs(out - expected)) < 1e-12
    with pytest.raises(ValueError):
        reconstruct_average(patches, (h, w), p, lam)  # missing noisy
    with pytest.raises(ValueError):
        reconstruct_average(patches, (h, w), p, -1.0, noisy)


def test_reconstruct_average_validates_patch_shape():
    with pytest.raises(ShapeMismatch):
        reconstruct_average(np.zeros((4, 5)), (4, 4), 2)


def test_patch_average_op_is_the_exact_adjoint():
    rng = np.random.default_rng(3)
    h, w, p = 7, 9, 3
    patches = rng.standard_normal((p * p, (h - p + 1) * (w - p + 1)))
    tape = GradientTape()
    node = tape.leaf(patches, "patches")
    out = patch_average_op(node, (h, w), p)
    assert np.allclose(out.value, reconstruct_average(patches, (h, w), p),
                       atol=1e-14)
    g = rng.standard_normal((h, w))
    tape.backward(g, root=out)
    grad = tape.grad_of("patches")
    # linear operator: <g, A x> == <A^T g, x>
    lhs = float(np.sum(g * out.value))
    rhs = float(np.sum(grad * patches))
    assert abs(lhs - rhs) < 1e-10
    # finite differences on one entry
    step = 1e-6
    bumped = patches.copy()
    bumped[5, 2] += step
    fd = (float(np.sum(g * reconstruct_average(bumped, (h, w), p))) - lhs) / step
    assert abs(fd - grad[5, 2]) < 1e-5


def test_denoiser_model_init_shapes():
    model = DenoiserModel.init(patch_size=4, max_atoms=3, dc_scale=2.0, seed=1)
    assert model.params.analysis.atoms.shape == (16, 64)
    assert model.params.n_atoms == 65  # includes the DC atom
    assert model.params.dc_scale_analysis == 2.0
    assert model.attention.signal_length == 16
    assert model.attention.depth == 3


def test_denoiser_model_validation():
    base = DenoiserModel.init(patch_size=4, max_atoms=3)
    no_dc = LgmParams(base.params.analysis, base.params.synthesis)
    with pytest.raises(ValueError):
        DenoiserModel(no_dc, base.attention, 4, 3)
    with pytest.raises(ShapeMismatch):
        DenoiserModel(base.params, base.attention, 5, 3)  # 25 != 16 rows
    with pytest.raises(ShapeMismatch):
        DenoiserModel(base.params, AttentionParams.zeros(16, 4), 4, 3)


def test_denoiser_model_save_load_round_trip(tmp_path):
    model = DenoiserModel.init(patch_size=4, max_atoms=3, seed=2)
    path = tmp_path / "model.ckpt"
    model.save(path)
    back = DenoiserModel.load(path)
    assert back.patch_size == 4
    assert back.max_atoms == 3
    assert np.array_equal(back.params.analysis.atoms, model.params.analysis.atoms)
    assert np.array_equal(back.attention.w_out, model.attention.w_out)


def test_denoiser_model_load_requires_attention(tmp_path):
    from greedylearn.unrolled import save_lgm_checkpoint

    params = DenoiserModel.init(patch_size=4, max_atoms=3).params
    path = tmp_path / "plain.ckpt"
    save_lgm_checkpoint(path, params, meta={"patch_size": 4, "max_atoms": 3})
    with pytest.raises(CorruptHeader):
        DenoiserModel.load(path)


def test_denoise_preserves_constant_images():
    model = DenoiserModel.init(patch_size=4, max_atoms=3)
    img = np.full((10, 12), 87.0)
    out = denoise(model, img)
    assert np.max(np.abs(out - img)) < 1e-10


def test_denoise_is_deterministic_and_chunk_independent():
    rng = np.random.default_rng(4)
    model = DenoiserModel.init(patch_size=4, max_atoms=2)
    img = np.clip(rng.normal(128.0, 30.0, size=(12, 12)), 0, 255)
    a = denoise(model, img)
    b = denoise(model, img)
    c = denoise(model, img, chunk=7)
    assert np.array_equal(a, b)
    assert np.max(np.abs(a - c)) < 1e-12
    assert a.shape == img.shape


def test_denoise_rejects_small_images():
    model = DenoiserModel.init(patch_size=8, max_atoms=2)
    with pytest.raises(ImageTooSmall):
        denoise(model, np.zeros((6, 20)))


def test_sample_crops_are_windows_of_the_source():
    rng = np.random.default_rng(5)
    img = rng.standard_normal((8, 8))
    crops = sample_crops([img], 4, 6, seed=3)
    assert len(crops) == 6
    windows = {(i, j): img[i:i + 4, j:j + 4] for i in range(5) for j in range(5)}
    for crop in crops:
        assert crop.shape == (4, 4)
        assert any(np.array_equal(crop, w) for w in windows.values())
    again = sample_crops([img], 4, 6, seed=3)
    assert all(np.array_equal(a, b) for a, b in zip(crops, again))


def test_sample_crops_validation():
    with pytest.raises(EmptyBatch):
        sample_crops([], 4, 2)
    with pytest.raises(ImageTooSmall):
        sample_crops([np.zeros((3, 9))], 4, 2)


def test_imaging_train_config_validation():
    with pytest.raises(ValueError):
        ImagingTrainConfig(sigma=0.0, epochs=1)
    with pytest.raises(ValueError):
        ImagingTrainConfig(sigma=25.0, epochs=-1)
    with pytest.raises(ValueError):
        ImagingTrainConfig(sigma=25.0, epochs=1, batch_size=0)
    with pytest.raises(ValueError):
        ImagingTrainConfig(sigma=25.0, epochs=1, loss_kind="l1")
    with pytest.raises(ValueError):
        ImagingTrainConfig(sigma=25.0, epochs=1, xi=-0.1)


def test_train_image_denoiser_smoke():
    rng = np.random.default_rng(6)
    model = DenoiserModel.init(patch_size=4, max_atoms=2, seed=4)
    base = np.add.outer(np.linspace(0, 200, 12), np.linspace(0, 40, 12))
    crops = [base + 10.0 * rng.standard_normal(base.shape) * 0.0 + shift
             for shift in (0.0, 5.0, -5.0, 10.0)]
    config = ImagingTrainConfig(sigma=20.0, epochs=2, batch_size=2,
                                learning_rate=1e-3, seed=5)
    seen = []
    trained, history = train_image_denoiser(model, crops, config,
                                            callback=lambda e, row: seen.append(e))
    assert seen == [1, 2]
    assert len(history) == 2
    assert all(np.isfinite(row["train_loss"]) for row in history)
    assert isinstance(trained, DenoiserModel)
    assert trained.patch_size == 4
    moved = not np.array_equal(trained.params.analysis.atoms,
                               model.params.analysis.atoms)
    assert moved


def test_train_image_denoiser_validation():
    model = DenoiserModel.init(patch_size=4, max_atoms=2)
    config = ImagingTrainConfig(sigma=20.0, epochs=1)
    with pytest.raises(EmptyBatch):
        train_image_denoiser(model, [], config)
    with pytest.raises(ImageTooSmall):
        train_image_denoiser(model, [np.zeros((3, 3))], config)


def test_train_image_denoiser_is_deterministic():
    model = DenoiserModel.init(patch_size=4, max_atoms=2, seed=7)
    base = np.add.outer(np.linspace(0, 100, 10), np.linspace(0, 100, 10))
    crops = [base, base * 0.5]
    config = ImagingTrainConfig(sigma=10.0, epochs=1, batch_size=2, seed=8)
    a, hist_a = train_image_denoiser(model, crops, config)
    b, hist_b = train_image_denoiser(model, crops, config)
    assert np.array_equal(a.params.analysis.atoms, b.params.analysis.atoms)
    assert hist_a == hist_b
