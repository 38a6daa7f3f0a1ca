import numpy as np
import pytest
import torch
from PIL import Image
from scipy.ndimage import uniform_filter

from jepalab import data as D


def test_patch_counts_and_raster_order():
    img = np.zeros((8, 8, 3), dtype=np.float32)
    img[0:4, 4:8] = 1.0  # top-right patch
    patches = D.to_patches(img, 4)
    assert patches.shape == (4, 48)
    assert patches.sum(dim=1).tolist() == [0.0, 48.0, 0.0, 0.0]
    assert D.to_patches(np.zeros((32, 32, 3)), 4).shape == (64, 48)


def test_patches_round_trip(gen):
    img = torch.rand(2, 16, 12, 3, generator=gen)
    assert torch.equal(D.from_patches(D.to_patches(img, 4), (4, 3), 4), img)


def test_patchify_zero_image_gives_positions():
    im = D.LabeledImage(np.zeros((16, 16, 3), dtype=np.float32), 0)
    w = torch.randn(32, 48)
    tok = D.patchify(im, 4, w, torch.zeros(32))
    assert torch.equal(tok.tokens, tok.positions)
    assert tok.grid == (4, 4)


def test_patchify_identity_projection_reconstructs(gen):
    pix = torch.rand(8, 8, 3, generator=gen).numpy()
    im = D.LabeledImage(pix, 1)
    tok = D.patchify(im, 4, torch.eye(48))
    recon = D.from_patches(tok.tokens - tok.positions, tok.grid, 4)
    np.testing.assert_allclose(recon.numpy(), pix, atol=1e-6)


def test_patch_size_must_divide():
    with pytest.raises(ValueError):
        D.to_patches(np.zeros((10, 8, 3)), 4)


@pytest.mark.parametrize("d", [8, 16, 64])
def test_sincos_row_norms(d):
    emb = D.sincos_pos_embed(6, 5, d).double()
    assert emb[0, 0::2].abs().max() == 0.0  # sin(0)
    assert torch.allclose(emb[0, 1::2], torch.ones(d // 2, dtype=torch.float64))
    np.testing.assert_allclose((emb**2).sum(1).numpy(), d / 2, rtol=1e-6)


@pytest.mark.parametrize("d", [8, 16, 64])
def test_sincos_rows_distinct_up_to_64x64(d):
    emb = D.sincos_pos_embed(64, 64, d).numpy()
    assert np.unique(emb, axis=0).shape[0] == 64 * 64


def test_sincos_rejects_bad_dim():
    with pytest.raises(ValueError):
        D.sincos_pos_embed(2, 2, 6)


def _write_tree(root, counts):
    for c, n in enumerate(counts):
        d = root / f"class_{c}"
        d.mkdir(parents=True)
        for i in range(n):
            arr = np.full((8, 8, 3), 40 * c + i, dtype=np.uint8)
            Image.fromarray(arr).save(d / f"{i}.png")


def test_load_dataset_labels_and_order(tmp_path):
    _write_tree(tmp_path, [3, 3])
    images = D.load_dataset(tmp_path, (8, 8))
    assert D.labels_of(images).tolist() == [0, 0, 0, 1, 1, 1]
    assert images[4].pixels[0, 0, 0] == pytest.approx(41 / 255)
    again = D.load_dataset(tmp_path, (8, 8))
    assert all(np.array_equal(a.pixels, b.pixels) for a, b in zip(images, again))


def test_load_dataset_resizes(tmp_path):
    _write_tree(tmp_path, [1, 1])
    assert D.load_dataset(tmp_path, (16, 16))[0].pixels.shape == (16, 16, 3)


def test_load_dataset_missing_root(tmp_path):
    with pytest.raises(FileNotFoundError):
        D.load_dataset(tmp_path / "nope")


def test_load_dataset_unreadable_file(tmp_path):
    _write_tree(tmp_path, [1, 1])
    (tmp_path / "class_0" / "broken.png").write_bytes(b"not a png")
    with pytest.raises(OSError, match="broken.png"):
        D.load_dataset(tmp_path, (8, 8))


def _high_pass_var(bg):
    return float(np.var(bg - uniform_filter(bg, size=(3, 3, 1), mode="reflect")))


def test_background_correlation_controls_texture():
    smooth, noisy = [], []
    for i in range(20):
        _, bg1 = D.render_synthetic(np.random.default_rng(i), 0, corr=1.0)
        _, bg0 = D.render_synthetic(np.random.default_rng(i), 0, corr=0.0)
        smooth.append(_high_pass_var(bg1))
        noisy.append(_high_pass_var(bg0))
    assert max(smooth) < min(noisy)


def test_gen_synthetic_basics():
    assert D.gen_synthetic(0, 0) == []
    a = D.gen_synthetic(3, 12)
    b = D.gen_synthetic(3, 12)
    assert all(np.array_equal(x.pixels, y.pixels) and x.label == y.label for x, y in zip(a, b))
    assert all(x.pixels.shape == (32, 32, 3) and x.pixels.dtype == np.float32 for x in a)
    assert set(D.labels_of(D.gen_synthetic(0, 200)).tolist()) == {0, 1, 2, 3}
    with pytest.raises(ValueError):
        D.gen_synthetic(0, 1, corr=1.5)


def test_dominant_shape_is_largest_object():
    # shape pixels are brighter than any background pixel; the labelled shape
    # covers more cells than each small distractor
    pix, bg = D.render_synthetic(np.random.default_rng(0), 2, grid_objects=3)
    bright = pix.min(axis=-1) >= D.SHAPE_MIN
    assert bright.sum() > 0.2 * (0.22 * 32) ** 2
    assert bg.max() <= D.BACKGROUND_MAX + 1e-6


def test_export_then_load_round_trip(tmp_path):
    images = D.gen_synthetic(1, 6)
    D.export_dataset(images, tmp_path)
    loaded = D.load_dataset(tmp_path, (32, 32))
    assert sorted(D.labels_of(loaded).tolist()) == sorted(D.labels_of(images).tolist())
    assert sorted(p.name for p in tmp_path.iterdir())[0].startswith("c0")
