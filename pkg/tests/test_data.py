import io
import logging

import numpy as np
import pytest

from fercnn import data
from fercnn.data import (
    DataError, ImageDataset, ManifestEntry, SplitConfig, batches, decode_grayscale,
    encode_pgm, load_manifest, resize_bilinear, split,
)

from oracles import bilinear_pixel


def write(tmp_path, text, name="m.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_manifest_three_rows(tmp_path):
    entries, skipped = load_manifest(write(tmp_path, "path,label\na.pgm,0\nb.pgm,4\nc.pgm,6\n"))
    assert [e.label for e in entries] == [0, 4, 6]
    assert skipped == 0


@pytest.mark.parametrize("bad", ["-1", "7"])
def test_manifest_skips_out_of_range(tmp_path, bad):
    entries, skipped = load_manifest(write(tmp_path, f"path,label\na.pgm,1\nb.pgm,{bad}\n"))
    assert len(entries) == 1
    assert skipped == 1


def test_manifest_malformed_row_names_row(tmp_path):
    with pytest.raises(DataError, match="row 3"):
        load_manifest(write(tmp_path, "path,label\na.pgm,1\nb.pgm\n"))
    with pytest.raises(DataError, match="row 2"):
        load_manifest(write(tmp_path, "path,label\na.pgm,x\n"))


def test_manifest_bad_header_and_missing_file(tmp_path):
    with pytest.raises(DataError, match="header"):
        load_manifest(write(tmp_path, "file,y\na,1\n"))
    with pytest.raises(DataError):
        load_manifest(tmp_path / "missing.csv")


def test_manifest_entry_invariants():
    with pytest.raises(DataError):
        ManifestEntry("", 1)
    with pytest.raises(DataError):
        ManifestEntry("a", 9)


def test_annotation_converter(tmp_path):
    ann = tmp_path / "ann"
    ann.mkdir()
    (ann / "vid1.txt").write_text("Neutral,Anger,Disgust,Fear,Happiness,Sadness,Surprise\n0\n-1\n4\n")
    (ann / "vid2.txt").write_text("6\n7\n")
    entries, dropped = data.annotations_to_manifest(ann)
    assert [(e.image_path, e.label) for e in entries] == [
        ("vid1/00001.jpg", 0), ("vid1/00003.jpg", 4), ("vid2/00001.jpg", 6)]
    assert dropped == 2


def test_pgm_constant():
    img = decode_grayscale(b"P5\n3 2\n255\n" + bytes([128] * 6))
    assert img.shape == (2, 3, 1)
    assert np.all(img == 128)


def test_pgm_header_comments():
    img = decode_grayscale(b"P5 # a comment\n2 # w\n1\n255\n" + bytes([1, 2]))
    np.testing.assert_array_equal(img[..., 0], [[1, 2]])


def test_red_pixel_luminosity():
    img = decode_grayscale(b"P6\n1 1\n255\n" + bytes([255, 0, 0]))
    assert img[0, 0, 0] == pytest.approx(0.299 * 255)


def test_pgm_roundtrip_gradient():
    grad = np.add.outer(np.arange(16), np.arange(16) * 15).clip(0, 255).astype(np.uint8)
    np.testing.assert_array_equal(decode_grayscale(encode_pgm(grad))[..., 0], grad)


def test_png_via_pillow():
    Image = pytest.importorskip("PIL.Image")
    rgb = np.zeros((2, 2, 3), np.uint8)
    rgb[0, 0] = (255, 0, 0)
    rgb[1, 1] = (0, 0, 255)
    buf = io.BytesIO()
    Image.fromarray(rgb).save(buf, format="PNG")
    img = decode_grayscale(buf.getvalue())
    assert img[0, 0, 0] == pytest.approx(0.299 * 255)
    assert img[1, 1, 0] == pytest.approx(0.114 * 255)


@pytest.mark.parametrize("blob", [b"GIF89a....", b"P5\n4 4\n255\n" + bytes(3), b"P5\nx y\n"])
def test_corrupt_or_unsupported_rejected(blob):
    with pytest.raises(DataError):
        decode_grayscale(blob)


def test_resize_identity():
    img = np.random.default_rng(0).uniform(0, 255, (48, 48, 1))
    np.testing.assert_array_equal(resize_bilinear(img), img)


def test_resize_constant():
    out = resize_bilinear(np.full((96, 96, 1), 7.0))
    assert out.shape == (48, 48, 1)
    np.testing.assert_allclose(out, 7.0)


def test_resize_checkerboard_matches_per_pixel_oracle():
    board = np.array([[0.0, 255.0], [255.0, 0.0]])[..., None]
    up = resize_bilinear(board, 5, 7)
    for y in range(5):
        for x in range(7):
            assert up[y, x, 0] == pytest.approx(bilinear_pixel(board, y, x, 5, 7))
    down = resize_bilinear(up, 3, 2)
    for y in range(3):
        for x in range(2):
            assert down[y, x, 0] == pytest.approx(bilinear_pixel(up, y, x, 3, 2))


def test_split_sizes_and_determinism():
    entries = list(range(10))
    tr, va = split(entries, SplitConfig(0.8, seed=3))
    assert (len(tr), len(va)) == (8, 2)
    assert (tr, va) == split(entries, SplitConfig(0.8, seed=3))
    assert sorted(tr + va) == entries


@pytest.mark.parametrize("n", [2, 3, 7, 11, 100, 1001])
def test_split_is_partition(n):
    entries = [i % 5 for i in range(n)]
    tr, va = split(entries, SplitConfig(seed=n))
    assert len(tr) == int(np.floor(0.8 * n)) or n < 5
    assert sorted(tr + va) == sorted(entries)


def test_split_rejects_tiny_and_bad_fraction():
    with pytest.raises(DataError):
        split([1])
    with pytest.raises(DataError):
        SplitConfig(1.0)


def dataset(n):
    imgs = np.random.default_rng(n).integers(0, 256, (n, 48, 48, 1)).astype(np.uint8)
    return ImageDataset(imgs, np.arange(n) % 7, [str(i) for i in range(n)])


def test_batch_sizes_with_partial():
    assert [len(b.labels) for b in batches(dataset(1030), 512, 0, 1)] == [512, 512, 6]


def test_singleton_tail_dropped_with_warning(caplog):
    with caplog.at_level(logging.WARNING):
        sizes = [len(b.labels) for b in batches(dataset(1025), 512, 0, 1)]
    assert sizes == [512, 512]
    assert "dropping" in caplog.text


def test_batches_normalized_and_shaped():
    ds = dataset(20)
    ds.images[0, 0, 0, 0] = 255
    for b in batches(ds, 8, None, 1):
        assert b.images.shape[1:] == (48, 48, 1)
        assert b.images.min() >= 0 and b.images.max() <= 1
    first = next(batches(ds, 8, None, 1))
    assert first.images[0, 0, 0, 0] == 1.0


def test_batch_order_keyed_by_seed_and_epoch():
    ds = dataset(50)
    order = lambda s, e: np.concatenate([b.indices for b in batches(ds, 16, s, e)])
    np.testing.assert_array_equal(order(1, 2), order(1, 2))
    assert not np.array_equal(order(1, 2), order(1, 3))
    assert sorted(order(1, 2)) == list(range(50))


def test_batches_reject_empty_and_bad_size():
    with pytest.raises(DataError):
        list(batches(ImageDataset(np.zeros((0, 48, 48, 1), np.uint8), np.zeros(0, int), []), 4, 0, 1))
    with pytest.raises(DataError):
        list(batches(dataset(3), 0, 0, 1))


def test_load_dataset_threads_keep_order(tmp_path):
    entries = []
    for i in range(6):
        (tmp_path / f"{i}.pgm").write_bytes(encode_pgm(np.full((10, 12), i * 40)))
        entries.append(ManifestEntry(f"{i}.pgm", i % 7))
    a = data.load_dataset(entries, tmp_path, threads=1)
    b = data.load_dataset(entries, tmp_path, threads=3)
    np.testing.assert_array_equal(a.images, b.images)
    assert a.images.shape == (6, 48, 48, 1)
    assert [int(a.images[i, 5, 5, 0]) for i in range(6)] == [i * 40 for i in range(6)]
