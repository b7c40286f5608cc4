import os
import struct

import numpy as np
import pytest

from robustkit import data


def make_idx_pair(tmp_path, images, labels, image_magic=data.IDX_IMAGE_MAGIC,
                  label_magic=data.IDX_LABEL_MAGIC, truncate_images=0):
    n, rows, cols = images.shape
    ip, lp = tmp_path / "imgs.idx", tmp_path / "labs.idx"
    blob = struct.pack(">iiii", image_magic, n, rows, cols) + images.astype(np.uint8).tobytes()
    if truncate_images:
        blob = blob[:-truncate_images]
    ip.write_bytes(blob)
    lp.write_bytes(struct.pack(">ii", label_magic, len(labels)) + bytes(labels))
    return ip, lp


def test_load_idx_tiny_pair(tmp_path):
    images = np.arange(8, dtype=np.uint8).reshape(2, 2, 2)
    ip, lp = make_idx_pair(tmp_path, images, [3, 7])
    ds = data.load_idx(ip, lp)
    assert len(ds) == 2
    assert ds.image_shape == (2, 2, 1)
    assert list(ds.labels) == [3, 7]


def test_load_idx_pixel_scaling(tmp_path):
    images = np.array([[[0, 255]], [[128, 1]]], dtype=np.uint8)
    ip, lp = make_idx_pair(tmp_path, images, [0, 1])
    ds = data.load_idx(ip, lp)
    assert ds.images[0, 0] == 0.0
    assert ds.images[0, 1] == 1.0
    assert ds.images[1, 0] == pytest.approx(128 / 255)


def test_load_idx_bad_magic(tmp_path):
    images = np.zeros((1, 2, 2), dtype=np.uint8)
    ip, lp = make_idx_pair(tmp_path, images, [0], image_magic=0x00000804)
    with pytest.raises(data.BadMagicError):
        data.load_idx(ip, lp)
    ip, lp = make_idx_pair(tmp_path, images, [0], label_magic=0x00000900)
    with pytest.raises(data.BadMagicError):
        data.load_idx(ip, lp)


def test_load_idx_truncated(tmp_path):
    images = np.zeros((3, 2, 2), dtype=np.uint8)
    ip, lp = make_idx_pair(tmp_path, images, [0, 1, 2], truncate_images=5)
    with pytest.raises(data.TruncatedPayloadError):
        data.load_idx(ip, lp)


def test_load_idx_count_mismatch(tmp_path):
    images = np.zeros((2, 2, 2), dtype=np.uint8)
    ip, lp = make_idx_pair(tmp_path, images, [0, 1, 2])
    with pytest.raises(data.CountMismatchError):
        data.load_idx(ip, lp)


def test_idx_roundtrip(tmp_path):
    ds = data.synth_digits(20, seed=3)
    ip, lp = tmp_path / "i.idx", tmp_path / "l.idx"
    data.write_idx(ds, ip, lp)
    loaded = data.load_idx(ip, lp)
    assert len(loaded) == 20
    assert loaded.image_shape == (28, 28, 1)
    assert np.array_equal(loaded.labels, ds.labels)
    # quantization to bytes loses at most half a pixel step
    assert np.abs(loaded.images - ds.images).max() <= 0.5 / 255 + 1e-12


@pytest.mark.skipif("RBK_MNIST_DIR" not in os.environ,
                    reason="real MNIST IDX files not provided")
def test_load_idx_full_mnist_inventory():
    root = os.environ["RBK_MNIST_DIR"]
    ds = data.load_idx(os.path.join(root, "train-images-idx3-ubyte"),
                       os.path.join(root, "train-labels-idx1-ubyte"))
    assert len(ds) == 60000
    assert ds.n_classes == 10


# ---------------------------------------------------------------------------
# synthetic datasets
# ---------------------------------------------------------------------------

def nearest_mean_train_accuracy(ds):
    """Linear classifier oracle: classify by nearest class mean."""
    means = np.stack([ds.images[ds.labels == c].mean(axis=0) for c in range(ds.n_classes)])
    d2 = ((ds.images[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    return float((d2.argmin(axis=1) == ds.labels).mean())


def test_blobs_large_separation_linearly_separable():
    ds = data.synth_blobs(300, 3, dim=5, separation=0.6, seed=1, std=0.03)
    assert nearest_mean_train_accuracy(ds) == 1.0


def test_blobs_deterministic_and_degenerate():
    a = data.synth_blobs(50, 3, 4, 0.5, seed=9)
    b = data.synth_blobs(50, 3, 4, 0.5, seed=9)
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.labels, b.labels)
    empty = data.synth_blobs(0, 3, 4, 0.5, seed=9)
    assert len(empty) == 0


def test_blobs_mean_separation():
    ds = data.synth_blobs(30000, 3, dim=6, separation=0.4, seed=5, std=0.01)
    means = np.stack([ds.images[ds.labels == c].mean(axis=0) for c in range(3)])
    for a in range(3):
        for b in range(a + 1, 3):
            assert np.linalg.norm(means[a] - means[b]) == pytest.approx(0.4, abs=0.01)


def test_blobs_validation():
    with pytest.raises(ValueError):
        data.synth_blobs(10, 3, 4, separation=0.0, seed=1)
    with pytest.raises(ValueError):
        data.synth_blobs(10, 5, 3, separation=0.5, seed=1)


def test_digits_deterministic_balanced_and_valid():
    a = data.synth_digits(40, seed=2)
    b = data.synth_digits(40, seed=2)
    assert np.array_equal(a.images, b.images)
    assert a.images.min() >= 0.0 and a.images.max() <= 1.0
    counts = np.bincount(a.labels, minlength=10)
    assert counts.min() == counts.max() == 4


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def test_epoch_batches_cover_dataset_exactly():
    ds = data.synth_blobs(23, 3, 4, 0.5, seed=3)
    stream = data.BatchStream(ds, batch_size=5, seed=7)
    for epoch in (0, 1):
        seen = np.concatenate([x for x, _ in stream.epoch_batches(epoch)])
        assert seen.shape == ds.images.shape
        assert np.array_equal(
            np.sort(seen.sum(axis=1)), np.sort(ds.images.sum(axis=1))
        )


def test_epochs_are_replayable_and_distinct():
    ds = data.synth_blobs(40, 4, 4, 0.5, seed=3)
    s1 = data.BatchStream(ds, 8, seed=11)
    s2 = data.BatchStream(ds, 8, seed=11)
    e0a = np.concatenate([y for _, y in s1.epoch_batches(0)])
    e0b = np.concatenate([y for _, y in s2.epoch_batches(0)])
    assert np.array_equal(e0a, e0b)
    e1 = np.concatenate([y for _, y in s1.epoch_batches(1)])
    assert not np.array_equal(e0a, e1)


def test_label_distribution_preserved_by_shuffle():
    ds = data.synth_blobs(60, 3, 4, 0.5, seed=3)
    stream = data.BatchStream(ds, 60, seed=1)
    x, y = stream.next_batch()
    assert np.array_equal(np.bincount(y, minlength=3), np.bincount(ds.labels, minlength=3))


def test_next_batch_rolls_epochs():
    ds = data.synth_blobs(10, 2, 4, 0.5, seed=3)
    stream = data.BatchStream(ds, 4, seed=1)
    sizes = [len(stream.next_batch()[1]) for _ in range(6)]
    assert sizes == [4, 4, 2, 4, 4, 2]
    assert stream.epoch == 1


# ---------------------------------------------------------------------------
# gaussian augmentation
# ---------------------------------------------------------------------------

def test_augment_sigma_zero_identity_copy():
    ds = data.synth_blobs(5, 2, 4, 0.5, seed=3)
    out = data.gaussian_augment(ds.images, 0.0, seed=1, call_index=0)
    assert np.array_equal(out, ds.images)
    out[0, 0] = 99.0
    assert ds.images[0, 0] != 99.0


def test_augment_statistics_sigma_half():
    base = np.zeros((1000, 1000))
    out = data.gaussian_augment(base, 0.5, seed=123, call_index=4)
    noise = out - base
    assert abs(noise.mean()) <= 0.002
    assert 0.498 <= noise.std() <= 0.502


def test_augment_deterministic_per_seed_and_call():
    base = np.ones((3, 7))
    a = data.gaussian_augment(base, 0.3, seed=5, call_index=2)
    b = data.gaussian_augment(base, 0.3, seed=5, call_index=2)
    c = data.gaussian_augment(base, 0.3, seed=5, call_index=3)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_augment_never_mutates_input_and_validates():
    base = np.full((2, 2), 0.5)
    snapshot = base.copy()
    data.gaussian_augment(base, 0.7, seed=0)
    assert np.array_equal(base, snapshot)
    with pytest.raises(ValueError):
        data.gaussian_augment(base, -0.1, seed=0)


def test_dataset_csv_export(tmp_path):
    ds = data.synth_blobs(4, 2, 3, 0.5, seed=1)
    path = tmp_path / "blobs.csv"
    ds.to_csv(path)
    lines = path.read_text().strip().splitlines()
    assert len(lines) == 4
    parts = lines[0].split(",")
    assert len(parts) == 4
    assert parts[-1] == str(ds.labels[0])
