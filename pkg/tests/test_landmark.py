import math

import numpy as np
import pytest

from suturesim import nn
from suturesim.landmark import (
    CardinalityMismatch,
    Dataset,
    DatasetTooSmall,
    LandmarkSet,
    binarize,
    build_cascade,
    cascade_forward,
    generate_dataset,
    landmark_error,
    largest_cc,
    load_dataset,
    masked_peaks,
    save_dataset,
    train_cascade,
)


def flood_fill_oracle_max_area(grid):
    """Recursive-style flood fill (explicit stack), 4-connectivity."""
    g = np.asarray(grid)
    h, w = g.shape
    seen = set()
    best = 0
    for sr in range(h):
        for sc in range(w):
            if g[sr, sc] and (sr, sc) not in seen:
                stack = [(sr, sc)]
                seen.add((sr, sc))
                area = 0
                while stack:
                    r, c = stack.pop()
                    area += 1
                    for nr, nc in ((r + 1, c), (r - 1, c), (r, c + 1), (r, c - 1)):
                        if 0 <= nr < h and 0 <= nc < w and g[nr, nc] and (nr, nc) not in seen:
                            seen.add((nr, nc))
                            stack.append((nr, nc))
                best = max(best, area)
    return best


def test_binarize_all_high():
    out = binarize(np.full((4, 4), 0.9), 0.5)
    assert np.array_equal(out, np.ones((4, 4), dtype=np.uint8))


def test_binarize_all_low():
    out = binarize(np.full((4, 4), 0.1), 0.5)
    assert np.array_equal(out, np.zeros((4, 4), dtype=np.uint8))


def test_binarize_checkerboard():
    grid = np.indices((6, 6)).sum(axis=0) % 2
    soft = np.where(grid == 1, 0.6, 0.4)
    out = binarize(soft, 0.5)
    assert np.array_equal(out, grid.astype(np.uint8))


def test_binarize_idempotent():
    rng = np.random.default_rng(0)
    soft = rng.uniform(size=(16, 16))
    once = binarize(soft, 0.5)
    twice = binarize(once.astype(float), 0.5)
    assert np.array_equal(once, twice)


def test_largest_cc_single_blob_unchanged():
    grid = np.zeros((10, 10), dtype=np.uint8)
    grid[2:5, 2:5] = 1
    assert np.array_equal(largest_cc(grid), grid)


def test_largest_cc_keeps_biggest_only():
    grid = np.zeros((12, 12), dtype=np.uint8)
    grid[1:6, 1:11] = 1  # 50 px
    grid[8:9, 1:8] = 1  # 7 px
    out = largest_cc(grid)
    assert out.sum() == 50
    assert out[8, 3] == 0


def test_largest_cc_empty_input():
    grid = np.zeros((5, 5), dtype=np.uint8)
    assert np.array_equal(largest_cc(grid), grid)


def test_largest_cc_matches_flood_fill_oracle_200_grids():
    rng = np.random.default_rng(42)
    for _ in range(200):
        h = int(rng.integers(2, 64))
        w = int(rng.integers(2, 64))
        grid = (rng.uniform(size=(h, w)) < rng.uniform(0.2, 0.7)).astype(np.uint8)
        got = int(largest_cc(grid).sum())
        assert got == flood_fill_oracle_max_area(grid)


def test_largest_cc_uses_4_connectivity():
    # Two diagonal pixels are separate components under 4-connectivity.
    grid = np.zeros((4, 4), dtype=np.uint8)
    grid[0, 0] = 1
    grid[1, 1] = 1
    grid[1, 2] = 1
    out = largest_cc(grid)
    assert out.sum() == 2
    assert out[0, 0] == 0


def _bump(size, center, sigma=2.0):
    ys, xs = np.mgrid[0:size, 0:size]
    return np.exp(-(((xs - center[0]) ** 2) + (ys - center[1]) ** 2) / (2 * sigma**2))


def test_masked_peaks_removes_background_bumps():
    size = 64
    inside = [(15, 15), (45, 15), (45, 45), (15, 45)]
    outside = [(5, 60), (60, 5)]
    heat = np.zeros((size, size))
    for c in inside + outside:
        heat = np.maximum(heat, _bump(size, c))
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[10:52, 10:52] = 1
    result = masked_peaks(heat, mask, k=4)
    assert result.complete
    got = {(round(u), round(v)) for u, v in result.coords}
    assert got == set(inside)
    # Never returns a coordinate where the mask is zero.
    for u, v in result.coords:
        assert mask[int(round(v)), int(round(u))] == 1


def test_masked_peaks_zero_heatmap_incomplete():
    result = masked_peaks(np.zeros((16, 16)), np.ones((16, 16)), k=2)
    assert not result.complete
    assert len(result) == 0


def test_masked_peaks_single_bump_argmax():
    heat = _bump(32, (20, 12))
    result = masked_peaks(heat, np.ones((32, 32)), k=1)
    assert result.coords[0] == (20.0, 12.0)


def test_landmark_error_zero_for_exact():
    s = LandmarkSet(coords=((3.0, 4.0), (10.0, 10.0)))
    assert landmark_error(s, s) == [0.0, 0.0]


def test_landmark_error_345_triangle():
    pred = LandmarkSet(coords=((3.0, 4.0),))
    truth = LandmarkSet(coords=((0.0, 0.0),))
    assert landmark_error(pred, truth) == [5.0]


def test_landmark_error_cardinality():
    with pytest.raises(CardinalityMismatch):
        landmark_error(
            LandmarkSet(coords=((0, 0), (1, 1), (2, 2))),
            LandmarkSet(coords=((0, 0), (1, 1), (2, 2), (3, 3))),
        )


def test_dataset_split_by_serial_parity():
    ds = generate_dataset(n_frames=10, seed=1)
    assert [f.serial for f in ds.split("train")] == [1, 3, 5, 7, 9]
    assert [f.serial for f in ds.split("test")] == [2, 4, 6, 8, 10]


def test_dataset_round_trip(tmp_path):
    ds = generate_dataset(n_frames=6, seed=2)
    save_dataset(ds, tmp_path)
    loaded = load_dataset(tmp_path)
    assert len(loaded.frames) == 6
    for a, b in zip(ds.frames, loaded.frames):
        assert a.serial == b.serial
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.mask, b.mask)
        assert a.corners == b.corners


def test_train_cascade_rejects_tiny_dataset():
    ds = generate_dataset(n_frames=4, seed=3)  # 2 train frames
    with pytest.raises(DatasetTooSmall):
        train_cascade(ds)


def test_cascade_inference_deterministic():
    ds = generate_dataset(n_frames=6, seed=4)
    seg, heat = build_cascade(seed=0)
    img = ds.frames[0].image.astype(np.float32)[None, None]
    a = cascade_forward(seg, heat, img)
    b = cascade_forward(seg, heat, img)
    assert np.array_equal(a[0], b[0])
    assert np.array_equal(a[1], b[1])


def test_full_batch_training_loss_strictly_decreases():
    ds = generate_dataset(n_frames=16, seed=5)
    res = train_cascade(ds, epochs=10, batch_size=8, learning_rate=1.0, seed=0)
    assert all(b < a for a, b in zip(res.losses, res.losses[1:]))
