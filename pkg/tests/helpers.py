import numpy as np

from navit.packing import TokenizedExample, grid_coords


def random_example(ex_id, rng, features, max_side=6, label=None, drop=True):
    rows, cols = int(rng.integers(1, max_side + 1)), int(rng.integers(1, max_side + 1))
    coords = grid_coords(rows, cols)
    if drop and len(coords) > 1:
        keep = int(rng.integers(1, len(coords) + 1))
        coords = coords[np.sort(rng.choice(len(coords), keep, replace=False))]
    patches = rng.normal(size=(len(coords), features)).astype(np.float32)
    label = int(rng.integers(4)) if label is None else label
    return TokenizedExample(ex_id, coords, rows, cols, patches, label)
