import itertools

import numpy as np
import pytest

from pc2m.area import class_frequencies
from pc2m.synth import (
    MIN_COLOR_DISTANCE,
    DatasetSpec,
    alpha_star,
    class_colors,
    gen_dataset,
    gen_image,
    ground_truth_area,
    induced_frequencies,
    load_dataset,
    patch_labels,
    presence_probabilities,
    save_dataset,
    split_indices,
)


@pytest.fixture(scope="module")
def data200():
    return gen_dataset(DatasetSpec(seed=0, image_count=200, class_count=5))


def test_deterministic():
    spec = DatasetSpec(seed=3, image_count=6)
    a, b = gen_dataset(spec), gen_dataset(spec)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes()
        assert x.mask.tobytes() == y.mask.tobytes()
    # per-index seeds: image i does not depend on how many images are generated
    assert gen_image(DatasetSpec(seed=3, image_count=50), 4).image.tobytes() == a[4].image.tobytes()


def test_masks_and_labels_agree(data200):
    for x in data200:
        assert x.labels == frozenset(np.unique(x.mask).tolist())
        assert 0 in x.labels
        assert 2 <= len(x.labels) <= 4
        assert x.image.min() >= 0 and x.image.max() <= 1


def test_concentrated_weights():
    spec = DatasetSpec(seed=1, image_count=30, class_count=5, class_weights=(0, 0, 1, 0))
    for x in gen_dataset(spec):
        assert x.labels <= {0, 3}


def test_presence_matches_sampler(data200):
    spec = DatasetSpec(seed=0, image_count=200, class_count=5)
    nu = class_frequencies([x.labels for x in data200], 5)
    assert np.max(np.abs(nu - induced_frequencies(spec))) <= 0.05


def test_presence_probabilities_by_simulation():
    # independent Monte Carlo of the sampler's class draws
    spec = DatasetSpec(class_count=5, class_weights=(0.4, 0.3, 0.2, 0.1))
    w = spec.weights()
    rng = np.random.default_rng(0)
    hits = np.zeros(4)
    trials = 40_000
    for _ in range(trials):
        k = rng.integers(1, 4)
        chosen = rng.choice(4, size=k, replace=False, p=w)
        hits[chosen] += 1
    np.testing.assert_allclose(presence_probabilities(spec)[1:], hits / trials, atol=0.01)


def test_ground_truth_area_examples():
    a = np.zeros((4, 4), dtype=int)
    np.testing.assert_array_equal(ground_truth_area([a], 3), [1, 0, 0])
    np.testing.assert_allclose(ground_truth_area([a, np.ones_like(a)], 2), [0.5, 0.5])


def test_ground_truth_area_counting_oracle():
    data = gen_dataset(DatasetSpec(seed=2, image_count=50))
    counts = np.zeros(5)
    for x in data:
        for c in x.mask.ravel():
            counts[c] += 1.0 / x.mask.size
    expected = counts / counts.sum()
    np.testing.assert_allclose(alpha_star(data, 5), expected, atol=1e-12)


def test_color_signatures_separated():
    for count in (5, 10, 14):
        colors = class_colors(count)
        for i, j in itertools.combinations(range(count), 2):
            assert np.linalg.norm(colors[i] - colors[j]) >= MIN_COLOR_DISTANCE


def test_patch_labels_majority_and_ties():
    m = np.zeros((4, 4), dtype=int)
    m[:2, :2] = [[1, 1], [1, 0]]
    m[:2, 2:] = [[2, 2], [1, 1]]
    np.testing.assert_array_equal(patch_labels(m, 2), [1, 1, 0, 0])


def test_unplaceable_shapes_error():
    spec = DatasetSpec(image_size=8, patch_size=4, shapes_per_image=(3, 3), shape_size=(0.9, 0.9))
    with pytest.raises(RuntimeError):
        gen_image(spec, 0)


def test_spec_validation():
    with pytest.raises(ValueError):
        DatasetSpec(class_count=1)
    with pytest.raises(ValueError):
        DatasetSpec(image_size=50, patch_size=8)
    with pytest.raises(ValueError):
        DatasetSpec(class_weights=(1, 2)).weights()


def test_save_load(tmp_path):
    data = gen_dataset(DatasetSpec(seed=4, image_count=5))
    save_dataset(tmp_path, data)
    assert {p.name for p in tmp_path.iterdir()} == {"images.bin", "masks.bin", "index.txt"}
    back = load_dataset(tmp_path)
    for x, y in zip(data, back):
        assert np.array_equal(x.image, y.image) and np.array_equal(x.mask, y.mask)
        assert x.labels == y.labels and x.index == y.index


def test_split():
    tr, va = split_indices(200, 0, 0.2)
    assert len(va) == 40 and len(tr) == 160
    assert set(tr) | set(va) == set(range(200)) and not set(tr) & set(va)
    assert np.array_equal(split_indices(200, 0, 0.2)[1], va)
