import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from metashot.episodes import (
    DatasetHandle,
    EpisodeSpec,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    sample_episode,
)
from metashot.errors import ConfigError, DatasetError


def write_pngs(folder, n, size=(10, 10), mode="L", seed=0):
    folder.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    shape = size if mode == "L" else size + (3,)
    for i in range(n):
        Image.fromarray(rng.integers(0, 256, shape).astype(np.uint8), mode).save(folder / f"img{i:03d}.png")


def test_directory_layout_counts(tmp_path):
    for c in ("cat", "ant", "bee"):
        write_pngs(tmp_path / c, 25)
    h = load_dataset(tmp_path)
    assert h.num_classes == 3
    assert h.counts() == [25, 25, 25]
    assert h.class_ids == ["ant", "bee", "cat"]
    assert h.image_shape == (28, 28, 1)
    img = h.image(0, 0)
    assert img.shape == (28, 28, 1) and 0 <= img.min() and img.max() <= 1


def test_colour_images_default_to_84(tmp_path):
    write_pngs(tmp_path / "a", 2, mode="RGB")
    write_pngs(tmp_path / "b", 2, mode="RGB")
    h = load_dataset(tmp_path)
    assert h.image_shape == (84, 84, 3)
    assert h.images([(0, 0), (1, 1)]).shape == (2, 84, 84, 3)


def test_manifest(tmp_path):
    write_pngs(tmp_path / "x", 3)
    write_pngs(tmp_path / "y", 2)
    rows = ["relative_path,class_name"] + [f"x/img{i:03d}.png,first" for i in range(3)]
    rows += [f"y/img{i:03d}.png,second" for i in range(2)]
    (tmp_path / "m.csv").write_text("\n".join(rows) + "\n")
    h = load_dataset(tmp_path, manifest=tmp_path / "m.csv")
    assert h.class_ids == ["first", "second"] and h.counts() == [3, 2]


def test_manifest_row_count_mismatch(tmp_path):
    write_pngs(tmp_path / "x", 3)
    (tmp_path / "m.csv").write_text("relative_path,class_name\nx/img000.png,a\n")
    with pytest.raises(DatasetError, match="manifest lists 1 images but 3"):
        load_dataset(tmp_path, manifest=tmp_path / "m.csv")


def test_manifest_header_required(tmp_path):
    write_pngs(tmp_path / "x", 1)
    (tmp_path / "m.csv").write_text("path,label\nx/img000.png,a\n")
    with pytest.raises(DatasetError, match="header"):
        load_dataset(tmp_path, manifest=tmp_path / "m.csv")


def test_nested_alphabet_layout(tmp_path):
    for alpha in ("Greek", "Latin"):
        for ch in ("c01", "c02"):
            write_pngs(tmp_path / alpha / ch, 4)
    h = load_dataset(tmp_path, nested=True)
    assert h.class_ids == ["Greek/c01", "Greek/c02", "Latin/c01", "Latin/c02"]


def test_empty_class_rejected(tmp_path):
    write_pngs(tmp_path / "full", 2)
    (tmp_path / "empty").mkdir()
    with pytest.raises(DatasetError, match="empty"):
        load_dataset(tmp_path)


def test_undecodable_file_named(tmp_path):
    write_pngs(tmp_path / "a", 2)
    bad = tmp_path / "a" / "zzz.png"
    bad.write_bytes(b"not a png")
    h = load_dataset(tmp_path)
    with pytest.raises(DatasetError, match="zzz.png"):
        h.images([(0, 2)])


# ---------------------------------------------------------------- sampling


@pytest.fixture(scope="module")
def synth():
    return generate_synthetic(SyntheticSpec((8, 8), 1, 0.1, 4, 1.0), 25, 22, seed=3)


@pytest.mark.parametrize("n,k,q", [(5, 1, 15), (20, 1, 5)])
def test_episode_sizes(synth, n, k, q):
    ep = sample_episode(synth, EpisodeSpec(n, k, q), np.random.default_rng(0))
    assert len(ep.support_y) == n * k and len(ep.query_y) == n * q
    assert ep.support_x.shape == (n * k, 8, 8, 1)


def test_same_rng_state_same_episode(synth):
    spec = EpisodeSpec(5, 2, 3)
    a = sample_episode(synth, spec, np.random.default_rng(11))
    b = sample_episode(synth, spec, np.random.default_rng(11))
    assert a.support_ids == b.support_ids and a.query_ids == b.query_ids
    assert np.array_equal(a.support_x, b.support_x)


def check_episode(ep, spec):
    s, q = set(ep.support_ids), set(ep.query_ids)
    assert not s & q
    assert len(s) == spec.ways * spec.shots and len(q) == spec.ways * spec.queries
    assert np.array_equal(np.bincount(ep.support_y, minlength=spec.ways), [spec.shots] * spec.ways)
    assert np.array_equal(np.bincount(ep.query_y, minlength=spec.ways), [spec.queries] * spec.ways)
    # every id under episode label l belongs to the class mapped to l
    for ids, ys in ((ep.support_ids, ep.support_y), (ep.query_ids, ep.query_y)):
        for (c, _), y in zip(ids, ys):
            assert ep.classes[y] == f"synthetic_{c:04d}"
    assert len(set(ep.classes)) == spec.ways


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 8), k=st.integers(1, 5), q=st.integers(1, 10))
def test_episode_invariants(synth, seed, n, k, q):
    spec = EpisodeSpec(n, k, q)
    check_episode(sample_episode(synth, spec, np.random.default_rng(seed)), spec)


def test_class_multiset_independent_of_label_permutation(synth):
    spec = EpisodeSpec(5, 1, 2)
    ep = sample_episode(synth, spec, np.random.default_rng(5))
    counts = {}
    for c, _ in ep.support_ids + ep.query_ids:
        counts[c] = counts.get(c, 0) + 1
    assert sorted(counts.values()) == [3] * 5


def test_insufficient_classes(synth):
    with pytest.raises(DatasetError, match="needs 30 classes, dataset has 25"):
        sample_episode(synth, EpisodeSpec(30, 1, 1), np.random.default_rng(0))


def test_insufficient_images(synth):
    with pytest.raises(DatasetError, match="has 22 images, episode needs 25"):
        sample_episode(synth, EpisodeSpec(5, 5, 20), np.random.default_rng(0))


def test_spec_validation():
    for bad in ((1, 1, 1), (5, 0, 1), (5, 1, 0)):
        with pytest.raises(ConfigError):
            EpisodeSpec(*bad)


# ---------------------------------------------------------------- synthetic


def test_zero_noise_images_identical():
    h = generate_synthetic(SyntheticSpec((8, 8), 1, 0.0, 4, 1.0), 3, 5, seed=0)
    for c in range(3):
        imgs = h.images([(c, i) for i in range(5)])
        assert np.all(imgs == imgs[0])


def test_prototypes_distinct():
    h = generate_synthetic(SyntheticSpec((8, 8), 3, 0.0, 4, 1.0), 10, 1, seed=1)
    protos = h.images([(c, 0) for c in range(10)]).reshape(10, -1)
    d = np.linalg.norm(protos[:, None] - protos[None], axis=2)
    assert np.all(d[~np.eye(10, dtype=bool)] > 0)


def test_synthetic_handle_passes_load_invariants():
    h = generate_synthetic(SyntheticSpec(), 5, 40, seed=2)
    assert isinstance(h, DatasetHandle)
    assert h.counts() == [40] * 5 and h.image_shape == (16, 16, 1)
    assert len(set(h.class_ids)) == 5


def test_nearest_centroid_on_raw_pixels():
    h = generate_synthetic(SyntheticSpec((16, 16), 1, 0.1, 4, 2.0), 10, 40, seed=4)
    train = np.stack([h.images([(c, i) for i in range(10)]).mean(axis=0).ravel() for c in range(10)])
    correct = total = 0
    for c in range(10):
        x = h.images([(c, i) for i in range(10, 40)]).reshape(30, -1)
        pred = np.argmin(((x[:, None] - train[None]) ** 2).sum(-1), axis=1)
        correct += int(np.sum(pred == c))
        total += 30
    assert correct / total >= 0.99


def test_synthetic_is_deterministic():
    a = generate_synthetic(SyntheticSpec(), 4, 3, seed=9)
    b = generate_synthetic(SyntheticSpec(), 4, 3, seed=9)
    assert np.array_equal(a.images(a.all_ids()), b.images(b.all_ids()))
