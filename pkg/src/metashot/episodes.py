"""Dataset ingestion and N-way K-shot episode sampling."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from metashot.errors import ConfigError, DatasetError

GRAYSCALE_SIZE = (28, 28)
COLOR_SIZE = (84, 84)


@dataclass(frozen=True)
class EpisodeSpec:
    ways: int = 5
    shots: int = 1
    queries: int = 15

    def __post_init__(self):
        if self.ways < 2:
            raise ConfigError(f"ways must be >= 2, got {self.ways}")
        if self.shots < 1:
            raise ConfigError(f"shots must be >= 1, got {self.shots}")
        if self.queries < 1:
            raise ConfigError(f"queries must be >= 1, got {self.queries}")

    @property
    def per_class(self):
        return self.shots + self.queries


@dataclass
class Episode:
    """One N-way K-shot task. Labels are episode-local in [0, N)."""

    task_id: int
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    # classes[label] is the dataset class id behind episode label `label`
    classes: list
    support_ids: list
    query_ids: list

    @property
    def ways(self):
        return len(self.classes)


class DatasetHandle:
    """Read-only collection of classes, each a list of image references.

    ``refs[c][i]`` is either a filesystem path (decoded lazily, then cached)
    or an in-memory (h, w, c) array with values in [0, 1].
    """

    def __init__(self, class_ids, refs, image_shape, split="train", root=None):
        if len(set(class_ids)) != len(class_ids):
            raise DatasetError("class ids must be unique")
        if len(class_ids) != len(refs):
            raise DatasetError("one reference list per class is required")
        for cid, items in zip(class_ids, refs):
            if not items:
                raise DatasetError(f"class {cid!r} has no images")
        self.class_ids = list(class_ids)
        self.refs = [list(r) for r in refs]
        self.image_shape = tuple(image_shape)
        self.split = split
        self.root = root
        self._cache = {}

    def __repr__(self):
        return (
            f"DatasetHandle(split={self.split!r}, classes={self.num_classes}, "
            f"image_shape={self.image_shape})"
        )

    @property
    def num_classes(self):
        return len(self.class_ids)

    @property
    def channels(self):
        return self.image_shape[2]

    def counts(self):
        return [len(r) for r in self.refs]

    def image(self, c, i):
        ref = self.refs[c][i]
        if isinstance(ref, np.ndarray):
            return ref
        key = (c, i)
        img = self._cache.get(key)
        if img is None:
            img = _decode(ref, self.image_shape)
            self._cache[key] = img
        return img

    def images(self, ids):
        return np.stack([self.image(c, i) for c, i in ids]) if ids else np.zeros((0,) + self.image_shape)

    def subset(self, class_indices, split=None):
        class_indices = list(class_indices)
        out = DatasetHandle(
            [self.class_ids[c] for c in class_indices],
            [self.refs[c] for c in class_indices],
            self.image_shape,
            split or self.split,
            self.root,
        )
        return out

    def all_ids(self):
        return [(c, i) for c in range(self.num_classes) for i in range(len(self.refs[c]))]


def _decode(path, image_shape):
    h, w, c = image_shape
    try:
        with Image.open(path) as im:
            im = im.convert("L" if c == 1 else "RGB")
            if im.size != (w, h):
                im = im.resize((w, h), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}") from None
    return arr.reshape(h, w, c)


def _probe(path):
    try:
        with Image.open(path) as im:
            return im.mode
    except (UnidentifiedImageError, OSError) as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}") from None


def load_dataset(root, manifest=None, nested=False, resize=None, split="train"):
    """Index a dataset on disk.

    Layouts: ``root/<class>/*.png``; with ``nested=True`` the Omniglot
    ``root/<alphabet>/<character>/*.png`` tree, one class per character; or a
    CSV manifest with header ``relative_path,class_name``. Classes are
    ordered lexicographically. Grayscale images are tagged single-channel and
    resized to 28x28 by default, colour images to 84x84.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    pngs = sorted(p for p in root.rglob("*.png") if p.is_file())
    groups = {}
    if manifest is not None:
        manifest = Path(manifest)
        with open(manifest, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != ["relative_path", "class_name"]:
                raise DatasetError(f"manifest {manifest} must start with header relative_path,class_name")
            rows = [r for r in reader if r]
        if len(rows) != len(pngs):
            raise DatasetError(
                f"manifest lists {len(rows)} images but {len(pngs)} PNG files exist under {root}"
            )
        for rel, cls in rows:
            p = root / rel
            if not p.is_file():
                raise DatasetError(f"manifest entry {rel} not found under {root}")
            groups.setdefault(cls, []).append(p)
    else:
        if nested:
            dirs = sorted(d for a in root.iterdir() if a.is_dir() for d in a.iterdir() if d.is_dir())
        else:
            dirs = sorted(d for d in root.iterdir() if d.is_dir())
        for d in dirs:
            cid = d.relative_to(root).as_posix()
            files = sorted(p for p in d.glob("*.png") if p.is_file())
            if not files:
                raise DatasetError(f"class {cid!r} has no PNG images")
            groups[cid] = files
    if not groups:
        raise DatasetError(f"no classes found under {root}")
    class_ids = sorted(groups)
    refs = [sorted(groups[c]) for c in class_ids]
    for cid, files in zip(class_ids, refs):
        if not files:
            raise DatasetError(f"class {cid!r} has no images")
    mode = _probe(refs[0][0])
    gray = mode in ("1", "L", "LA", "I", "I;16", "F")
    if resize is None:
        size = GRAYSCALE_SIZE if gray else COLOR_SIZE
    else:
        size = tuple(resize)
    return DatasetHandle(class_ids, refs, (size[0], size[1], 1 if gray else 3), split, root)


def sample_episode(handle, spec, rng, task_id=0):
    """Sample one episode: N classes without replacement, K+Q images per class.

    ``rng`` is a numpy Generator; the episode is a pure function of its state.
    """
    n, k, q = spec.ways, spec.shots, spec.queries
    if handle.num_classes < n:
        raise DatasetError(f"episode needs {n} classes, dataset has {handle.num_classes}")
    counts = handle.counts()
    chosen = rng.choice(handle.num_classes, size=n, replace=False)
    for c in chosen:
        if counts[c] < k + q:
            raise DatasetError(
                f"class {handle.class_ids[c]!r} has {counts[c]} images, episode needs {k + q}"
            )
    labels = rng.permutation(n)
    by_label = [None] * n
    for c, lab in zip(chosen, labels):
        picks = rng.choice(counts[c], size=k + q, replace=False)
        by_label[lab] = (int(c), [int(i) for i in picks])
    support_ids, query_ids, sy, qy = [], [], [], []
    for lab, (c, picks) in enumerate(by_label):
        support_ids += [(c, i) for i in picks[:k]]
        query_ids += [(c, i) for i in picks[k:]]
        sy += [lab] * k
        qy += [lab] * q
    return Episode(
        task_id=task_id,
        support_x=handle.images(support_ids),
        support_y=np.array(sy, dtype=np.int64),
        query_x=handle.images(query_ids),
        query_y=np.array(qy, dtype=np.int64),
        classes=[handle.class_ids[c] for c, _ in by_label],
        support_ids=support_ids,
        query_ids=query_ids,
    )


@dataclass(frozen=True)
class SyntheticSpec:
    """Blocky random class prototypes plus Gaussian pixel noise."""

    image_size: tuple = (16, 16)
    channels: int = 1
    noise: float = 0.1
    # side of the constant-colour cells that make up a prototype
    cell: int = 4
    min_distance: float = 2.0

    def __post_init__(self):
        h, w = self.image_size
        if h % self.cell or w % self.cell:
            raise ConfigError(f"image_size {self.image_size} must be a multiple of cell {self.cell}")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")


def make_prototypes(spec, class_count, rng):
    h, w = spec.image_size
    gh, gw = h // spec.cell, w // spec.cell
    protos = []
    attempts = 0
    while len(protos) < class_count:
        attempts += 1
        if attempts > 1000 * class_count:
            raise DatasetError("could not draw well-separated prototypes; lower min_distance")
        grid = rng.random((gh, gw, spec.channels))
        p = np.kron(grid, np.ones((spec.cell, spec.cell, 1)))
        if all(np.linalg.norm(p - o) >= spec.min_distance for o in protos):
            protos.append(p)
    return protos


def generate_synthetic(spec, class_count, images_per_class, seed, split="train"):
    """In-memory dataset: images = clip(prototype + N(0, noise^2), 0, 1)."""
    if class_count < 2:
        raise ConfigError("synthetic dataset needs at least 2 classes")
    rng = np.random.default_rng(seed)
    protos = make_prototypes(spec, class_count, rng)
    refs = []
    for p in protos:
        imgs = []
        for _ in range(images_per_class):
            img = np.clip(p + spec.noise * rng.standard_normal(p.shape), 0.0, 1.0)
            img.setflags(write=False)
            imgs.append(img)
        refs.append(imgs)
    ids = [f"synthetic_{i:04d}" for i in range(class_count)]
    return DatasetHandle(ids, refs, spec.image_size + (spec.channels,), split)
