"""Feature-space dispersion statistics and channel-mean heat-maps."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from metashot.errors import ConfigError, ShapeError
from metashot.metalearn.engine import adapt_and_predict


@dataclass(frozen=True)
class FeatureStats:
    D1: float
    D2: float

    def to_dict(self):
        return {"D1": self.D1, "D2": self.D2}


def feature_distances(features, labels):
    """D1: mean distance of members to their class centroid, averaged over classes.
    D2: mean Euclidean distance over all pairs of class centroids.
    """
    x = np.asarray(features, dtype=np.float64)
    x = x.reshape(x.shape[0], -1)
    labels = np.asarray(labels)
    if len(labels) != len(x):
        raise ShapeError("features", f"{len(x)} feature vectors but {len(labels)} labels")
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ConfigError("feature_distances needs at least two classes (D2 is undefined otherwise)")
    centroids = []
    d1 = []
    for c in classes:
        members = x[labels == c]
        mu = members.mean(axis=0)
        centroids.append(mu)
        d1.append(np.linalg.norm(members - mu, axis=1).mean())
    cen = np.stack(centroids)
    i, j = np.triu_indices(len(cen), k=1)
    d2 = np.linalg.norm(cen[i] - cen[j], axis=1).mean()
    return FeatureStats(float(np.mean(d1)), float(d2))


def episode_features(learner, params, alpha, episode, inner_cfg):
    """Query features before and after attention for the adapted learner."""
    _, feats, _ = adapt_and_predict(learner, params, alpha, episode, inner_cfg, return_features=True)
    return feats["gamma"].data, feats["gamma_alpha"].data


def channel_mean(gamma):
    g = np.asarray(gamma.data if hasattr(gamma, "data") else gamma, dtype=np.float64)
    if g.ndim != 4 or g.shape[3] < 1:
        raise ShapeError("heatmap", f"expected (b, h, w, c) feature maps, got {g.shape}")
    return g.mean(axis=3)


def heatmap(gamma):
    """Per-image channel mean, min-max scaled to [0, 1]; constant maps become zeros."""
    m = channel_mean(gamma)
    lo = m.min(axis=(1, 2), keepdims=True)
    span = m.max(axis=(1, 2), keepdims=True) - lo
    out = np.zeros_like(m)
    ok = span[:, 0, 0] > 0
    out[ok] = (m[ok] - lo[ok]) / span[ok]
    return out


def save_heatmaps(maps, directory, task, kind):
    """Write each map as a 16-bit grayscale PNG named ``{task}_{index}_{kind}.png``."""
    if kind not in ("gamma", "gamma_alpha"):
        raise ConfigError(f"heat-map kind must be gamma or gamma_alpha, got {kind!r}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, m in enumerate(np.asarray(maps)):
        px = np.round(np.clip(m, 0.0, 1.0) * 65535.0).astype(np.uint16)
        p = directory / f"{task}_{i}_{kind}.png"
        Image.fromarray(px).save(p)
        paths.append(p)
    return paths


def read_heatmap(path):
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / 65535.0
