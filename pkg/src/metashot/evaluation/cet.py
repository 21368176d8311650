"""Cross-entropy across tasks: how much a K-shot-trained learner over-fits its shot count.

For each test shot J the accuracies of the five trained models form a_J,
d_J = softmax(a_J / tau), and L sums the cross-entropies of all 20 ordered
pairs (i, j), i != j. Lower L means the accuracy profile looks the same no
matter which shot count the test uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from metashot.errors import ConfigError

LITERAL = "max"


def task_distribution(a, tau=1.0):
    """softmax(a / tau) over percentage accuracies; ``tau="max"`` uses tau = max(a)."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 1 or a.size == 0:
        raise ConfigError("task_distribution needs a non-empty accuracy vector")
    if np.any(~np.isfinite(a)) or np.any(a < 0) or np.any(a > 100):
        raise ConfigError("accuracies must be percentages in [0, 100]")
    if isinstance(tau, str):
        if tau != LITERAL:
            raise ConfigError(f"tau must be a positive number or {LITERAL!r}, got {tau!r}")
        t = float(a.max())
    else:
        t = float(tau)
    if not t > 0:
        raise ConfigError(f"tau must be positive, got {t}")
    z = a / t
    e = np.exp(z - z.max())
    return e / e.sum()


def cross_entropy(d_i, d_j):
    """-sum_k d_i[k] ln d_j[k]."""
    d_i = np.asarray(d_i, dtype=np.float64)
    d_j = np.asarray(d_j, dtype=np.float64)
    if d_i.shape != d_j.shape:
        raise ConfigError(f"distributions differ in length: {d_i.shape} vs {d_j.shape}")
    if np.any(d_j <= 0):
        raise ConfigError("cross_entropy is undefined when d_j has a zero entry")
    return float(-np.sum(d_i * np.log(d_j)))


def entropy(d):
    return cross_entropy(d, d)


@dataclass
class CETReport:
    tau: object
    d: dict
    l: dict
    L: float

    def to_dict(self):
        return {
            "tau": self.tau,
            "d": {str(k): [float(x) for x in v] for k, v in self.d.items()},
            "l": {f"{i},{j}": v for (i, j), v in self.l.items()},
            "L": self.L,
        }


def cet(matrix, tau=1.0):
    shots = matrix.shots
    d = {j: task_distribution(matrix.test_vector(j), tau) for j in shots}
    l = {}
    total = 0.0
    for i in shots:
        for j in shots:
            if i != j:
                l[(i, j)] = cross_entropy(d[i], d[j])
                total += l[(i, j)]
    return CETReport(tau, d, l, total)
