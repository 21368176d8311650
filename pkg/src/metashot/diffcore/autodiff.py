"""Graph-level entry points: evaluation, gradients and the finite-difference oracle."""

from __future__ import annotations

import numpy as np

from metashot.diffcore.params import ParamSet
from metashot.diffcore.tensor import Tensor, as_tensor, grad, no_grad
from metashot.errors import GradientError


def evaluate(graph, bindings):
    """Run ``graph`` (a callable over a ParamSet) on ``bindings`` and return its value.

    Shape violations and non-finite intermediates surface as ShapeError /
    NonFiniteError naming the offending node.
    """
    return as_tensor(graph(bindings))


def gradient(scalar, wrt, create_graph=False):
    """Gradient of a scalar tensor with respect to every entry of ``wrt``.

    Returns a ParamSet congruent to ``wrt``. Parameters the scalar does not
    depend on get zero gradients.
    """
    scalar = as_tensor(scalar)
    if scalar.size != 1:
        raise GradientError(f"gradient needs a scalar root, got shape {scalar.shape}")
    gs = grad(scalar, wrt.tensors(), create_graph=create_graph)
    return ParamSet(zip(wrt.names(), gs))


def value_and_gradient(graph, bindings, create_graph=False):
    params = bindings.map(lambda n, t: t if t.requires_grad else Tensor(t.data, requires_grad=True))
    out = evaluate(graph, params)
    return out, gradient(out, params, create_graph=create_graph)


def finite_difference_gradient(graph, wrt, step=1e-6, bindings=None, nested=False):
    """Central-difference estimate (f(p+h) - f(p-h)) / 2h for every element of ``wrt``.

    ``graph`` maps a ParamSet to a scalar. ``bindings`` holds any extra
    tensors the graph needs that are not being perturbed. Set ``nested`` when
    the graph takes gradients internally (e.g. an inner update): the
    perturbed tensors then require grad and graph recording stays on.
    """
    if step <= 0:
        raise ValueError("finite-difference step must be positive")
    base = bindings if bindings is not None else ParamSet()
    arrays = {n: t.data.copy() for n, t in wrt.items()}

    def f():
        ps = base.merge(ParamSet((n, Tensor(a.copy(), requires_grad=nested)) for n, a in arrays.items()))
        if nested:
            return evaluate(graph, ps).item()
        with no_grad():
            return evaluate(graph, ps).item()

    out = []
    for name, a in arrays.items():
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f()
            flat[i] = orig - step
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * step)
        out.append((name, Tensor(g)))
    return ParamSet(out)


def relative_error(a, b):
    """max |a - b| / max(max |a|, max |b|) across all entries of two ParamSets."""
    num = max(float(np.max(np.abs(a[k].data - b[k].data), initial=0.0)) for k in a)
    den = max(
        max(float(np.max(np.abs(a[k].data), initial=0.0)), float(np.max(np.abs(b[k].data), initial=0.0)))
        for k in a
    )
    if den == 0.0:
        return num
    return num / den
