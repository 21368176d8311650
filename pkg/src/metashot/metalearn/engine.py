"""Inner updates, meta-gradients and the meta-training loop.

The inner update is theta' = theta - alpha * grad L_support(theta), repeated
``steps`` times with the same alpha. The meta-update descends the query loss
of theta' with respect to (theta, alpha); in second-order mode the inner
gradient itself is differentiated.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from metashot.diffcore import ParamSet, Tensor, gradient, no_grad, ops
from metashot.episodes import sample_episode
from metashot.errors import NonFiniteError, ShapeError
from metashot.netmodels import DropoutSampler, forward

ABP_PREFIXES = ("a.", "c.")


class MetaLearner:
    """A network spec bound to an optional frozen representation module.

    For RAML/URAML the representation encodes each episode once; only the
    ABP parameters are ever differentiated.
    """

    def __init__(self, spec, representation=None):
        self.spec = spec
        self.representation = representation
        if spec.variant == "raml_abp" and representation is None:
            raise ShapeError("learner", "raml_abp needs a representation module")

    def prepare(self, x):
        if self.representation is not None:
            return self.representation.encode(x)[1]
        return x

    def logits(self, inputs, params, dropout=None, return_features=False):
        return forward(inputs, params, self.spec, dropout=dropout, return_features=return_features)

    def inner_names(self, params, scope):
        if scope == "abp_only":
            return [n for n in params.names() if n.startswith(ABP_PREFIXES)]
        return params.names()


@dataclass
class TrainState:
    params: ParamSet
    alpha: ParamSet
    iteration: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    representation: object = None

    def copy(self):
        rng = np.random.default_rng()
        rng.bit_generator.state = self.rng.bit_generator.state
        return TrainState(
            self.params.detach(), self.alpha.detach(), self.iteration, rng, self.representation
        )


def init_alpha(params, names, value):
    return ParamSet((n, Tensor(np.full(params[n].shape, float(value)))) for n in names)


def init_state(learner, params, inner_cfg, seed):
    names = learner.inner_names(params, inner_cfg.scope)
    return TrainState(
        params.detach(),
        init_alpha(params, names, inner_cfg.alpha_init),
        0,
        np.random.default_rng(seed),
        learner.representation,
    )


def _adapt(learner, params, alpha, inputs, labels, inner_cfg, create_graph, dropout=None):
    """Return (theta', support loss before the first step)."""
    names = alpha.names()
    theta = params
    first = None
    for _ in range(inner_cfg.steps):
        loss = ops.cross_entropy(learner.logits(inputs, theta, dropout), labels)
        if first is None:
            first = loss
        g = gradient(loss, theta.subset(names), create_graph=create_graph)
        updated = ParamSet((n, ops.sub(theta[n], ops.mul(alpha[n], g[n]))) for n in names)
        theta = theta.merge(updated)
    return theta, first


def inner_update(learner, params, alpha, support_x, support_y, inner_cfg, create_graph=False, dropout=None):
    """theta' after ``inner_cfg.steps`` steps on the support set.

    Parameters outside alpha's names (the frozen or non-adapted ones) are
    returned unchanged. With ``create_graph`` theta' stays differentiable in
    (theta, alpha) through the inner gradient.
    """
    alpha_names = set(alpha.names())
    scoped = learner.inner_names(params, inner_cfg.scope)
    if set(scoped) != alpha_names:
        raise ShapeError("inner_update", "alpha is not congruent with the inner-update scope")
    for n in alpha.names():
        if alpha[n].shape != params[n].shape:
            raise ShapeError("inner_update", f"alpha[{n}] shape {alpha[n].shape} != {params[n].shape}")
    # leaf tensors without requires_grad would otherwise get a zero inner gradient
    params = params.map(lambda n, t: t if t.requires_grad else Tensor(t.data, requires_grad=True))
    theta, _ = _adapt(
        learner, params, alpha, learner.prepare(support_x), support_y, inner_cfg, create_graph, dropout
    )
    return theta


def weight_names(params):
    """Names subject to L1/L2 penalties: weight matrices and filters only."""
    return [n for n in params.names() if n.endswith(".w")]


def apply_regularization(loss, params, l1, l2):
    """loss + l1 * sum|w| + l2 * sum w^2 over weight tensors (no biases, no alpha)."""
    if l1 < 0 or l2 < 0:
        raise ValueError("regularization coefficients must be >= 0")
    out = loss if isinstance(loss, Tensor) else Tensor(loss)
    for n in weight_names(params):
        w = params[n]
        if l1:
            out = ops.add(out, ops.mul(ops.tsum(ops.abs_(w)), l1))
        if l2:
            out = ops.add(out, ops.mul(ops.tsum(ops.mul(w, w)), l2))
    return out


@dataclass
class StepStats:
    meta_loss: float
    support_loss: float
    query_accuracy: float


def _episode_gradient(learner, params, alpha, episode, inner_cfg, meta_cfg, scale, rng):
    theta = params.detach(requires_grad=True)
    a = alpha.detach(requires_grad=True)
    drop = DropoutSampler(rng, meta_cfg.dropout_rate) if meta_cfg.dropout_rate > 0 and rng is not None else None
    inner_drop = drop if inner_cfg.dropout_in_inner else None
    s_in = learner.prepare(episode.support_x)
    q_in = learner.prepare(episode.query_x)
    adapted, s_loss = _adapt(
        learner, theta, a, s_in, episode.support_y, inner_cfg, meta_cfg.second_order, inner_drop
    )
    logits = learner.logits(q_in, adapted, drop)
    q_loss = ops.cross_entropy(logits, episode.query_y)
    target = ops.mul(q_loss, scale)
    wrt = ParamSet(theta.items() + [("alpha:" + n, t) for n, t in a.items()])
    g = gradient(target, wrt)
    acc = float(np.mean(np.argmax(logits.data, axis=1) == episode.query_y))
    g_theta = ParamSet((n, g[n]) for n in theta.names())
    g_alpha = ParamSet((n, g["alpha:" + n]) for n in a.names())
    return g_theta, g_alpha, q_loss.item(), s_loss.item(), acc


def meta_gradient(learner, state, episodes, inner_cfg, meta_cfg, rngs=None, threads=1):
    """Gradient of mean query loss (+ regularization) w.r.t. (theta, alpha).

    Per-episode gradients are reduced in episode-index order, so the result
    does not depend on ``threads``. ``rngs`` supplies one dropout Generator per
    episode (None disables dropout).
    """
    b = len(episodes)
    if rngs is None:
        rngs = [None] * b
    scale = 1.0 / b

    def job(i):
        return _episode_gradient(learner, state.params, state.alpha, episodes[i], inner_cfg, meta_cfg, scale, rngs[i])

    if threads > 1 and b > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, range(b)))
    else:
        results = [job(i) for i in range(b)]
    g_theta = {n: np.zeros(t.shape) for n, t in state.params.items()}
    g_alpha = {n: np.zeros(t.shape) for n, t in state.alpha.items()}
    q_losses, s_losses, accs = [], [], []
    for gt, ga, ql, sl, acc in results:
        for n in g_theta:
            g_theta[n] = g_theta[n] + gt[n].data
        for n in g_alpha:
            g_alpha[n] = g_alpha[n] + ga[n].data
        q_losses.append(ql)
        s_losses.append(sl)
        accs.append(acc)
    theta = state.params.detach(requires_grad=True)
    reg = apply_regularization(0.0, theta, meta_cfg.l1, meta_cfg.l2)
    if reg.requires_grad:
        rg = gradient(reg, theta)
        for n in g_theta:
            g_theta[n] = g_theta[n] + rg[n].data
    meta_loss = float(np.mean(q_losses)) + reg.item()
    if not np.isfinite(meta_loss):
        raise NonFiniteError("meta_loss", f"iteration {state.iteration}")
    for n, g in list(g_theta.items()) + list(g_alpha.items()):
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"meta_gradient[{n}]", f"iteration {state.iteration}")
    stats = StepStats(meta_loss, float(np.mean(s_losses)), float(np.mean(accs)))
    return ParamSet(g_theta), ParamSet(g_alpha), stats


def meta_step(learner, state, episodes, inner_cfg, meta_cfg, rngs=None, threads=1):
    """(theta, alpha) <- (theta, alpha) - beta * meta-gradient; plain gradient descent."""
    if len(episodes) != meta_cfg.meta_batch:
        raise ShapeError("meta_step", f"got {len(episodes)} episodes, meta_batch is {meta_cfg.meta_batch}")
    try:
        g_theta, g_alpha, stats = meta_gradient(learner, state, episodes, inner_cfg, meta_cfg, rngs, threads)
    except NonFiniteError as exc:
        raise NonFiniteError(exc.node, f"iteration {state.iteration}") from None
    beta = meta_cfg.beta_at(state.iteration)
    params = ParamSet((n, Tensor(t.data - beta * g_theta[n].data)) for n, t in state.params.items())
    if inner_cfg.alpha_trainable:
        alpha = ParamSet((n, Tensor(t.data - beta * g_alpha[n].data)) for n, t in state.alpha.items())
    else:
        alpha = state.alpha
    new = TrainState(params, alpha, state.iteration + 1, state.rng, state.representation)
    return new, stats


def draw_batch(handle, episode_spec, meta_cfg, rng, start_id=0):
    """Sample a meta-batch plus one dropout Generator per episode from ``rng``."""
    episodes = [sample_episode(handle, episode_spec, rng, start_id + i) for i in range(meta_cfg.meta_batch)]
    seeds = rng.integers(0, 2**63 - 1, size=meta_cfg.meta_batch)
    rngs = [np.random.default_rng(int(s)) for s in seeds]
    return episodes, rngs


METRIC_FIELDS = ("iteration", "meta_loss", "support_loss_mean", "query_accuracy_mean")


def meta_train(
    learner,
    state,
    handle,
    episode_spec,
    inner_cfg,
    meta_cfg,
    iterations=None,
    log_every=10,
    on_log=None,
    checkpoint_every=0,
    on_checkpoint=None,
    threads=1,
):
    """Run meta_step until ``state.iteration`` reaches ``iterations``.

    Returns the final state and the metric rows logged every ``log_every``
    iterations (the row for iteration t is recorded after step t completes).
    """
    total = meta_cfg.iterations if iterations is None else iterations
    rows = []
    while state.iteration < total:
        it = state.iteration
        episodes, rngs = draw_batch(handle, episode_spec, meta_cfg, state.rng, it * meta_cfg.meta_batch)
        state, stats = meta_step(learner, state, episodes, inner_cfg, meta_cfg, rngs, threads)
        if log_every and state.iteration % log_every == 0:
            row = (state.iteration, stats.meta_loss, stats.support_loss, stats.query_accuracy)
            rows.append(row)
            if on_log is not None:
                on_log(row)
        if checkpoint_every and on_checkpoint is not None and state.iteration % checkpoint_every == 0:
            on_checkpoint(state)
    return state, rows


def adapt_and_predict(learner, params, alpha, episode, inner_cfg, return_features=False):
    """Evaluation path: inner update without dropout, then query logits (numpy)."""
    s_in = learner.prepare(episode.support_x)
    adapted, _ = _adapt(
        learner, params.detach(requires_grad=True), alpha, s_in, episode.support_y, inner_cfg, False
    )
    with no_grad():
        q_in = learner.prepare(episode.query_x)
        out = learner.logits(q_in, adapted.detach(), None, return_features=return_features)
    if return_features:
        logits, feats = out
        return logits.data, feats, adapted.detach()
    return out.data
