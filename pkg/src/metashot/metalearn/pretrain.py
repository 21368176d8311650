"""Prior-knowledge stage: supervised, Split-Brain or autoencoder pretraining."""

from __future__ import annotations

import numpy as np

from metashot.diffcore import ParamSet, Tensor, gradient, ops
from metashot.errors import DatasetError
from metashot.metalearn.engine import weight_names
from metashot.netmodels import (
    DropoutSampler,
    RepresentationHandle,
    autoencoder_forward,
    autoencoder_inputs,
    area_resize,
    backbone_forward,
    build_network,
    classifier_forward,
    splitbrain_forward,
    splitbrain_targets,
)
from metashot.netmodels.color import lab_planes
from metashot.netmodels.networks import pad_input

PRETRAIN_FIELDS = ("iteration", "loss", "accuracy")


class Adam:
    def __init__(self, params, b1=0.9, b2=0.999, eps=1e-8):
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m = {n: np.zeros(t.shape) for n, t in params.items()}
        self.v = {n: np.zeros(t.shape) for n, t in params.items()}
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        out = []
        for n, p in params.items():
            g = grads[n].data
            self.m[n] = self.b1 * self.m[n] + (1 - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (1 - self.b2) * g * g
            upd = lr * (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)
            out.append((n, Tensor(p.data - upd)))
        return ParamSet(out)


def _sgd(params, grads, lr):
    return ParamSet((n, Tensor(p.data - lr * grads[n].data)) for n, p in params.items())


def init_pretrain_params(objective, encoder, sb_config, num_classes, seed):
    """Encoder (+ auxiliary head or decoders) parameters for one objective."""
    if objective == "supervised":
        enc = build_network("representation", encoder, seed)
        aux = build_network("aux_head", (encoder.final_channels, num_classes), seed + 1)
        return enc.merge(aux)
    if objective == "splitbrain":
        return build_network("splitbrain", sb_config, seed)
    return build_network("autoencoder", sb_config, seed)


def pretrain_loss(objective, params, images, labels, encoder, sb_config, l2, dropout=None):
    """(loss tensor, accuracy or None) for one batch."""
    if objective == "supervised":
        gamma = backbone_forward(pad_input(images, encoder), params, "r", encoder)
        pooled = ops.flatten(ops.global_avg_pool(gamma))
        logits = classifier_forward(pooled, params, "au", 1, dropout)
        loss = ops.cross_entropy(logits, labels)
        acc = float(np.mean(np.argmax(logits.data, axis=1) == labels))
    elif objective == "splitbrain":
        x_l, x_ab = lab_planes(images)
        ab_t, l_t = splitbrain_targets(images, sb_config.target_resolution)
        ab_hat, l_hat, _, _ = splitbrain_forward(x_l, x_ab, params, sb_config)
        loss = ops.add(ops.mse(ab_hat, Tensor(ab_t)), ops.mse(l_hat, Tensor(l_t)))
        acc = None
    else:
        x = autoencoder_inputs(images)
        target = area_resize(x, sb_config.target_resolution)
        recon, _ = autoencoder_forward(pad_input(x, sb_config.encoder), params, sb_config)
        loss = ops.mse(recon, Tensor(target))
        acc = None
    if l2:
        for n in weight_names(params):
            loss = ops.add(loss, ops.mul(ops.tsum(ops.mul(params[n], params[n])), l2))
    return loss, acc


def representation_entries(objective, params):
    prefixes = ("l.", "ab.") if objective == "splitbrain" else ("r.",)
    return params.select(lambda n: n.startswith(prefixes))


def pretrain(params, handle, config, encoder, sb_config=None, seed=0, on_log=None, log_every=10):
    """Minimize the pretraining objective and return the frozen representation.

    Returns ``(RepresentationHandle, final params, metric rows)``. Rows are
    (iteration, loss, accuracy) with accuracy NaN for reconstruction
    objectives.
    """
    config.validate()
    obj = config.objective
    if obj == "splitbrain" and handle.channels != 3:
        raise DatasetError("Split-Brain pretraining needs colour (RGB) images")
    rng = np.random.default_rng(seed)
    opt = Adam(params) if config.optimizer == "adam" else None
    ids = handle.all_ids()
    rows = []
    for it in range(config.iterations):
        pick = rng.integers(0, len(ids), size=config.batch_size)
        batch = [ids[i] for i in pick]
        images = handle.images(batch)
        labels = np.array([c for c, _ in batch], dtype=np.int64)
        drop = DropoutSampler(rng, config.dropout_rate) if config.dropout_rate > 0 else None
        theta = params.detach(requires_grad=True)
        loss, acc = pretrain_loss(obj, theta, images, labels, encoder, sb_config, config.l2, drop)
        grads = gradient(loss, theta)
        lr = config.lr_at(it)
        params = opt.step(params, grads, lr) if opt is not None else _sgd(params, grads, lr)
        if log_every and (it + 1) % log_every == 0 or it == 0:
            row = (it + 1, loss.item(), float("nan") if acc is None else acc)
            rows.append(row)
            if on_log is not None:
                on_log(row)
    rep_encoder = encoder if obj != "splitbrain" else sb_config.encoder
    handle_out = RepresentationHandle(obj, representation_entries(obj, params), rep_encoder)
    return handle_out, params, rows


def training_accuracy(params, handle, encoder, batch=256):
    """Auxiliary-head accuracy over the whole dataset (eval mode, no dropout)."""
    ids = handle.all_ids()
    correct = 0
    for start in range(0, len(ids), batch):
        chunk = ids[start : start + batch]
        images = handle.images(chunk)
        labels = np.array([c for c, _ in chunk])
        gamma = backbone_forward(pad_input(images, encoder), params, "r", encoder)
        logits = classifier_forward(ops.flatten(ops.global_avg_pool(gamma)), params, "au", 1)
        correct += int(np.sum(np.argmax(logits.data, axis=1) == labels))
    return correct / len(ids)
