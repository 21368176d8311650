"""Stage execution: each subcommand reads inputs, checks prerequisites, then computes.

All prerequisite checks (method/stage compatibility, required checkpoints,
colour data for Split-Brain) happen before any training or evaluation
starts, so a misordered invocation fails fast and writes nothing but the
error.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from metashot.diffcore import ParamSet
from metashot.cli.checkpoint import Checkpoint, load_checkpoint, restore_rng, rng_state, save_checkpoint
from metashot.episodes import generate_synthetic, load_dataset, sample_episode
from metashot.errors import CheckpointError, DatasetError, StageError
from metashot.evaluation import (
    AccuracyMatrix,
    ModelPredictor,
    OraclePredictor,
    cet,
    cross_test,
    episode_features,
    evaluate_tasks,
    feature_distances,
    heatmap,
    save_heatmaps,
    summarize,
    task_rng,
)
from metashot.metalearn import (
    METRIC_FIELDS,
    PRETRAIN_FIELDS,
    MetaLearner,
    TrainState,
    adapt_and_predict,
    init_pretrain_params,
    init_state,
    meta_train,
    pretrain,
    training_accuracy,
)
from metashot.netmodels import RepresentationHandle, build_network

log = logging.getLogger("metashot")

SUBCOMMANDS = ("pretrain", "meta-train", "evaluate", "cross-test", "cet", "features", "heatmap")
LOCK_NAME = "run.lock"
REPRESENTATION_FILE = "representation.ckpt"
CHECKPOINT_FILE = "checkpoint.ckpt"
METRICS_FILE = "metrics.csv"
MATRIX_FILE = "accuracy_matrix.csv"


# ------------------------------------------------------------------ run directory


@contextmanager
def run_lock(run_dir):
    """Exclusive ownership of a run directory for the duration of one command."""
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise StageError(
            f"run directory {run_dir} is locked by another process "
            f"(delete {lock} if that process is gone)"
        ) from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield run_dir
    finally:
        lock.unlink(missing_ok=True)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_rows(path, fields, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def append_rows(path, rows):
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ------------------------------------------------------------------ inputs


def load_data(cfg):
    """(train handle, held-out handle); held-out classes never appear in training."""
    if cfg["dataset.kind"] == "synthetic":
        data = generate_synthetic(
            cfg.synthetic_spec(),
            cfg["dataset.synthetic.classes"],
            cfg["dataset.synthetic.images_per_class"],
            cfg["dataset.synthetic.seed"],
        )
        n_train = data.num_classes - cfg["dataset.synthetic.eval_classes"]
        return data.subset(range(n_train), "train"), data.subset(range(n_train, data.num_classes), "test")
    kw = dict(
        manifest=cfg["dataset.manifest"] or None,
        nested=cfg["dataset.nested"],
        resize=cfg["dataset.resize"] or None,
    )
    train = load_dataset(cfg["dataset.path"], split="train", **kw)
    if cfg["dataset.eval_path"]:
        test = load_dataset(cfg["dataset.eval_path"], split="test", **kw)
    else:
        test = train
    return train, test


def _uses_representation(cfg):
    return cfg.method in ("raml", "uraml")


def representation_path(cfg, run_dir):
    if cfg["representation.checkpoint"]:
        return Path(cfg["representation.checkpoint"])
    return run_dir / REPRESENTATION_FILE


def require_representation(cfg, run_dir, stage):
    path = representation_path(cfg, run_dir)
    if not path.is_file():
        raise StageError(
            f"{stage} for {cfg.method} needs a pretrained representation at {path}; "
            "run `metashot pretrain` first or set representation.checkpoint"
        )
    return path


def require_checkpoint(run_dir, stage):
    path = run_dir / CHECKPOINT_FILE
    if not path.is_file():
        raise StageError(f"{stage} needs a meta-trained checkpoint at {path}; run `metashot meta-train` first")
    return path


def load_representation(cfg, path, image_shape):
    ck = load_checkpoint(path)
    if ck.extra.get("kind") != "representation":
        raise CheckpointError(f"{path} is not a representation checkpoint")
    mode = ck.extra["mode"]
    return RepresentationHandle(mode, ck.group("rep"), cfg.backbone(image_shape))


def build_learner(cfg, image_shape, representation=None):
    if _uses_representation(cfg):
        spec = cfg.network_spec(image_shape, representation.feature_dim)
        return MetaLearner(spec, representation), spec
    spec = cfg.network_spec(image_shape)
    return MetaLearner(spec), spec


def _init_params(cfg, spec):
    kind = "abp" if spec.variant == "raml_abp" else spec.variant
    return build_network(kind, spec, cfg["seed"])


def meta_checkpoint(cfg, state, shots, representation=None):
    groups = {"theta": state.params, "alpha": state.alpha}
    extra = {"kind": "meta", "shots": shots}
    if representation is not None:
        groups["rep"] = representation.params
        extra["rep_mode"] = representation.mode
    return Checkpoint(cfg.method, state.iteration, groups, rng_state(state.rng), cfg.digest(), extra)


def oracle_checkpoint(cfg, shots=None):
    """A stub checkpoint whose predictor reads the query labels (for wiring tests)."""
    return Checkpoint("oracle", 0, {}, None, cfg.digest(), {"kind": "meta", "shots": shots or cfg["episode.shots"]})


def predictor_from_checkpoint(cfg, ck, image_shape):
    if ck.method == "oracle":
        return OraclePredictor(), None, None
    if ck.extra.get("kind") != "meta":
        raise CheckpointError("expected a meta-trained checkpoint")
    if ck.method != cfg.method:
        raise CheckpointError(f"checkpoint was trained with method {ck.method}, config says {cfg.method}")
    rep = None
    if "rep" in ck.groups:
        rep = RepresentationHandle(ck.extra["rep_mode"], ck.group("rep"), cfg.backbone(image_shape))
    learner, _ = build_learner(cfg, image_shape, rep)
    theta, alpha = ck.group("theta"), ck.groups.get("alpha")
    if alpha is None:
        alpha = ParamSet()
    return ModelPredictor(learner, theta, alpha, cfg.inner()), learner, (theta, alpha)


# ------------------------------------------------------------------ stages


def stage_pretrain(cfg, run_dir):
    if not _uses_representation(cfg):
        raise StageError(f"pretrain applies to raml/uraml only; method is {cfg.method}")
    pcfg = cfg.pretrain()
    train, _ = load_data(cfg)
    shape = train.image_shape
    if pcfg.objective == "splitbrain" and shape[2] != 3:
        raise DatasetError("Split-Brain pretraining needs colour (RGB) images")
    encoder = cfg.backbone(shape)
    sb = cfg.splitbrain(shape) if pcfg.objective in ("splitbrain", "autoencoder") else None
    params = init_pretrain_params(pcfg.objective, encoder, sb, train.num_classes, cfg["seed"])
    rows_path = run_dir / "pretrain_metrics.csv"
    write_rows(rows_path, PRETRAIN_FIELDS, [])

    def on_log(row):
        append_rows(rows_path, [row])
        log.info("pretrain %s", row)

    rep, final, rows = pretrain(
        params, train, pcfg, encoder, sb, cfg["seed"] + 1, on_log, cfg["pretrain.log_every"]
    )
    ck = Checkpoint(
        cfg.method, pcfg.iterations, {"rep": rep.params}, None, cfg.digest(),
        {"kind": "representation", "mode": rep.mode},
    )
    save_checkpoint(run_dir / REPRESENTATION_FILE, ck)
    report = {"objective": pcfg.objective, "iterations": pcfg.iterations, "feature_dim": rep.feature_dim}
    if rows:
        report["first_loss"] = rows[0][1]
        report["final_loss"] = rows[-1][1]
    if pcfg.objective == "supervised":
        report["training_accuracy"] = training_accuracy(final, train, encoder)
    write_json(run_dir / "pretrain_report.json", report)
    return report


def _train_one(cfg, run_dir, ckpt_path, metrics_path, shots, train, rep, threads):
    """Meta-train (or resume) one learner; returns the final TrainState."""
    learner, spec = build_learner(cfg, train.image_shape, rep)
    inner, meta = cfg.inner(), cfg.meta()
    episode_spec = cfg.episode_spec(shots)
    digest = cfg.digest()
    if ckpt_path.is_file():
        ck = load_checkpoint(ckpt_path)
        if ck.config_digest != digest:
            raise CheckpointError(
                f"{ckpt_path} was written under a different configuration "
                f"(digest {ck.config_digest[:12]} vs {digest[:12]}); refusing to resume"
            )
        if rep is not None and not ck.group("rep").equal(rep.params):
            raise CheckpointError(f"{ckpt_path} was trained on a different representation")
        state = TrainState(ck.group("theta"), ck.group("alpha"), ck.iteration, restore_rng(ck.rng_state), rep)
        kept = []
        if metrics_path.is_file():
            with open(metrics_path, newline="") as fh:
                kept = [r for r in list(csv.reader(fh))[1:] if r and int(r[0]) <= ck.iteration]
        with open(metrics_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRIC_FIELDS)
            w.writerows(kept)
        log.info("resuming %s at iteration %d", ckpt_path, ck.iteration)
    else:
        params = _init_params(cfg, spec)
        state = init_state(learner, params, inner, cfg["seed"] + 1)
        write_rows(metrics_path, METRIC_FIELDS, [])

    def on_log(row):
        append_rows(metrics_path, [row])
        log.info("meta-train K=%d %s", shots, row)

    def on_checkpoint(s):
        save_checkpoint(ckpt_path, meta_checkpoint(cfg, s, shots, rep))

    state, _ = meta_train(
        learner, state, train, episode_spec, inner, meta,
        log_every=cfg["meta.log_every"], on_log=on_log,
        checkpoint_every=cfg["meta.checkpoint_every"], on_checkpoint=on_checkpoint,
        threads=threads,
    )
    save_checkpoint(ckpt_path, meta_checkpoint(cfg, state, shots, rep))
    return state


def stage_meta_train(cfg, run_dir):
    rep_path = require_representation(cfg, run_dir, "meta-train") if _uses_representation(cfg) else None
    train, _ = load_data(cfg)
    rep = load_representation(cfg, rep_path, train.image_shape) if rep_path else None
    state = _train_one(
        cfg, run_dir, run_dir / CHECKPOINT_FILE, run_dir / METRICS_FILE,
        cfg["episode.shots"], train, rep, cfg["threads"],
    )
    report = {"iteration": state.iteration, "method": cfg.method, "shots": cfg["episode.shots"]}
    write_json(run_dir / "meta_report.json", report)
    return report


def stage_evaluate(cfg, run_dir):
    path = require_checkpoint(run_dir, "evaluate")
    ck = load_checkpoint(path)
    _, test = load_data(cfg)
    predictor, _, _ = predictor_from_checkpoint(cfg, ck, test.image_shape)
    spec = cfg.episode_spec()
    accs = evaluate_tasks(predictor, test, spec, cfg["eval.task_count"], cfg["seed"], cfg["threads"])
    rep = summarize(accs)
    write_rows(run_dir / "eval_accuracies.csv", ("task", "accuracy"), list(enumerate(rep.accuracies)))
    out = {"method": ck.method, "ways": spec.ways, "shots": spec.shots, **rep.to_dict()}
    out.pop("accuracies")
    write_json(run_dir / "eval_report.json", out)
    return out


def stage_cross_test(cfg, run_dir):
    shots = tuple(cfg["eval.test_shots"])
    if shots != (1, 3, 5, 7, 9):
        raise StageError("cross-test needs eval.test_shots = 1,3,5,7,9")
    rep_path = require_representation(cfg, run_dir, "cross-test") if _uses_representation(cfg) else None
    train, test = load_data(cfg)
    rep = load_representation(cfg, rep_path, train.image_shape) if rep_path else None
    ck_dir = run_dir / "cross"
    ck_dir.mkdir(exist_ok=True)
    predictors = {}
    for k in shots:
        state = _train_one(
            cfg, run_dir, ck_dir / f"K{k}.ckpt", ck_dir / f"metrics_K{k}.csv", k, train, rep, cfg["threads"]
        )
        learner, _ = build_learner(cfg, train.image_shape, rep)
        predictors[k] = ModelPredictor(learner, state.params, state.alpha, cfg.inner())
    matrix = cross_test(
        predictors, test, cfg["episode.ways"], cfg["episode.queries"],
        cfg["eval.task_count"], cfg["seed"], cfg["threads"], shots,
    )
    matrix.save(run_dir / MATRIX_FILE)
    return {"matrix": matrix.values.tolist()}


def stage_cet(cfg, run_dir):
    path = Path(cfg["cet.matrix"]) if cfg["cet.matrix"] else run_dir / MATRIX_FILE
    if not path.is_file():
        raise StageError(f"cet needs an accuracy matrix at {path}; run `metashot cross-test` or set cet.matrix")
    matrix = AccuracyMatrix.load(path)
    report = cet(matrix, cfg["cet.tau"]).to_dict()
    write_json(run_dir / "cet_report.json", report)
    return report


def _model_for_diagnostics(cfg, run_dir, stage):
    path = require_checkpoint(run_dir, stage)
    ck = load_checkpoint(path)
    if ck.method == "oracle":
        raise StageError(f"{stage} needs a trained network; the checkpoint is an oracle stub")
    _, test = load_data(cfg)
    _, learner, (theta, alpha) = predictor_from_checkpoint(cfg, ck, test.image_shape)
    return test, learner, theta, alpha


def stage_features(cfg, run_dir):
    test, learner, theta, alpha = _model_for_diagnostics(cfg, run_dir, "features")
    spec, inner = cfg.episode_spec(), cfg.inner()
    rows = []
    for t in range(cfg["eval.feature_tasks"]):
        ep = sample_episode(test, spec, task_rng(cfg["seed"], t), t)
        g, ga = episode_features(learner, theta, alpha, ep, inner)
        s, sa = feature_distances(g, ep.query_y), feature_distances(ga, ep.query_y)
        rows.append((t, s.D1, s.D2, sa.D1, sa.D2))
    write_rows(run_dir / "features.csv", ("task", "D1_gamma", "D2_gamma", "D1_gamma_alpha", "D2_gamma_alpha"), rows)
    a = np.array([r[1:] for r in rows])
    means = a.mean(axis=0)
    report = {
        "tasks": len(rows),
        "gamma": {"D1": float(means[0]), "D2": float(means[1])},
        "gamma_alpha": {"D1": float(means[2]), "D2": float(means[3])},
    }
    write_json(run_dir / "features_report.json", report)
    return report


def stage_heatmap(cfg, run_dir):
    test, learner, theta, alpha = _model_for_diagnostics(cfg, run_dir, "heatmap")
    spec, inner = cfg.episode_spec(), cfg.inner()
    out_dir = run_dir / "heatmaps"
    files = []
    for t in range(cfg["eval.heatmap_tasks"]):
        ep = sample_episode(test, spec, task_rng(cfg["seed"], t), t)
        _, feats, _ = adapt_and_predict(learner, theta, alpha, ep, inner, return_features=True)
        if learner.representation is not None:
            # the ABP module sees pooled features; show the encoder maps it gates
            maps, _ = learner.representation.encode(ep.query_x)
            gamma, gamma_alpha = maps, maps * feats["mask"].data
        else:
            gamma, gamma_alpha = feats["gamma"].data, feats["gamma_alpha"].data
        files += save_heatmaps(heatmap(gamma), out_dir, t, "gamma")
        files += save_heatmaps(heatmap(gamma_alpha), out_dir, t, "gamma_alpha")
    report = {"files": [p.name for p in files]}
    write_json(run_dir / "heatmap_report.json", report)
    return report


STAGES = {
    "pretrain": stage_pretrain,
    "meta-train": stage_meta_train,
    "evaluate": stage_evaluate,
    "cross-test": stage_cross_test,
    "cet": stage_cet,
    "features": stage_features,
    "heatmap": stage_heatmap,
}


def execute(subcommand, cfg, run_dir=None):
    """Run one subcommand under the run-directory lock; returns its report dict."""
    if subcommand not in STAGES:
        raise StageError(f"unknown subcommand {subcommand!r}; choose from {', '.join(SUBCOMMANDS)}")
    run_dir = Path(run_dir) if run_dir is not None else cfg.output_dir()
    with run_lock(run_dir):
        (run_dir / f"{subcommand}.config").write_text(cfg.emit())
        return STAGES[subcommand](cfg, run_dir)
