"""Flat ``key = value`` run configuration with a typed schema and defaults.

Keys are dotted (``meta.beta = 0.001``). A ``[section]`` line prefixes the
keys below it, so ``[meta]`` followed by ``beta = 0.001`` is the same key.
``#`` starts a comment. Lists are comma separated.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

from metashot.episodes import EpisodeSpec, SyntheticSpec
from metashot.errors import ConfigError
from metashot.metalearn import InnerLoopConfig, MetaConfig, PretrainConfig
from metashot.netmodels import AttentionConfig, BackboneConfig, HeadConfig, NetworkSpec, SplitBrainConfig

METHODS = ("aml", "aml_minus_attention", "raml", "uraml")
REQUIRED = object()
OUTPUT_ROOT_ENV = "METASHOT_OUTPUT_ROOT"


@dataclass(frozen=True)
class Field:
    kind: str  # str | int | float | bool | ints | tau
    default: object
    choices: tuple = ()
    minimum: float | None = None


def _f(kind, default, choices=(), minimum=None):
    return Field(kind, default, tuple(choices), minimum)


SCHEMA = {
    "method": _f("str", REQUIRED, METHODS),
    "seed": _f("int", 0, minimum=0),
    "threads": _f("int", 1, minimum=1),
    "output": _f("str", ""),
    "dataset.kind": _f("str", "path", ("path", "synthetic")),
    "dataset.path": _f("str", ""),
    "dataset.eval_path": _f("str", ""),
    "dataset.manifest": _f("str", ""),
    "dataset.nested": _f("bool", False),
    "dataset.resize": _f("ints", ()),
    "dataset.synthetic.classes": _f("int", 40, minimum=2),
    "dataset.synthetic.eval_classes": _f("int", 10, minimum=2),
    "dataset.synthetic.images_per_class": _f("int", 30, minimum=1),
    "dataset.synthetic.size": _f("int", 16, minimum=1),
    "dataset.synthetic.channels": _f("int", 1, (1, 3)),
    "dataset.synthetic.noise": _f("float", 0.1, minimum=0.0),
    "dataset.synthetic.cell": _f("int", 4, minimum=1),
    "dataset.synthetic.seed": _f("int", 0, minimum=0),
    "episode.ways": _f("int", REQUIRED, minimum=2),
    "episode.shots": _f("int", REQUIRED, minimum=1),
    "episode.queries": _f("int", 15, minimum=1),
    "backbone.conv_blocks": _f("int", 4, minimum=1),
    "backbone.channels": _f("int", 64, minimum=1),
    "backbone.kernel": _f("int", 3, minimum=1),
    "backbone.bn_before_relu": _f("bool", True),
    "attention.bias": _f("bool", True),
    # 0 picks the method default: one layer for AML, two for the ABP module
    "head.fc_layers": _f("int", 0, (0, 1, 2)),
    "head.hidden": _f("int", 128, minimum=1),
    "inner.steps": _f("int", 1, minimum=1),
    "inner.alpha_init": _f("float", 0.01, minimum=0.0),
    "inner.alpha_trainable": _f("bool", True),
    "inner.scope": _f("str", "all", ("all", "abp_only")),
    "inner.dropout": _f("bool", True),
    "meta.beta": _f("float", 0.001, minimum=0.0),
    "meta.beta_final": _f("float", 0.0001, minimum=0.0),
    "meta.decay_after": _f("int", 30000, minimum=0),
    "meta.meta_batch": _f("int", 4, minimum=1),
    "meta.iterations": _f("int", 60000, minimum=0),
    "meta.second_order": _f("bool", True),
    "meta.dropout": _f("float", 0.2, minimum=0.0),
    "meta.l1": _f("float", 0.001, minimum=0.0),
    "meta.l2": _f("float", 0.00001, minimum=0.0),
    "meta.log_every": _f("int", 10, minimum=1),
    "meta.checkpoint_every": _f("int", 1000, minimum=0),
    # empty picks the method default: supervised for raml, splitbrain for uraml
    "pretrain.objective": _f("str", "", ("", "supervised", "splitbrain", "autoencoder")),
    "pretrain.batch_size": _f("int", 256, minimum=1),
    "pretrain.lr": _f("float", 0.001, minimum=0.0),
    "pretrain.lr_final": _f("float", 0.0001, minimum=0.0),
    "pretrain.decay_after": _f("int", 30000, minimum=0),
    "pretrain.l2": _f("float", 0.00001, minimum=0.0),
    "pretrain.dropout": _f("float", 0.2, minimum=0.0),
    "pretrain.iterations": _f("int", 60000, minimum=0),
    "pretrain.optimizer": _f("str", "adam", ("adam", "sgd")),
    "pretrain.log_every": _f("int", 10, minimum=1),
    "splitbrain.decoder_widths": _f("ints", (1024, 512, 256)),
    "splitbrain.target_resolution": _f("int", 11, minimum=1),
    "representation.checkpoint": _f("str", ""),
    "eval.task_count": _f("int", 600, minimum=1),
    "eval.test_shots": _f("ints", (1, 3, 5, 7, 9)),
    "eval.feature_tasks": _f("int", 100, minimum=1),
    "eval.heatmap_tasks": _f("int", 1, minimum=1),
    "cet.tau": _f("tau", 1.0),
    "cet.matrix": _f("str", ""),
}

# keys that may change between a run and its resume without invalidating it
RESUMABLE_KEYS = {
    "threads",
    "output",
    "meta.iterations",
    "meta.log_every",
    "meta.checkpoint_every",
    "pretrain.log_every",
    "representation.checkpoint",
}
RESUMABLE_PREFIXES = ("eval.", "cet.")


def _coerce(key, field, raw):
    text = raw.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        text = text[1:-1]
    try:
        if field.kind == "str":
            value = text
        elif field.kind == "int":
            value = int(text)
        elif field.kind == "float":
            value = float(text)
        elif field.kind == "bool":
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {text!r}")
            value = low in ("true", "1", "yes")
        elif field.kind == "ints":
            value = tuple(int(p) for p in text.split(",") if p.strip()) if text else ()
        elif field.kind == "tau":
            value = "max" if text == "max" else float(text)
        else:
            raise ValueError(f"unknown field kind {field.kind}")
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None
    return value


def _check(key, field, value):
    if field.choices and value not in field.choices:
        raise ConfigError(f"{key} must be one of {', '.join(map(str, field.choices))}; got {value!r}")
    if field.minimum is not None and field.kind in ("int", "float") and value < field.minimum:
        raise ConfigError(f"{key} must be >= {field.minimum}; got {value!r}")
    if field.kind == "tau" and value != "max" and not value > 0:
        raise ConfigError(f"{key} must be positive or 'max'; got {value!r}")


def _format(field, value):
    if field.kind == "bool":
        return "true" if value else "false"
    if field.kind == "ints":
        return ",".join(str(v) for v in value)
    if field.kind in ("float", "tau") and value != "max":
        return repr(float(value))
    return str(value)


def parse_text(text, source="<config>"):
    """Raw key -> string mapping from config text (no schema applied)."""
    raw = {}
    section = ""
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if section:
            key = f"{section}.{key}"
        if key in raw:
            raise ConfigError(f"{source}:{n}: duplicate key {key}")
        raw[key] = value
    return raw


class RunConfig:
    """A fully resolved run configuration (every schema key present)."""

    def __init__(self, values):
        self.values = dict(values)

    def __getitem__(self, key):
        return self.values[key]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    def __repr__(self):
        return f"RunConfig(method={self['method']!r}, seed={self['seed']})"

    @property
    def method(self):
        return self["method"]

    def replace(self, **changes):
        vals = dict(self.values)
        for k, v in changes.items():
            vals[k.replace("__", ".")] = v
        return resolve(vals)

    def emit(self):
        lines = [f"{k} = {_format(SCHEMA[k], self.values[k])}" for k in sorted(self.values)]
        return "\n".join(lines) + "\n"

    def digest(self):
        keep = {
            k: v
            for k, v in self.values.items()
            if k not in RESUMABLE_KEYS and not k.startswith(RESUMABLE_PREFIXES)
        }
        text = RunConfig(keep).emit()
        return hashlib.sha256(text.encode()).hexdigest()

    # ------------------------------------------------------------ section views

    def episode_spec(self, shots=None):
        return EpisodeSpec(self["episode.ways"], shots or self["episode.shots"], self["episode.queries"])

    def image_shape(self):
        if self["dataset.kind"] == "synthetic":
            s = self["dataset.synthetic.size"]
            return (s, s, self["dataset.synthetic.channels"])
        return None

    def synthetic_spec(self):
        s = self["dataset.synthetic.size"]
        return SyntheticSpec(
            (s, s),
            self["dataset.synthetic.channels"],
            self["dataset.synthetic.noise"],
            self["dataset.synthetic.cell"],
        )

    def backbone(self, input_shape):
        return BackboneConfig(
            conv_blocks=self["backbone.conv_blocks"],
            channels_per_block=self["backbone.channels"],
            input_resolution=tuple(input_shape),
            kernel=self["backbone.kernel"],
            bn_before_relu=self["backbone.bn_before_relu"],
        ).validate()

    def head(self):
        return HeadConfig(self["head.fc_layers"], self["episode.ways"], self["head.hidden"])

    def network_spec(self, input_shape, feature_dim=None):
        bb = self.backbone(input_shape)
        if self.method in ("raml", "uraml"):
            return NetworkSpec(
                "raml_abp",
                bb,
                self.head(),
                AttentionConfig(feature_dim, self["attention.bias"]),
                feature_dim=feature_dim,
            )
        att = AttentionConfig(bb.final_channels, self["attention.bias"])
        return NetworkSpec(self.method, bb, self.head(), att)

    def inner(self):
        return InnerLoopConfig(
            steps=self["inner.steps"],
            alpha_init=self["inner.alpha_init"],
            alpha_trainable=self["inner.alpha_trainable"],
            scope=self["inner.scope"],
            dropout_in_inner=self["inner.dropout"],
        ).validate()

    def meta(self):
        return MetaConfig(
            beta=self["meta.beta"],
            beta_final=self["meta.beta_final"],
            decay_after=self["meta.decay_after"],
            meta_batch=self["meta.meta_batch"],
            iterations=self["meta.iterations"],
            second_order=self["meta.second_order"],
            dropout_rate=self["meta.dropout"],
            l1=self["meta.l1"],
            l2=self["meta.l2"],
        ).validate()

    def pretrain(self):
        return PretrainConfig(
            objective=self["pretrain.objective"],
            batch_size=self["pretrain.batch_size"],
            lr=self["pretrain.lr"],
            lr_final=self["pretrain.lr_final"],
            decay_after=self["pretrain.decay_after"],
            l2=self["pretrain.l2"],
            dropout_rate=self["pretrain.dropout"],
            iterations=self["pretrain.iterations"],
            optimizer=self["pretrain.optimizer"],
        ).validate()

    def splitbrain(self, input_shape):
        return SplitBrainConfig(
            encoder=self.backbone(input_shape),
            decoder_widths=tuple(self["splitbrain.decoder_widths"]),
            target_resolution=self["splitbrain.target_resolution"],
        ).validate()

    def output_dir(self):
        if self["output"]:
            return Path(self["output"])
        root = Path(os.environ.get(OUTPUT_ROOT_ENV) or "runs")
        return root / f"{self.method}-{self['episode.ways']}way{self['episode.shots']}shot-seed{self['seed']}"


def resolve(raw):
    """Apply the schema to a raw mapping: coerce, fill defaults, validate."""
    for key in raw:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
    values = {}
    for key, field in SCHEMA.items():
        if key in raw:
            v = raw[key]
            value = _coerce(key, field, v) if isinstance(v, str) else v
        elif field.default is REQUIRED:
            raise ConfigError(f"missing required config key {key!r}")
        else:
            value = field.default
        if field.kind == "ints":
            value = tuple(int(x) for x in value)
        _check(key, field, value)
        values[key] = value
    method = values["method"]
    if values["head.fc_layers"] == 0:
        values["head.fc_layers"] = 2 if method in ("raml", "uraml") else 1
    if values["pretrain.objective"] == "":
        values["pretrain.objective"] = "splitbrain" if method == "uraml" else "supervised"
    if values["dataset.kind"] == "path" and not values["dataset.path"]:
        raise ConfigError("missing required config key 'dataset.path' (or set dataset.kind = synthetic)")
    if values["dataset.kind"] == "synthetic":
        if values["dataset.synthetic.eval_classes"] >= values["dataset.synthetic.classes"]:
            raise ConfigError("dataset.synthetic.eval_classes must be smaller than dataset.synthetic.classes")
        if values["dataset.synthetic.size"] % values["dataset.synthetic.cell"]:
            raise ConfigError("dataset.synthetic.size must be a multiple of dataset.synthetic.cell")
    if len(values["splitbrain.decoder_widths"]) != 3:
        raise ConfigError("splitbrain.decoder_widths needs exactly three widths")
    if not values["eval.test_shots"]:
        raise ConfigError("eval.test_shots must list at least one shot count")
    for key in ("meta.dropout", "pretrain.dropout"):
        if values[key] >= 1.0:
            raise ConfigError(f"{key} must be < 1")
    if values["dataset.resize"] and len(values["dataset.resize"]) != 2:
        raise ConfigError("dataset.resize must be 'height,width'")
    return RunConfig(values)


def parse_overrides(items):
    raw = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        k, v = item.split("=", 1)
        raw[k.strip()] = v
    return raw


def parse_config(path, overrides=None):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    raw = parse_text(path.read_text(), str(path))
    raw.update(parse_overrides(overrides))
    return resolve(raw)
