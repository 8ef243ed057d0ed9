"""Experiment configuration: sectioned key=value files.

Unknown sections or keys are hard errors (typo protection), all numeric
fields are range-checked, and every error names the offending line. The
effective configuration (defaults applied) is hashed; artifacts embed the
hash for provenance.

Example::

    [experiment]
    kind = sine-regression
    seed = 7

    [phase1]
    alpha = 3e-3
    beta = 1e-4
    steps = 20000
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass

from . import seeds
from .errors import ConfigError
from .metalearner import PhaseConfig
from .models import ModelSpec
from .trajectories import (
    gen_synthetic_classes,
    sample_classification_trajectory,
    sample_regression_trajectory,
    sample_sine_taskset,
)

KINDS = ("sine-regression", "synthetic-classification")

SINE_LAYERS = (11, 300, 300, 300, 300, 300, 300, 300, 300, 1)
SINE_SPLIT = 6


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    seed: int
    out_dir: str
    model_spec: ModelSpec
    phases: tuple[PhaseConfig, PhaseConfig, PhaseConfig]
    delta: float
    # sine-regression trajectory pools and sizes (training side)
    train_tasks: int
    eval_tasks: int
    tr_per_fn: int
    val_per_fn: int
    # synthetic classification pools
    class_count: int
    class_dim: int
    class_per_class: int
    class_sigma: float
    tr_classes: int
    extra_val_classes: int
    per_class_tr: int
    per_class_val: int
    # evaluation protocol
    eval_runs: int
    eval_alpha: float | None
    eval_tr_per_fn: int
    eval_val_per_fn: int
    eval_classes: int

    @property
    def loss_kind(self) -> str:
        return "mse" if self.kind == "sine-regression" else "xent"

    @property
    def eval_learning_rate(self) -> float:
        """Evaluation-time inner rate; defaults to the phase-3 alpha."""
        return self.phases[2].alpha if self.eval_alpha is None else self.eval_alpha

    @property
    def config_hash(self) -> str:
        """Hash of the semantic configuration; output location excluded."""
        fields = dataclasses.astuple(dataclasses.replace(self, out_dir=""))
        return hashlib.sha256(repr(fields).encode("utf-8")).hexdigest()[:16]

    def describe(self) -> dict:
        out = dataclasses.asdict(self)
        out["config_hash"] = self.config_hash
        return out


# schema: section -> key -> (converter, default); _REQUIRED means no default
_REQUIRED = object()


def _positive(kind):
    def convert(text):
        value = kind(text)
        if value <= 0:
            raise ValueError("must be > 0")
        return value

    return convert


def _nonnegative(kind):
    def convert(text):
        value = kind(text)
        if value < 0:
            raise ValueError("must be >= 0")
        return value

    return convert


def _fraction(text):
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise ValueError("must be in [0, 1]")
    return value


def _kind(text):
    if text not in KINDS:
        raise ValueError(f"must be one of {', '.join(KINDS)}")
    return text


def _int_list(text):
    return tuple(int(part) for part in text.split(","))


_PHASE_KEYS = {
    "alpha": (_nonnegative(float), _REQUIRED),
    "beta": (_nonnegative(float), _REQUIRED),
    "steps": (_nonnegative(int), _REQUIRED),
    "inner_batch": (_positive(int), None),  # kind-dependent default
}

_SCHEMA = {
    "experiment": {
        "kind": (_kind, _REQUIRED),
        "seed": (_nonnegative(int), 0),
        "out": (str, "runs"),
    },
    "model": {
        "layers": (_int_list, None),
        "split": (_positive(int), None),
    },
    "phase1": dict(_PHASE_KEYS),
    "phase2": dict(_PHASE_KEYS) | {"gamma": (_nonnegative(float), _REQUIRED)},
    "phase3": dict(_PHASE_KEYS) | {"lambda": (_nonnegative(float), _REQUIRED)},
    "consolidation": {
        "delta": (_fraction, _REQUIRED),
    },
    "trajectory": {
        "train_tasks": (_positive(int), 400),
        "eval_tasks": (_positive(int), 500),
        "tr_per_fn": (_positive(int), 1280),
        "val_per_fn": (_positive(int), 32),
    },
    "classes": {
        "count": (_positive(int), 20),
        "dim": (_positive(int), 16),
        "per_class": (_positive(int), 40),
        "sigma": (_nonnegative(float), 0.01),
        "tr_classes": (_positive(int), 2),
        "extra_val_classes": (_positive(int), 1),
        "per_class_tr": (_positive(int), 5),
        "per_class_val": (_positive(int), 5),
    },
    "evaluation": {
        "runs": (_positive(int), 50),
        "alpha": (_nonnegative(float), None),
        "tr_per_fn": (_positive(int), None),  # defaults to the training sizes
        "val_per_fn": (_positive(int), None),
        "classes": (_positive(int), 2),
    },
}


def _read_pairs(path):
    """Parse the raw file into {(section, key): (value, line_no)}."""
    pairs = {}
    section = None
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#") or line.startswith(";"):
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                if section not in _SCHEMA:
                    raise ConfigError(f"unknown section [{section}]", line=line_no)
                continue
            if "=" not in line:
                raise ConfigError(f"expected key = value, got {line!r}", line=line_no)
            if section is None:
                raise ConfigError("key outside of any section", line=line_no)
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]", line=line_no)
            if (section, key) in pairs:
                raise ConfigError(f"duplicate key {key!r} in section [{section}]", line=line_no)
            pairs[(section, key)] = (value, line_no)
    return pairs


def _resolve(pairs, section, key):
    converter, default = _SCHEMA[section][key]
    got = pairs.pop((section, key), None)
    if got is None:
        if default is _REQUIRED:
            raise ConfigError(f"missing required key {key!r} in section [{section}]")
        return default
    value, line_no = got
    try:
        return converter(value)
    except ValueError as exc:
        raise ConfigError(f"invalid value for {key!r}: {exc}", line=line_no) from exc


def parse_config(path) -> ExperimentConfig:
    """Read, validate, and resolve a configuration file."""
    pairs = _read_pairs(path)

    kind = _resolve(pairs, "experiment", "kind")
    seed = _resolve(pairs, "experiment", "seed")
    out_dir = _resolve(pairs, "experiment", "out")

    default_batch = 32 if kind == "sine-regression" else 1
    phases = []
    for name, fixed in (("phase1", {}), ("phase2", {}), ("phase3", {})):
        values = {key: _resolve(pairs, name, key) for key in _SCHEMA[name]}
        if values["inner_batch"] is None:
            values["inner_batch"] = default_batch
        phases.append(
            PhaseConfig(
                alpha=values["alpha"],
                beta=values["beta"],
                lam=values.get("lambda", 0.0),
                gamma=values.get("gamma", 0.0),
                steps=values["steps"],
                inner_batch=values["inner_batch"],
            )
        )

    delta = _resolve(pairs, "consolidation", "delta")

    traj = {key: _resolve(pairs, "trajectory", key) for key in _SCHEMA["trajectory"]}
    classes = {key: _resolve(pairs, "classes", key) for key in _SCHEMA["classes"]}
    evaluation = {key: _resolve(pairs, "evaluation", key) for key in _SCHEMA["evaluation"]}

    layers = _resolve(pairs, "model", "layers")
    split = _resolve(pairs, "model", "split")
    if layers is None:
        if kind == "sine-regression":
            layers = SINE_LAYERS
        else:
            out_width = classes["tr_classes"] + classes["extra_val_classes"]
            layers = (classes["dim"], 64, 64, 64, out_width)
    if split is None:
        split = SINE_SPLIT if kind == "sine-regression" else 2
    try:
        model_spec = ModelSpec(tuple(layers), split)
    except Exception as exc:
        raise ConfigError(f"invalid model section: {exc}") from exc

    if kind == "synthetic-classification":
        expected_out = classes["tr_classes"] + classes["extra_val_classes"]
        if model_spec.output_dim != expected_out:
            raise ConfigError(
                f"model output width {model_spec.output_dim} must equal "
                f"tr_classes + extra_val_classes = {expected_out}"
            )
        if model_spec.input_dim != classes["dim"]:
            raise ConfigError(f"model input width {model_spec.input_dim} must equal class dim {classes['dim']}")
    else:
        if model_spec.input_dim != 11:
            raise ConfigError("sine-regression inputs are 11-dimensional ([z, one-hot task slot])")
        if model_spec.output_dim != 1:
            raise ConfigError("sine-regression output width must be 1")

    if pairs:  # leftovers can only be keys in known sections that the schema dropped
        (section, key), (_, line_no) = next(iter(pairs.items()))
        raise ConfigError(f"unexpected key {key!r} in section [{section}]", line=line_no)

    return ExperimentConfig(
        kind=kind,
        seed=seed,
        out_dir=out_dir,
        model_spec=model_spec,
        phases=tuple(phases),
        delta=delta,
        train_tasks=traj["train_tasks"],
        eval_tasks=traj["eval_tasks"],
        tr_per_fn=traj["tr_per_fn"],
        val_per_fn=traj["val_per_fn"],
        class_count=classes["count"],
        class_dim=classes["dim"],
        class_per_class=classes["per_class"],
        class_sigma=classes["sigma"],
        tr_classes=classes["tr_classes"],
        extra_val_classes=classes["extra_val_classes"],
        per_class_tr=classes["per_class_tr"],
        per_class_val=classes["per_class_val"],
        eval_runs=evaluation["runs"],
        eval_alpha=evaluation["alpha"],
        eval_tr_per_fn=evaluation["tr_per_fn"] if evaluation["tr_per_fn"] is not None else traj["tr_per_fn"],
        eval_val_per_fn=evaluation["val_per_fn"] if evaluation["val_per_fn"] is not None else traj["val_per_fn"],
        eval_classes=evaluation["classes"],
    )


# -- trajectory sources -------------------------------------------------------


def training_sampler(config: ExperimentConfig):
    """callable(SeedSequence) -> LearningTrajectory drawn from the training pool."""
    if config.kind == "sine-regression":
        taskset = sample_sine_taskset(config.train_tasks, seeds.derive(config.seed, "train-taskset"))

        def sample(step_seed):
            return sample_regression_trajectory(taskset, step_seed, config.tr_per_fn, config.val_per_fn)

    else:
        dataset = gen_synthetic_classes(
            config.class_count,
            config.class_dim,
            config.class_per_class,
            config.class_sigma,
            seeds.derive(config.seed, "train-classes"),
        )

        def sample(step_seed):
            return sample_classification_trajectory(
                dataset,
                "train",
                config.tr_classes,
                config.extra_val_classes,
                config.per_class_tr,
                config.per_class_val,
                step_seed,
            )

    return sample


def eval_taskset(config: ExperimentConfig):
    """Held-out pool for evaluation (disjoint from the training pool)."""
    if config.kind == "sine-regression":
        return sample_sine_taskset(config.eval_tasks, seeds.derive(config.seed, "eval-taskset"))
    return gen_synthetic_classes(
        config.class_count,
        config.class_dim,
        config.class_per_class,
        config.class_sigma,
        seeds.derive(config.seed, "eval-classes"),
    )
