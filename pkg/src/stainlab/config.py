"""Experiment configuration: TOML or JSON in, validated dataclasses out.

Unknown keys are hard errors with their dotted path named, so a typo in
an ablation config fails loudly instead of silently running defaults.
"""

import hashlib
import json
import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import stains
from .branch import BranchConfig, GrlConfig
from .errors import ConfigInvalid
from .model import ModelConfig
from .synth import SynthConfig

TASK_LOSSES = ("bce", "dice")
AUG_MODES = ("light", "strong")


@dataclass
class DataSection:
    synth: SynthConfig = field(default_factory=SynthConfig)
    train_count: int = 200
    val_count: int = 50
    test_count: int = 50
    shift_rotate_deg: float = 15.0
    shift_elementwise: bool = True

    def validate(self):
        self.synth.validate()
        for name in ("train_count", "val_count", "test_count"):
            if getattr(self, name) < 1:
                raise ConfigInvalid(f"synth.{name} must be >= 1, got {getattr(self, name)}")
        return self


@dataclass
class TrainSection:
    epochs: int = 10
    batch_size: int = 4
    lr: float = 5e-5
    weight_decay: float = 1e-3
    alpha: float = 0.5
    seed: int = 0
    task_loss: str = "bce"
    aug_mode: str = "light"
    aug_scale_range: tuple = (0.95, 1.05)
    aug_shift_range: tuple = (-0.05, 0.05)
    aug_elem_range: tuple = (0.8, 1.2)

    def validate(self):
        if self.epochs < 1:
            raise ConfigInvalid(f"train.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigInvalid(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigInvalid(f"train.lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigInvalid(f"train.weight_decay must be >= 0, got {self.weight_decay}")
        if self.alpha < 0:
            raise ConfigInvalid(f"train.alpha must be >= 0, got {self.alpha}")
        if self.task_loss not in TASK_LOSSES:
            raise ConfigInvalid(f"train.task_loss must be one of {TASK_LOSSES}, got {self.task_loss!r}")
        if self.aug_mode not in AUG_MODES:
            raise ConfigInvalid(f"train.aug_mode must be one of {AUG_MODES}, got {self.aug_mode!r}")
        for name in ("aug_scale_range", "aug_shift_range", "aug_elem_range"):
            rng = getattr(self, name)
            if len(rng) != 2 or rng[1] < rng[0]:
                raise ConfigInvalid(f"train.{name} must be a (lo, hi) pair, got {rng}")
        return self


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSection = field(default_factory=TrainSection)

    def validate(self):
        self.data.validate()
        self.model.validate()
        self.train.validate()
        return self


def _pop(section, key, default, path, kind=None):
    if key not in section:
        return default
    value = section.pop(key)
    if kind is not None:
        try:
            value = kind(value)
        except (TypeError, ValueError) as exc:
            raise ConfigInvalid(f"{path}.{key}: {exc}") from None
    return value


def _reject_unknown(section, path):
    if section:
        names = ", ".join(f"{path}.{k}" for k in sorted(section))
        raise ConfigInvalid(f"unknown config keys: {names}")


def _pair(value):
    seq = list(value)
    if len(seq) != 2:
        raise ValueError(f"expected two values, got {len(seq)}")
    return tuple(float(v) for v in seq)


def _int_pair(value):
    seq = list(value)
    if len(seq) != 2:
        raise ValueError(f"expected two values, got {len(seq)}")
    return tuple(int(v) for v in seq)


def _build_data(raw):
    section = dict(raw)
    synth = SynthConfig(
        image_size=_pop(section, "image_size", 96, "synth", int),
        n_blobs=_pop(section, "n_blobs", (2, 5), "synth", _int_pair),
        stain_matrix=(
            stains.stain_from_list(section.pop("stain_matrix"))
            if "stain_matrix" in section
            else stains.HE_REFERENCE.copy()
        ),
        concentration_scale=_pop(section, "concentration_scale", (1.0, 0.7), "synth", _pair),
        noise_sigma=_pop(section, "noise_sigma", 1.0, "synth", float),
        seed=_pop(section, "seed", 0, "synth", int),
        stain_jitter=_pop(section, "stain_jitter", 0.08, "synth", float),
    )
    data = DataSection(
        synth=synth,
        train_count=_pop(section, "train_count", 200, "synth", int),
        val_count=_pop(section, "val_count", 50, "synth", int),
        test_count=_pop(section, "test_count", 50, "synth", int),
        shift_rotate_deg=_pop(section, "shift_rotate_deg", 15.0, "synth", float),
        shift_elementwise=_pop(section, "shift_elementwise", True, "synth", bool),
    )
    _reject_unknown(section, "synth")
    return data


def _build_model(raw):
    section = dict(raw)
    branch_raw = dict(section.pop("branch", {}))
    grl_raw = dict(section.pop("grl", {}))
    branch = BranchConfig(
        downsample_mode=_pop(branch_raw, "downsample_mode", "MAX", "model.branch", str),
        target_spatial=_pop(branch_raw, "target_spatial", 8, "model.branch", int),
        embed_dim=_pop(branch_raw, "embed_dim", 128, "model.branch", int),
        dropout_p=_pop(branch_raw, "dropout_p", 0.5, "model.branch", float),
    )
    _reject_unknown(branch_raw, "model.branch")
    grl = GrlConfig(
        strength=_pop(grl_raw, "strength", 1.0, "model.grl", float),
        warmup_steps=_pop(grl_raw, "warmup_steps", 0, "model.grl", int),
    )
    _reject_unknown(grl_raw, "model.grl")
    cfg = ModelConfig(
        variant=_pop(section, "variant", "BASELINE", "model", str),
        attach_stage=_pop(section, "attach_stage", 1, "model", int),
        encoder_channels=list(_pop(section, "encoder_channels", [16, 32, 64, 128, 256], "model", list)),
        input_size=_pop(section, "input_size", 96, "model", int),
        branch=branch,
        grl=grl,
        centered_covariance=_pop(section, "centered_covariance", False, "model", bool),
    )
    _reject_unknown(section, "model")
    return cfg


def _build_train(raw):
    section = dict(raw)
    cfg = TrainSection(
        epochs=_pop(section, "epochs", 10, "train", int),
        batch_size=_pop(section, "batch_size", 4, "train", int),
        lr=_pop(section, "lr", 5e-5, "train", float),
        weight_decay=_pop(section, "weight_decay", 1e-3, "train", float),
        alpha=_pop(section, "alpha", 0.5, "train", float),
        seed=_pop(section, "seed", 0, "train", int),
        task_loss=_pop(section, "task_loss", "bce", "train", str),
        aug_mode=_pop(section, "aug_mode", "light", "train", str),
        aug_scale_range=_pop(section, "aug_scale_range", (0.95, 1.05), "train", _pair),
        aug_shift_range=_pop(section, "aug_shift_range", (-0.05, 0.05), "train", _pair),
        aug_elem_range=_pop(section, "aug_elem_range", (0.8, 1.2), "train", _pair),
    )
    _reject_unknown(section, "train")
    return cfg


def from_dict(raw):
    top = dict(raw)
    data = _build_data(top.pop("synth", {}))
    model = _build_model(top.pop("model", {}))
    train = _build_train(top.pop("train", {}))
    _reject_unknown(top, "config")
    return ExperimentConfig(data=data, model=model, train=train).validate()


def load_config(path):
    """Parse a .toml or .json config file into an ExperimentConfig."""
    try:
        if str(path).endswith(".json"):
            with open(path) as fh:
                raw = json.load(fh)
        else:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigInvalid(f"config file not found: {path}") from None
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigInvalid(f"cannot parse {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigInvalid(f"config root must be a table/object, got {type(raw).__name__}")
    return from_dict(raw)


def to_raw(cfg):
    """Config -> the plain dict shape load_config/from_dict accepts.

    Round-trips: from_dict(to_raw(cfg)) reproduces cfg.  Used for JSON
    snapshots inside checkpoints and for hashing.
    """
    synth = cfg.data.synth
    return {
        "synth": {
            "image_size": synth.image_size,
            "n_blobs": list(synth.n_blobs),
            "stain_matrix": stains.stain_to_list(synth.stain_matrix),
            "concentration_scale": list(synth.concentration_scale),
            "noise_sigma": synth.noise_sigma,
            "seed": synth.seed,
            "stain_jitter": synth.stain_jitter,
            "train_count": cfg.data.train_count,
            "val_count": cfg.data.val_count,
            "test_count": cfg.data.test_count,
            "shift_rotate_deg": cfg.data.shift_rotate_deg,
            "shift_elementwise": cfg.data.shift_elementwise,
        },
        "model": {
            "variant": cfg.model.variant,
            "attach_stage": cfg.model.attach_stage,
            "encoder_channels": list(cfg.model.encoder_channels),
            "input_size": cfg.model.input_size,
            "centered_covariance": cfg.model.centered_covariance,
            "branch": {
                "downsample_mode": cfg.model.branch.downsample_mode,
                "target_spatial": cfg.model.branch.target_spatial,
                "embed_dim": cfg.model.branch.embed_dim,
                "dropout_p": cfg.model.branch.dropout_p,
            },
            "grl": {
                "strength": cfg.model.grl.strength,
                "warmup_steps": cfg.model.grl.warmup_steps,
            },
        },
        "train": {
            "epochs": cfg.train.epochs,
            "batch_size": cfg.train.batch_size,
            "lr": cfg.train.lr,
            "weight_decay": cfg.train.weight_decay,
            "alpha": cfg.train.alpha,
            "seed": cfg.train.seed,
            "task_loss": cfg.train.task_loss,
            "aug_mode": cfg.train.aug_mode,
            "aug_scale_range": list(cfg.train.aug_scale_range),
            "aug_shift_range": list(cfg.train.aug_shift_range),
            "aug_elem_range": list(cfg.train.aug_elem_range),
        },
    }


def experiment_hash(cfg):
    blob = json.dumps(to_raw(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
