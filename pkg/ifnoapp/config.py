"""
Run configuration: flat ``key=value`` files validated against per-command
JSON schemas, plus the model and training settings derived from them.
"""
import logging
from dataclasses import asdict, dataclass

import numpy as np
from jsonschema import ValidationError, validate

from ifnoapp.utils import ConfigError, StorageError, fingerprint

logger = logging.getLogger(__name__)

DEFAULTS = {
    "task": "dline",
    "grid": 16,
    "n_train": 200,
    "n_test": 50,
    "eta": 0.0,
    "d": 32,
    "modes": 8,
    "blocks": 3,
    "tau": 1.0,
    "hidden": 128,
    "z_dim": 64,
    "vae_channels": "32,64,128,256,512",
    "beta": 1e-6,
    "lr": 1e-3,
    "lr_decay": 0.99,
    "lr_schedule": "exponential",
    "plateau_patience": 10,
    "plateau_factor": 0.5,
    "optimizer": "adam",
    "weight_decay": 0.0,
    "batch": 20,
    "epochs1": 100,
    "epochs2": 200,
    "epochs3": 50,
    "seed": 0,
    "dtype": "f64",
    "solver_tol": 1e-8,
    "preconditioner": "none",
    "workers": 1,
    "uncertainty_samples": 500,
    "n_maps": 10,
    "ablation_blocks": "1,3",
    "profile": "full",
}

# Overlaid on DEFAULTS before the configuration file. "desk" is the reduced
# model used for 16x16 runs on a single CPU.
PROFILES = {
    "full": {},
    "desk": {
        "d": 8,
        "modes": 4,
        "hidden": 32,
        "z_dim": 16,
        "vae_channels": "16,32,64",
        "lr": 2e-3,
        "epochs2": 100,
    },
}

_POSITIVE_INT = {"type": "integer", "minimum": 1}
_INT_LIST = {"type": "string", "pattern": r"^\s*\d+(\s*,\s*\d+)*\s*$"}

PROPERTIES = {
    "task": {"type": "string", "enum": ["dline", "dcurv"]},
    "grid": {"type": "integer", "minimum": 4},
    "n_train": {"type": "integer", "minimum": 2},
    "n_test": _POSITIVE_INT,
    "eta": {"type": "number", "minimum": 0},
    "d": _POSITIVE_INT,
    "modes": _POSITIVE_INT,
    "blocks": _POSITIVE_INT,
    "tau": {"type": "number", "exclusiveMinimum": 0},
    "hidden": _POSITIVE_INT,
    "z_dim": _POSITIVE_INT,
    "vae_channels": _INT_LIST,
    "beta": {"type": "number", "minimum": 0},
    "lr": {"type": "number", "exclusiveMinimum": 0},
    "lr_decay": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    "lr_schedule": {"type": "string", "enum": ["exponential", "plateau"]},
    "plateau_patience": _POSITIVE_INT,
    "plateau_factor": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    "optimizer": {"type": "string", "enum": ["adam", "adamw"]},
    "weight_decay": {"type": "number", "minimum": 0},
    "batch": _POSITIVE_INT,
    "epochs1": _POSITIVE_INT,
    "epochs2": _POSITIVE_INT,
    "epochs3": _POSITIVE_INT,
    "seed": {"type": "integer", "minimum": 0},
    "dtype": {"type": "string", "enum": ["f32", "f64"]},
    "solver_tol": {"type": "number", "exclusiveMinimum": 0},
    "preconditioner": {"type": "string", "enum": ["none", "jacobi"]},
    "workers": _POSITIVE_INT,
    "uncertainty_samples": {"type": "integer", "minimum": 2},
    "n_maps": {"type": "integer", "minimum": 0},
    "ablation_blocks": _INT_LIST,
    "data": {"type": "string"},
    "out": {"type": "string"},
    "checkpoint": {"type": "string"},
    "profile": {"type": "string", "enum": sorted(PROFILES)},
}

MODEL_KEYS = ["grid", "d", "modes", "blocks", "tau", "hidden", "z_dim", "vae_channels", "dtype"]
TRAIN_KEYS = ["lr", "lr_decay", "lr_schedule", "plateau_patience", "plateau_factor",
              "optimizer", "weight_decay", "batch", "epochs1", "epochs2", "epochs3",
              "beta", "seed"]

REQUIRED = {
    "gen-data": ["task", "grid", "n_train", "n_test", "eta", "seed", "solver_tol"],
    "train": MODEL_KEYS + TRAIN_KEYS,
    "eval": ["seed", "n_maps"],
    "predict": [],
    "sample": ["seed", "uncertainty_samples"],
    "ablate": MODEL_KEYS + TRAIN_KEYS + ["ablation_blocks"],
}


def get_schema(command=None):
    """
    Get the JSON schema for a run configuration. Unknown keys are rejected;
    the required keys depend on the subcommand.
    """
    return {
        "type": "object",
        "properties": PROPERTIES,
        "required": REQUIRED.get(command, []),
        "additionalProperties": False,
    }


def _coerce(key, raw):
    spec = PROPERTIES.get(key)
    if spec is None:
        return raw
    try:
        if spec["type"] == "integer":
            return int(raw)
        if spec["type"] == "number":
            return float(raw)
    except ValueError as error:
        raise ConfigError(f"key '{key}': cannot parse '{raw}' as {spec['type']}") from error
    return raw


def parse_config_text(text):
    """
    Parse ``key=value`` lines. Blank lines and lines starting with ``#`` are
    ignored. Values are typed according to the schema.
    """
    values = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {number}: expected key=value, got '{line}'")
        key, raw = (part.strip() for part in line.split("=", 1))
        values[key] = _coerce(key, raw)
    return values


def load_config(path):
    """
    Read a configuration file.
    """
    try:
        with open(path, "r", encoding="utf-8") as handle:
            return parse_config_text(handle.read())
    except OSError as error:
        raise StorageError(f"cannot read config '{path}': {error}") from error


def validate_config(values, command=None):
    """
    Validate a configuration mapping against the schema of ``command``.
    """
    try:
        validate(values, get_schema(command))
    except ValidationError as error:
        location = ".".join(str(part) for part in error.path)
        prefix = f"key '{location}': " if location else ""
        raise ConfigError(prefix + error.message) from error


def create_config(path=None, test_config=None, command=None):
    """
    Create and validate a run configuration.

    :param path: Optional key=value file overlaid on the defaults.
    :param test_config: Optional mapping overlaid last (tests, CLI overrides).
    :param command: Subcommand whose required keys are enforced.
    :return: Validated configuration dictionary.

    The ``profile`` key, from the overrides or the file, picks the PROFILES
    entry applied between the defaults and the file.
    """
    file_values = load_config(path) if path is not None else {}
    profile = ((test_config or {}).get("profile") or file_values.get("profile")
               or DEFAULTS["profile"])
    if profile not in PROFILES:
        raise ConfigError(f"key 'profile': unknown profile '{profile}'")
    values = dict(DEFAULTS)
    values.update(PROFILES[profile])
    values.update(file_values)
    if test_config is not None:
        values.update({key: _coerce(key, value) if isinstance(value, str) else value
                       for key, value in test_config.items()})
    validate_config(values, command)
    return values


def format_config(values):
    """
    Render a configuration as sorted key=value lines.
    """
    return "".join(f"{key}={values[key]}\n" for key in sorted(values))


def parse_int_list(text):
    """
    Parse a comma separated integer list.
    """
    return tuple(int(part) for part in str(text).split(",") if part.strip())


@dataclass
class ModelConfig:
    """
    Architecture settings shared by the operator and the VAE.
    """
    grid: int = 16
    c_in: int = 1
    c_out: int = 1
    d: int = 32
    modes: int = 8
    blocks: int = 3
    tau: float = 1.0
    hidden: int = 128
    z_dim: int = 64
    vae_channels: tuple = (32, 64, 128, 256, 512)
    dtype: str = "f64"

    @property
    def real_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64

    @classmethod
    def from_mapping(cls, values):
        """
        Build from a validated configuration or meta mapping.
        """
        return cls(
            grid=int(values["grid"]),
            c_in=int(values.get("c_in", 1)),
            c_out=int(values.get("c_out", 1)),
            d=int(values["d"]),
            modes=int(values["modes"]),
            blocks=int(values["blocks"]),
            tau=float(values["tau"]),
            hidden=int(values["hidden"]),
            z_dim=int(values["z_dim"]),
            vae_channels=parse_int_list(values["vae_channels"]),
            dtype=str(values["dtype"]))

    def serialize(self):
        """
        Meta mapping written to ``meta.txt``.
        """
        meta = asdict(self)
        meta["vae_channels"] = ",".join(str(c) for c in self.vae_channels)
        return {key: str(value) for key, value in meta.items()}

    def fingerprint(self):
        """
        FNV-1a fingerprint of the sorted meta keys.
        """
        return fingerprint(self.serialize())


@dataclass
class TrainConfig:
    """
    Every tunable of the three-step training schedule.
    """
    lr: float = 1e-3
    lr_decay: float = 0.99
    lr_schedule: str = "exponential"
    plateau_patience: int = 10
    plateau_factor: float = 0.5
    optimizer: str = "adam"
    weight_decay: float = 0.0
    batch: int = 20
    epochs1: int = 100
    epochs2: int = 200
    epochs3: int = 50
    beta: float = 1e-6
    seed: int = 0

    @classmethod
    def from_mapping(cls, values):
        """
        Build from a validated configuration mapping.
        """
        return cls(**{key: values[key] for key in TRAIN_KEYS})

    def epochs(self, stage):
        """
        Number of epochs of stage 1, 2 or 3.
        """
        return {1: self.epochs1, 2: self.epochs2, 3: self.epochs3}[stage]
