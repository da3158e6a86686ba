"""Experiment configuration: a YAML file with a strict schema.

Every section maps onto a frozen dataclass; unknown keys, wrong types and
out-of-range values raise :class:`~reidattack.exceptions.ConfigError` naming
the offending key. A single master ``seed`` feeds every component; each one
derives its own independent streams from it.
"""
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from ..data import DEFAULT_JUNK_IDS, NamingScheme, SyntheticSpec
from ..defense import DEFAULT_RATES, DropoutDefenseConfig
from ..exceptions import ConfigError
from ..metrics import EvalProtocol
from ..misrank import DEFAULT_SCALE, MaskConfig, MisrankLossWeights, MisrankSchedule
from ..model import TrainConfig
from ..pfgsm import PfgsmConfig

ATTACK_NAMES = ("pfgsm", "dmr")
DEFAULT_CONFIG_NAME = "default.cfg"


@dataclass(frozen=True)
class DatasetSection:
    kind: str = "synthetic"
    num_train_ids: int = 8
    num_test_ids: int = 16
    images_per_id: int = 8
    num_cameras: int = 2
    image_shape: tuple = (64, 32)
    path: str = None
    scheme: str = "market1501"
    junk_ids: tuple = tuple(sorted(DEFAULT_JUNK_IDS))
    name: str = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "directory"):
            raise ConfigError(f"dataset.kind must be 'synthetic' or 'directory', got {self.kind!r}")
        if self.kind == "directory" and not self.path:
            raise ConfigError("dataset.path is required when dataset.kind is 'directory'")
        if self.scheme.upper() not in NamingScheme.__members__:
            raise ConfigError(f"dataset.scheme must be one of "
                              f"{sorted(n.lower() for n in NamingScheme.__members__)}, "
                              f"got {self.scheme!r}")

    def synthetic_spec(self, seed):
        return SyntheticSpec(num_train_ids=self.num_train_ids, num_test_ids=self.num_test_ids,
                             images_per_id=self.images_per_id, num_cameras=self.num_cameras,
                             image_shape=tuple(self.image_shape), seed=seed)

    @property
    def label(self):
        if self.name:
            return self.name
        return "synthetic" if self.kind == "synthetic" else Path(self.path).name


@dataclass(frozen=True)
class ModelSection:
    epochs: int = 60
    batch_size: int = 16
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    embedding_dim: int = 64
    channels: tuple = (16, 32, 64)
    augment: bool = True
    checkpoint: str = None

    def __post_init__(self):
        TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                    learning_rate=self.learning_rate)
        if len(self.channels) != 3:
            raise ConfigError(f"model.channels needs 3 entries, got {list(self.channels)}")

    def estimator_params(self, seed):
        return dict(embedding_dim=self.embedding_dim, channels=tuple(self.channels),
                    epochs=self.epochs, batch_size=self.batch_size,
                    learning_rate=self.learning_rate, momentum=self.momentum,
                    weight_decay=self.weight_decay, seed=seed, augment=self.augment)


@dataclass(frozen=True)
class PfgsmSection:
    epsilon: float = 4 / 255
    sigma: float = 0.9
    max_iterations: int = 50
    stop_on_success: bool = True

    def __post_init__(self):
        self.to_config(0)

    def to_config(self, seed):
        return PfgsmConfig(epsilon=self.epsilon, sigma=self.sigma,
                           max_iterations=self.max_iterations,
                           stop_on_success=self.stop_on_success, seed=seed)


@dataclass(frozen=True)
class MisrankSection:
    scale: float = DEFAULT_SCALE
    active_pixel_fraction: float = 1.0
    temperature: float = 1.0
    w_gan: float = 1.0
    w_etri: float = 1.0
    w_xent: float = 1.0
    w_vp: float = 1.0
    delta_margin: float = 0.3
    smoothing: float = 0.1
    epochs: int = 20
    ids_per_batch: int = 4
    samples_per_id: int = 4
    lr_generator: float = 1e-3
    lr_discriminator: float = 1e-3
    lr_mask: float = 1e-2
    generator_channels: tuple = (16, 32, 64)
    discriminator_width: int = 16
    checkpoint: str = None

    def __post_init__(self):
        if not 0 < self.scale <= 1:
            raise ConfigError(f"misrank.scale must lie in (0, 1], got {self.scale}")
        MaskConfig(self.active_pixel_fraction, self.temperature)
        MisrankLossWeights(self.w_gan, self.w_etri, self.w_xent, self.w_vp, self.delta_margin,
                           self.smoothing)
        MisrankSchedule(self.epochs, self.ids_per_batch, self.samples_per_id, self.lr_generator,
                        self.lr_discriminator, self.lr_mask)

    def estimator_params(self, seed):
        params = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)
                  if f.name != "checkpoint"}
        params["generator_channels"] = tuple(self.generator_channels)
        return dict(params, seed=seed)


@dataclass(frozen=True)
class CombinedSection:
    order: tuple = ("pfgsm", "dmr")
    audit_reversed_order: bool = True

    def __post_init__(self):
        validate_order(self.order)


@dataclass(frozen=True)
class DefenseSection:
    rates: tuple = DEFAULT_RATES
    passes: int = 1

    def __post_init__(self):
        for r in self.rates:
            DropoutDefenseConfig(rate=r, passes=self.passes)


@dataclass(frozen=True)
class ProtocolSection:
    exclude_same_camera_same_id: bool = True
    junk_ids: tuple = tuple(sorted(DEFAULT_JUNK_IDS))

    def to_protocol(self):
        return EvalProtocol(exclude_same_camera_same_id=self.exclude_same_camera_same_id,
                            junk_ids=frozenset(self.junk_ids))


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    n_jobs: int = 1
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    pfgsm: PfgsmSection = field(default_factory=PfgsmSection)
    misrank: MisrankSection = field(default_factory=MisrankSection)
    combined: CombinedSection = field(default_factory=CombinedSection)
    defense: DefenseSection = field(default_factory=DefenseSection)
    protocol: ProtocolSection = field(default_factory=ProtocolSection)
    output_dir: str = "runs/default"

    def __post_init__(self):
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    def with_overrides(self, seed=None, output_dir=None):
        changes = {}
        if seed is not None:
            changes["seed"] = seed
        if output_dir is not None:
            changes["output_dir"] = str(output_dir)
        return dataclasses.replace(self, **changes) if changes else self

    def to_dict(self, include_output=True):
        out = _plain(dataclasses.asdict(self))
        if not include_output:
            out.pop("output_dir")
        return out

    def fingerprint(self):
        """Hash of everything that affects results (the output directory does not)."""
        payload = json.dumps(self.to_dict(include_output=False), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()

    def dump(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def validate_order(order):
    order = tuple(order)
    if not order:
        raise ConfigError("combined.order must name at least one attack")
    unknown = [a for a in order if a not in ATTACK_NAMES]
    if unknown:
        raise ConfigError(f"combined.order has unknown attacks {unknown}; "
                          f"choose from {list(ATTACK_NAMES)}")
    if len(set(order)) != len(order):
        raise ConfigError(f"combined.order repeats an attack: {list(order)}")
    return order


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


_SECTIONS = {"dataset": DatasetSection, "model": ModelSection, "pfgsm": PfgsmSection,
             "misrank": MisrankSection, "combined": CombinedSection,
             "defense": DefenseSection, "protocol": ProtocolSection}


def _coerce(where, ftype, default, value):
    """Check ``value`` against the field's default type; tuples accept YAML lists."""
    if value is None:
        return None
    if isinstance(default, bool) or ftype in (bool, "bool"):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false, got {value!r}")
        return value
    if isinstance(default, tuple) or ftype in (tuple, "tuple"):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list, got {value!r}")
        return tuple(value)
    if ftype in (int, "int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if ftype in (float, "float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if ftype in (str, "str"):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    return value


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        key = f"{where}.{name}" if where else name
        if cls is ExperimentConfig and name in _SECTIONS:
            kwargs[name] = _build(_SECTIONS[name], value or {}, name)
            continue
        f = fields[name]
        default = f.default if f.default is not dataclasses.MISSING else None
        kwargs[name] = _coerce(key, f.type, default, value)
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        if where and not str(exc).startswith(where):
            raise ConfigError(f"{where}: {exc}") from None
        raise


def config_from_dict(data):
    return _build(ExperimentConfig, data or {}, "")


def default_config_text():
    return resources.files(__package__).joinpath(DEFAULT_CONFIG_NAME).read_text()


def load_config(path=None):
    """Parse a config file; ``None`` (or a missing ``default.cfg``) means the shipped default."""
    if path is None or (Path(path).name == DEFAULT_CONFIG_NAME and not Path(path).exists()):
        text, source = default_config_text(), DEFAULT_CONFIG_NAME
    else:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        text, source = p.read_text(), str(p)
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source} is not valid YAML: {exc}") from None
    return config_from_dict(data)
