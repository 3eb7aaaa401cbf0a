"""Run configuration: an INI file with sections data, schedule, network, train, sample, eval.

Every key has a default; unknown sections or keys are rejected. ``dump_config``
writes the fully resolved configuration back out so a run directory records
exactly what produced it.
"""

import configparser
import dataclasses
from dataclasses import dataclass, field

from .errors import ConfigError
from .schedule import REFERENCE_BETA_END, REFERENCE_BETA_START, REFERENCE_STEPS


@dataclass
class DataSection:
    image_size: int = 16
    n_perturbations: int = 24
    replicates_per_perturbation: int = 4
    n_controls: int = 8
    active_fraction: float = 0.5
    channels_in: int = 2
    channels_out: int = 2
    seed: int = 0
    phenotype_strength: float = 1.0
    n_plates: int = 10
    test_plate: int = 9


@dataclass
class ScheduleSection:
    beta_start: float = REFERENCE_BETA_START
    beta_end: float = REFERENCE_BETA_END
    steps: int = REFERENCE_STEPS


@dataclass
class NetworkSection:
    base_width: int = 16
    depth: int = 2
    groups: int = 4
    embed_dim: int = 32


@dataclass
class TrainSection:
    iterations: int = 2000
    batch_size: int = 8
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    norm_p: int = 2
    augment_prob: float = 0.5
    seed: int = 0
    log_every: int = 100
    classifier_iterations: int = 1500
    classifier_batch_size: int = 16
    accuracy_bins: int = 10


@dataclass
class SampleSection:
    guidance_scale: float = 0.0
    use_label_in_adagn: bool = True
    seed: int = 0
    clip: float = 4.0
    grad_at_mean: bool = False
    batch_size: int = 64


@dataclass
class EvalSection:
    var_tol: float = 1e-4
    corr_tol: float = 0.9
    pca_dims: int = 20
    clusters: int = 3
    guard_z: float = 3.0
    cpcor_axis: str = "column"


SECTIONS = {
    "data": DataSection,
    "schedule": ScheduleSection,
    "network": NetworkSection,
    "train": TrainSection,
    "sample": SampleSection,
    "eval": EvalSection,
}


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    train: TrainSection = field(default_factory=TrainSection)
    sample: SampleSection = field(default_factory=SampleSection)
    eval: EvalSection = field(default_factory=EvalSection)


def _convert(section, key, raw, kind):
    try:
        if kind is bool:
            lowered = raw.strip().lower()
            if lowered not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(raw)
            return configparser.ConfigParser.BOOLEAN_STATES[lowered]
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_config(text):
    """Parse INI text into a :class:`RunConfig`; unknown sections/keys raise ConfigError."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError(f"malformed config: {err}") from None
    cfg = RunConfig()
    for name in parser.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown config section [{name}]")
        target = getattr(cfg, name)
        types = {f.name: f.type for f in dataclasses.fields(target)}
        for key, raw in parser.items(name):
            if key not in types:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            setattr(target, key, _convert(name, key, raw, types[key]))
    return cfg


def load_config(path=None):
    """Read a config file; ``None`` gives all defaults."""
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None


def dump_config(cfg, header=None):
    """Render the resolved config as INI text (re-parsable by :func:`parse_config`)."""
    lines = [f"# {header}"] if header else []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        for f in dataclasses.fields(getattr(cfg, name)):
            value = getattr(getattr(cfg, name), f.name)
            text = ("true" if value else "false") if isinstance(value, bool) else repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{f.name} = {text}")
        lines.append("")
    return "\n".join(lines)
