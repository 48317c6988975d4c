"""Experiment configuration: typed sections, JSON files and dotted overrides.

Precedence, lowest first: dataclass defaults, the JSON config file,
``--section.key`` command-line overrides, the ``ELP_SEED`` environment
variable (for ``seed`` only).
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from elplab.corpus import CorpusSpec
from elplab.errors import ConfigError
from elplab.metrics import EvalConfig
from elplab.networks import LatentConfig, NetworkConfig
from elplab.objectives import LossWeights
from elplab.optim import OptimizerConfig
from elplab.utils import digest, ensure_dir, version, write_json

logger = logging.getLogger(__name__)

SEED_ENV = "ELP_SEED"
_TRUE = ("true", "1", "yes", "on")
_FALSE = ("false", "0", "no", "off")


@dataclass(frozen=True)
class AblationConfig:
    """Head counts swept by ``ablate heads``."""

    heads_sweep: tuple = (1, 4, 16, 64, 128)

    def __post_init__(self):
        value = tuple(int(h) for h in self.heads_sweep)
        if not value or min(value) < 1:
            raise ConfigError("ablation.heads_sweep must be a nonempty list of positive ints")
        object.__setattr__(self, "heads_sweep", value)


@dataclass(frozen=True)
class CompositorConfig:
    """Eye-closure blendshape used by ``infer``."""

    closure_index: int = 0

    def __post_init__(self):
        if self.closure_index < 0:
            raise ConfigError("compositor.closure_index must be >= 0")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines one run."""

    seed: int = 0
    output: str = "runs/default"
    corpus_dir: str = "corpus"
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    latent: LatentConfig = field(default_factory=LatentConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    compositor: CompositorConfig = field(default_factory=CompositorConfig)

    def __post_init__(self):
        dims = (self.corpus.beta_dim, self.corpus.pose_dim, self.corpus.audio_dim)
        net = (self.network.beta_dim, self.network.pose_dim, self.network.audio_dim)
        if dims != net:
            raise ConfigError(
                f"corpus dims {dims} and network dims {net} (beta, pose, audio) differ"
            )
        if self.compositor.closure_index >= self.network.beta_dim:
            raise ConfigError(
                f"compositor.closure_index {self.compositor.closure_index} outside "
                f"0..{self.network.beta_dim - 1}"
            )

    @property
    def emotions(self):
        return self.corpus.emotions

    def as_dict(self):
        return asdict(self)

    def config_digest(self):
        """Hex digest of every setting except the output locations."""
        data = self.as_dict()
        data.pop("output")
        data.pop("corpus_dir")
        return digest(data)


SECTIONS = {
    f.name: f.default_factory
    for f in fields(ExperimentConfig)
    if is_dataclass(f.default_factory)
}


def _section_fields(section):
    return {f.name: f for f in fields(SECTIONS[section])}


def _coerce_scalar(kind, raw, key):
    if kind is bool:
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in _TRUE:
            return True
        if text in _FALSE:
            return False
        raise ConfigError(f"{key}: expected true or false, got {raw!r}")
    try:
        return kind(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind.__name__}") from exc


def coerce(default, raw, key):
    """Convert ``raw`` (text or JSON value) to the type of ``default``."""
    if isinstance(default, tuple):
        items = raw
        if isinstance(raw, str):
            items = [v for v in (s.strip() for s in raw.split(",")) if v]
        if not isinstance(items, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {raw!r}")
        kind = type(default[0]) if default else float
        return tuple(_coerce_scalar(kind, v, key) for v in items)
    return _coerce_scalar(type(default), raw, key)


def flatten(config):
    """Dotted key -> value for every leaf of ``config``."""
    out = {}
    for f in fields(config):
        value = getattr(config, f.name)
        if is_dataclass(value):
            for g in fields(value):
                out[f"{f.name}.{g.name}"] = getattr(value, g.name)
        else:
            out[f.name] = value
    return out


def _build(section_values, top_values):
    try:
        sections = {name: cls(**section_values.get(name, {})) for name, cls in SECTIONS.items()}
        return ExperimentConfig(**top_values, **sections)
    except TypeError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def _split(values):
    """Typed ({section: {key: value}}, {top key: value}) from a flat dict."""
    defaults = flatten(ExperimentConfig())
    sections, top = {}, {}
    for key, raw in values.items():
        if key not in defaults:
            raise ConfigError(f"unknown configuration key {key!r}")
        value = coerce(defaults[key], raw, key)
        if "." in key:
            section, name = key.split(".", 1)
            sections.setdefault(section, {})[name] = value
        else:
            top[key] = value
    return sections, top


def from_dict(data):
    """Config from nested JSON-style data; absent keys keep their defaults."""
    if not isinstance(data, dict):
        raise ConfigError("a configuration must be a JSON object")
    flat = {}
    for key, value in data.items():
        if key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"configuration section {key!r} must be an object")
            for name, leaf in value.items():
                flat[f"{key}.{name}"] = leaf
        else:
            flat[key] = value
    return _build(*_split(flat))


def load_config(path):
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return from_dict(data)


def apply_overrides(config, overrides):
    """Return ``config`` with dotted-key ``overrides`` applied."""
    if not overrides:
        return config
    flat = flatten(config)
    sections, top = _split(overrides)
    for section, values in sections.items():
        for name, value in values.items():
            flat[f"{section}.{name}"] = value
    flat.update(top)
    return _build(*_split(flat))


def resolve_config(path=None, overrides=None, environ=None):
    """Defaults < JSON file < overrides < ``ELP_SEED``."""
    config = load_config(path) if path else ExperimentConfig()
    config = apply_overrides(config, overrides)
    environ = os.environ if environ is None else environ
    if environ.get(SEED_ENV):
        seed = _coerce_scalar(int, environ[SEED_ENV], SEED_ENV)
        logger.info("seed %d taken from %s", seed, SEED_ENV)
        config = replace(config, seed=seed)
    return config


def write_resolved(config, directory=None):
    """Write ``config.json`` (resolved config plus version) into ``directory``."""
    directory = ensure_dir(directory if directory is not None else config.output)
    payload = config.as_dict()
    payload["version"] = version()
    path = directory / "config.json"
    write_json(path, payload)
    return path
