"""
Experiment config files: INI sections validated into pydantic models
"""
import configparser
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Type

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from src.services.datagen import GwasParams, ToyParams
from src.services.trainer import ModelConfig, TrainingConfig
from src.utils.errors import ConfigError

CONFIG_VERSION = 1
DEFAULT_SPLITS = (0.63, 0.27, 0.10)

MODEL_KINDS = (
    "dgse",
    "dmse",
    "dmse_v",
    "ols",
    "iptw",
    "aiptw",
    "pca_adjust",
    "fa_adjust",
    "linsem_external",
    "linsem_three_view",
    "noncausal",
    "oracle_adjust",
)

# model kinds each generator family can be scored with
SUPPORTED_KINDS = {
    "toy": {"dgse", "dmse", "dmse_v", "ols", "iptw", "aiptw", "pca_adjust", "fa_adjust", "noncausal", "oracle_adjust"},
    "dataset": {"dgse", "dmse", "dmse_v", "ols", "iptw", "aiptw", "pca_adjust", "fa_adjust", "noncausal", "oracle_adjust"},
    "gwas": {"ols", "oracle_adjust", "pca_adjust", "fa_adjust", "dmse"},
    "linsem": {"ols", "linsem_external", "linsem_three_view"},
}


class ToyGenParams(ToyParams):
    image_proxy: bool = False


class DatasetGenParams(BaseModel):
    which: Literal["A", "B", "C", "D", "E"] = "A"
    n: int = Field(3000, ge=1)
    m_modalities: int = Field(1, ge=1)
    drop_modality: Optional[str] = None
    drop_fraction: float = Field(0.0, ge=0, le=1)

    @field_validator("which", mode="before")
    @classmethod
    def _upper(cls, value):
        return str(value).strip().upper()


class LinsemGenParams(BaseModel):
    sem: Literal["reference", "random"] = "reference"
    # 0 scores the estimators on exact population covariances
    n: int = Field(0, ge=0)
    dim_u: int = Field(1, ge=1)
    proxy_dim: int = Field(1, ge=1)
    binary_treatment: bool = False
    beta_yx: Optional[float] = None
    # noise variance of the W, Z and V proxies
    proxy_noise: float = Field(1.0, gt=0)

    @model_validator(mode="after")
    def _check(self):
        if self.proxy_dim < self.dim_u:
            raise ValueError("proxy_dim must be at least dim_u")
        if self.sem == "reference" and (self.dim_u != 1 or self.proxy_dim != 1):
            raise ValueError("the reference sem is scalar; use sem = random for wider proxies")
        if self.binary_treatment and self.n == 0:
            raise ValueError("binary_treatment needs sampled data (n > 0)")
        return self


GENERATOR_PARAMS: Dict[str, Type[BaseModel]] = {
    "toy": ToyGenParams,
    "dataset": DatasetGenParams,
    "gwas": GwasParams,
    "linsem": LinsemGenParams,
}


def _parse_list(value) -> List[str]:
    if isinstance(value, (list, tuple)):
        return [str(v).strip() for v in value]
    return [item.strip() for item in str(value).split(",") if item.strip()]


class ModelSpec(BaseModel):
    """One estimator of an experiment: its kind, architecture, training and free-form options"""

    label: str
    kind: str
    model: ModelConfig = Field(default_factory=ModelConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    options: Dict[str, str] = Field(default_factory=dict)

    @field_validator("kind")
    @classmethod
    def _known_kind(cls, value: str) -> str:
        if value not in MODEL_KINDS:
            raise ValueError(f"unknown model kind '{value}', expected one of {', '.join(MODEL_KINDS)}")
        return value

    def option(self, key: str, default: Optional[str] = None) -> Optional[str]:
        return self.options.get(key, default)

    def flag(self, key: str, default: bool) -> bool:
        raw = self.options.get(key)
        if raw is None:
            return default
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"model '{self.label}': option {key} = {raw!r} is not a boolean")

    def names(self, key: str) -> Optional[List[str]]:
        raw = self.options.get(key)
        return None if raw is None else _parse_list(raw)


class ExperimentConfig(BaseModel):
    name: str
    version: int = CONFIG_VERSION
    seeds: List[int]
    record_runtime: bool = False
    generator: str
    generator_params: Dict[str, str] = Field(default_factory=dict)
    settings: Dict[str, Dict[str, str]] = Field(default_factory=lambda: {"default": {}})
    models: List[ModelSpec]
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    splits: Tuple[float, float, float] = DEFAULT_SPLITS

    @field_validator("seeds", mode="before")
    @classmethod
    def _parse_seeds(cls, value):
        return [int(v) for v in _parse_list(value)]

    @model_validator(mode="after")
    def _check(self):
        if self.version != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {self.version}, expected {CONFIG_VERSION}")
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if any(f < 0 for f in self.splits) or abs(sum(self.splits) - 1.0) > 1e-9:
            raise ValueError(f"split fractions {self.splits} must be non-negative and sum to 1")
        if self.generator not in GENERATOR_PARAMS:
            raise ValueError(f"unknown generator '{self.generator}', expected one of {', '.join(GENERATOR_PARAMS)}")
        if self.generator in ("toy", "dataset") and min(self.splits[0], self.splits[2]) <= 0:
            raise ValueError("train and test fractions must be positive")
        if not self.models:
            raise ValueError("at least one model section is required")
        labels = [spec.label for spec in self.models]
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate model labels in {labels}")
        for spec in self.models:
            if spec.kind not in SUPPORTED_KINDS[self.generator]:
                raise ValueError(f"model kind '{spec.kind}' cannot be scored on the '{self.generator}' generator")
        if not self.settings:
            raise ValueError("at least one setting is required")
        for setting in self.settings:
            self.generator_config(setting)
        return self

    def generator_config(self, setting: str) -> BaseModel:
        """Typed generator parameters with the setting's overrides applied"""
        if setting not in self.settings:
            raise ConfigError(f"unknown setting '{setting}'")
        params = {**self.generator_params, **self.settings[setting]}
        cls = GENERATOR_PARAMS[self.generator]
        unknown = sorted(set(params) - set(cls.model_fields))
        if unknown:
            raise ValueError(f"unknown {self.generator} generator keys {unknown} (setting '{setting}')")
        try:
            return cls(**params)
        except ValidationError as exc:
            raise ValueError(f"setting '{setting}': {exc}") from exc

    def echo(self) -> Dict[str, str]:
        """Every resolved value, defaults included, as key = value pairs"""
        lines = {
            "experiment.name": self.name,
            "experiment.version": str(self.version),
            "experiment.seeds": ",".join(str(s) for s in self.seeds),
            "experiment.record_runtime": str(self.record_runtime).lower(),
            "generator.kind": self.generator,
            "splits": ",".join(repr(f) for f in self.splits),
        }
        for setting in self.settings:
            for key, value in self.generator_config(setting).model_dump().items():
                lines[f"setting.{setting}.{key}"] = str(value)
        for spec in self.models:
            lines[f"model.{spec.label}.kind"] = spec.kind
            for key, value in spec.model.model_dump().items():
                lines[f"model.{spec.label}.{key}"] = str(value)
            for key, value in spec.training.model_dump().items():
                lines[f"model.{spec.label}.training.{key}"] = str(value)
            for key, value in sorted(spec.options.items()):
                lines[f"model.{spec.label}.option.{key}"] = value
        return lines

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config: {exc}") from exc
        return _build(parser)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        return cls.from_text(path.read_text())


def _model_specs(label: str, section: Dict[str, str], base_training: Dict) -> List[dict]:
    """Split a model section into architecture, training and options; `beta = a, b` expands into a sweep"""
    section = dict(section)
    kind = section.pop("kind", label if label in MODEL_KINDS else None)
    if kind is None:
        raise ConfigError(f"model section '{label}' needs a kind")
    model, training, options = {}, dict(base_training), {}
    for key, value in section.items():
        if key in ModelConfig.model_fields:
            model[key] = value
        elif key in TrainingConfig.model_fields:
            training[key] = value
        else:
            options[key] = value

    betas = _parse_list(model.pop("beta")) if "beta" in model else [None]
    specs = []
    for beta in betas:
        arch = dict(model) if beta is None else {**model, "beta": beta}
        specs.append({
            "label": label if len(betas) == 1 else f"{label}[beta={beta}]",
            "kind": kind,
            "model": arch,
            "training": training,
            "options": options,
        })
    return specs


def _build(parser: configparser.ConfigParser) -> ExperimentConfig:
    if not parser.has_section("experiment"):
        raise ConfigError("config needs an [experiment] section")
    if not parser.has_section("generator"):
        raise ConfigError("config needs a [generator] section")

    experiment = dict(parser["experiment"])
    generator = dict(parser["generator"])
    kind = generator.pop("kind", None)
    training = dict(parser["training"]) if parser.has_section("training") else {}
    unknown = sorted(set(training) - set(TrainingConfig.model_fields))
    if unknown:
        raise ConfigError(f"unknown [training] keys {unknown}")

    settings, models = {}, []
    for section in parser.sections():
        if section.startswith("setting:"):
            settings[section.split(":", 1)[1].strip()] = dict(parser[section])
        elif section == "model" or section.startswith("model:"):
            label = section.split(":", 1)[1].strip() if ":" in section else parser[section].get("kind", "model")
            models.extend(_model_specs(label, parser[section], training))
        elif section not in ("experiment", "generator", "training", "splits"):
            raise ConfigError(f"unknown section [{section}]")

    splits = DEFAULT_SPLITS
    if parser.has_section("splits"):
        s = parser["splits"]
        try:
            splits = (s.getfloat("train", DEFAULT_SPLITS[0]), s.getfloat("val", DEFAULT_SPLITS[1]),
                      s.getfloat("test", DEFAULT_SPLITS[2]))
        except ValueError as exc:
            raise ConfigError(f"bad [splits] value: {exc}") from exc

    try:
        return ExperimentConfig(
            name=experiment.get("name", "experiment"),
            version=experiment.get("version", CONFIG_VERSION),
            seeds=experiment.get("seeds", ""),
            record_runtime=experiment.get("record_runtime", "false"),
            generator=kind or "",
            generator_params=generator,
            settings=settings or {"default": {}},
            models=models,
            training=training,
            splits=splits,
        )
    except ValidationError as exc:
        raise ConfigError(f"invalid experiment config: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
