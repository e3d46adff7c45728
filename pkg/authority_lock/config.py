"""
Configuración de ejecución.

Los archivos JSON del usuario se fusionan sobre la configuración por defecto
(y el perfil desk / paper) y se validan con pydantic antes de cualquier
cómputo. Los errores se traducen a ConfigError con la ruta del campo,
por ejemplo "implant.sigma".
"""

import copy
import json
import logging
from pathlib import Path
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from config_local import Config

from .errors import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_CONFIG = {
    "dataset": {
        "name": "synth",
        "path": None,
        "subset_size": None,
        "test_subset_size": None,
        "synth": {"n": 2000, "num_classes": 10, "image_shape": [3, 32, 32], "noise": 0.1, "seed": 0},
    },
    "arch_id": "smallcnn",
    "trigger": {
        "device_id": "authority-device-01",
        "challenge": "challenge-0001",
        "patch_h": 3,
        "patch_w": 3,
        "location": [0, 0],
    },
    "implant": {
        "lambda_rand": 1.0,
        "epochs": 30,
        "lr": 0.05,
        "sigma": 0.0,
        "seed": 0,
        "batch_size": 128,
        "auth_fraction": 1.0,
        "resample_each_epoch": False,
        "train_baseline": False,
        "track_mi": False,
        "mi_probe_size": 500,
        "harden": {"enabled": False, "steps_per_epoch": 1, "loss_ceiling": None, "lr": 0.01, "clean_size": 1000,
                   "inner_lr": 0.1, "inner_steps": 3},
    },
    "attack": {
        "lambda_reg": 0.01,
        "steps": 2000,
        "lr": 0.1,
        "seed": 0,
        "batch_size": 128,
        "data_size": 1000,
        "eval_fraction": 0.5,
        "sweep_lambdas": False,
        "pixel_l1_weight": 0.001,
        "pixel_lr": 0.05,
        "finetune_samples": 100,
        "finetune_epochs": 10,
        "finetune_lr": 0.01,
    },
    "certify": {
        "sigma": None,
        "n0": 100,
        "n": 1000,
        "alpha": 0.001,
        "num_inputs": 100,
        "inputs": "clean",
        "seed": 0,
        "allow_sigma_override": False,
    },
    "ablate": {"sigmas": [0.0, 0.25, 0.5, 0.75, 1.0], "gain_tolerance": 0.05, "min_acc_auth": 0.55},
    "output_dir": None,
    "device": None,
    "profile": "desk",
}

PROFILES = {
    "desk": {
        "dataset": {"subset_size": 10000, "test_subset_size": 2000},
        "implant": {"epochs": 30},
        "attack": {"steps": 2000},
        "certify": {"n": 1000, "num_inputs": 100},
    },
    "paper": {
        "dataset": {"subset_size": None, "test_subset_size": None},
        "implant": {"epochs": 200, "lr": 0.1},
        "attack": {"steps": 5000, "data_size": 5000},
        "certify": {"n": 100000, "num_inputs": 500},
    },
}


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SynthConfig(_Section):
    n: int = Field(gt=0)
    num_classes: int = Field(ge=2)
    image_shape: Tuple[int, int, int]
    noise: float = Field(ge=0)
    seed: int = 0


class DatasetConfig(_Section):
    name: Literal["synth", "cifar10"]
    path: Optional[str] = None
    subset_size: Optional[int] = Field(default=None, gt=0)
    test_subset_size: Optional[int] = Field(default=None, gt=0)
    synth: SynthConfig


class TriggerConfig(_Section):
    device_id: str = Field(min_length=1)
    challenge: str = Field(min_length=1)
    patch_h: int = Field(gt=0)
    patch_w: int = Field(gt=0)
    location: Tuple[int, int]

    @model_validator(mode="after")
    def _non_negative_location(self):
        if min(self.location) < 0:
            raise ValueError("location debe ser no negativa")
        return self


class HardenConfig(_Section):
    enabled: bool
    steps_per_epoch: int = Field(ge=1)
    loss_ceiling: Optional[float] = Field(default=None, gt=0)
    lr: float = Field(gt=0)
    clean_size: int = Field(gt=0)
    inner_lr: float = Field(ge=0)
    inner_steps: int = Field(ge=0)


class ImplantConfig(_Section):
    lambda_rand: float = Field(gt=0)
    epochs: int = Field(ge=1)
    lr: float = Field(gt=0)
    sigma: float = Field(ge=0)
    seed: int
    batch_size: int = Field(gt=0)
    auth_fraction: float = Field(gt=0, le=1)
    resample_each_epoch: bool
    train_baseline: bool
    track_mi: bool
    mi_probe_size: int = Field(gt=0)
    harden: HardenConfig


class AttackConfig(_Section):
    lambda_reg: float = Field(ge=0)
    steps: int = Field(ge=0)
    lr: float = Field(gt=0)
    seed: int
    batch_size: int = Field(gt=0)
    data_size: int = Field(ge=2)
    eval_fraction: float = Field(gt=0, lt=1)
    sweep_lambdas: bool
    pixel_l1_weight: float = Field(ge=0)
    pixel_lr: float = Field(gt=0)
    finetune_samples: int = Field(gt=0)
    finetune_epochs: int = Field(ge=0)
    finetune_lr: float = Field(gt=0)


class CertifyConfig(_Section):
    sigma: Optional[float] = Field(default=None, gt=0)
    n0: int = Field(ge=1)
    n: int = Field(ge=1)
    alpha: float = Field(gt=0, lt=1)
    num_inputs: int = Field(gt=0)
    inputs: Literal["clean", "authorized"]
    seed: int
    allow_sigma_override: bool


class AblateConfig(_Section):
    sigmas: List[float] = Field(min_length=1)
    gain_tolerance: float = Field(ge=0)
    min_acc_auth: float = Field(ge=0, le=1)

    @model_validator(mode="after")
    def _valid_sigmas(self):
        if any(s < 0 for s in self.sigmas):
            raise ValueError("los valores de sigma deben ser no negativos")
        self.sigmas = sorted(set(self.sigmas))
        return self


class RunConfig(_Section):
    dataset: DatasetConfig
    arch_id: Literal["mlp", "smallcnn", "resnet18"]
    trigger: TriggerConfig
    implant: ImplantConfig
    attack: AttackConfig
    certify: CertifyConfig
    ablate: AblateConfig
    output_dir: str
    device: str
    profile: Literal["desk", "paper"]

    @model_validator(mode="after")
    def _sigma_consistency(self):
        certify_sigma = self.certify.sigma
        if (certify_sigma is not None and self.implant.sigma > 0
                and certify_sigma != self.implant.sigma and not self.certify.allow_sigma_override):
            raise ValueError(
                f"certify.sigma={certify_sigma} difiere de implant.sigma={self.implant.sigma}; "
                f"active certify.allow_sigma_override para forzarlo"
            )
        return self

    def snapshot(self):
        return self.model_dump(mode="json")


def deep_merge(base, override):
    """Fusión recursiva de diccionarios; override gana"""
    merged = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _read_config_file(config_file):
    path = Path(config_file)
    if not path.exists():
        raise ConfigError(f"Archivo de configuración no encontrado: {path}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            loaded = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"JSON inválido en {path}: {e}") from e
    if not isinstance(loaded, dict):
        raise ConfigError(f"La configuración de {path} debe ser un objeto JSON")
    return loaded


def _field_path(error):
    # model_validator de RunConfig no tiene ruta: es la coherencia de sigma
    loc = [str(part) for part in error['loc'] if not isinstance(part, int)]
    return ".".join(loc) if loc else "certify.sigma"


def validate_config(raw):
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        field = _field_path(first)
        message = "; ".join(f"{_field_path(err)}: {err['msg']}" for err in e.errors())
        logging.error(f"Error de validación de la configuración: {message}")
        raise ConfigError(first['msg'] if len(e.errors()) == 1 else message, field=field) from e


def load_run_config(config_file=None, profile=None, overrides=None):
    """Carga, fusiona (defecto <- perfil <- archivo <- overrides) y valida"""
    loaded = _read_config_file(config_file) if config_file else {}
    overrides = overrides or {}
    profile = profile or overrides.get('profile') or loaded.get('profile') or DEFAULT_CONFIG['profile']
    if profile not in PROFILES:
        raise ConfigError(f"Perfil desconocido '{profile}' (disponibles: {sorted(PROFILES)})", field="profile")

    raw = deep_merge(deep_merge(DEFAULT_CONFIG, PROFILES[profile]), loaded)
    raw = deep_merge(raw, overrides)
    raw['profile'] = profile
    raw['output_dir'] = raw.get('output_dir') or Config.OUTPUT_DIR
    raw['device'] = raw.get('device') or Config.DEVICE
    if raw['dataset'].get('name') == 'cifar10' and not raw['dataset'].get('path'):
        raw['dataset']['path'] = Config.DATA_DIR

    config = validate_config(raw)
    logger.info(f"Configuración cargada (perfil {profile}){f' desde {config_file}' if config_file else ''}")
    return config
