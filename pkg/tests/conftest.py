import json

import numpy as np
import pytest
import torch

from authority_lock.dataset import synth_dataset
from authority_lock.fingerprint import build_trigger_spec, derive_fingerprint
from authority_lock.models import LockedClassifier

SMALL_SHAPE = (3, 8, 8)
SMALL_K = 4


@pytest.fixture
def small_data():
    """(train, test) sintético de 4 clases con imágenes 3x8x8"""
    return synth_dataset(400, SMALL_K, SMALL_SHAPE, seed=0, n_test=200)


@pytest.fixture
def spec():
    fp = derive_fingerprint("dispositivo-prueba", "desafio-prueba")
    return build_trigger_spec(fp, channels=3, patch_h=3, patch_w=3, location=(0, 0))


@pytest.fixture
def constant_model():
    """MLP con cabeza a cero: todas las logits empatan y predice la clase 0"""
    return LockedClassifier.create("mlp", SMALL_K, SMALL_SHAPE, seed=0, zero_head=True)


@pytest.fixture
def mlp_model():
    return LockedClassifier.create("mlp", SMALL_K, SMALL_SHAPE, seed=0)


class ConstantClassifier:
    """Clasificador base que siempre vota por la misma clase"""

    def __init__(self, label, num_classes=3):
        self.label = label
        self.num_classes = num_classes

    def __call__(self, batch):
        logits = torch.zeros((batch.shape[0], self.num_classes))
        logits[:, self.label] = 1.0
        return logits


class ThresholdClassifier:
    """Clase 1 si el primer píxel supera el umbral, si no clase 0"""

    def __init__(self, threshold=0.0):
        self.threshold = threshold

    def __call__(self, batch):
        first = batch.reshape(batch.shape[0], -1)[:, 0]
        logits = torch.zeros((batch.shape[0], 2))
        logits[:, 1] = (first > self.threshold).float()
        logits[:, 0] = 1.0 - logits[:, 1]
        return logits


@pytest.fixture
def write_config(tmp_path):
    """Escribe un JSON de configuración pequeño (sintético + mlp) y devuelve su ruta"""

    def _write(**sections):
        config = {
            "dataset": {
                "name": "synth",
                "subset_size": None,
                "test_subset_size": 60,
                "synth": {"n": 200, "num_classes": SMALL_K, "image_shape": list(SMALL_SHAPE),
                          "noise": 0.1, "seed": 0},
            },
            "arch_id": "mlp",
            "implant": {"epochs": 3, "batch_size": 64},
            "attack": {"steps": 5, "data_size": 40, "finetune_samples": 20, "finetune_epochs": 1},
            "certify": {"n0": 10, "n": 20, "num_inputs": 5},
            "output_dir": str(tmp_path / "runs"),
            "device": "cpu",
        }
        for key, value in sections.items():
            if isinstance(value, dict) and isinstance(config.get(key), dict):
                config[key].update(value)
            else:
                config[key] = value
        path = tmp_path / f"config_{len(list(tmp_path.glob('config_*.json')))}.json"
        path.write_text(json.dumps(config), encoding='utf-8')
        return path

    return _write


def unit_images(n, shape=SMALL_SHAPE, seed=0):
    return np.random.default_rng(seed).random((n, *shape)).astype(np.float32)
