"""
Estructuras de trigger y funciones de aplicación.

- apply_hw_trigger: estampa el patrón de hardware (sobrescritura dura).
- apply_soft_trigger: mezcla (1 - m) * x + m * delta del atacante, con la
  máscara m de un solo canal difundida sobre los C canales.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import InvalidArgumentError

logger = logging.getLogger(__name__)


def _check_unit_range(array, name):
    if array.size and (np.nanmin(array) < 0.0 or np.nanmax(array) > 1.0 or np.isnan(array).any()):
        raise InvalidArgumentError(f"{name} debe tener todos sus valores en [0, 1]")


@dataclass(frozen=True)
class TriggerPattern:
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 3 or min(values.shape) <= 0:
            raise InvalidArgumentError(f"El patrón debe tener forma (C, h, w) positiva, recibido {values.shape}")
        _check_unit_range(values, "El patrón")
        object.__setattr__(self, 'values', values)

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class TriggerSpec:
    pattern: TriggerPattern
    location: tuple = (0, 0)
    fingerprint_digest: bytes = field(default=b"\x00" * 32)

    def __post_init__(self):
        row, col = (int(v) for v in self.location)
        if row < 0 or col < 0:
            raise InvalidArgumentError(f"Posición del trigger negativa: {self.location}")
        object.__setattr__(self, 'location', (row, col))
        if len(self.fingerprint_digest) != 32:
            raise InvalidArgumentError("fingerprint_digest debe tener 32 bytes")

    def check_fits(self, image_shape):
        """Verifica que el parche quepa en una imagen (C, H, W)"""
        channels, height, width = image_shape[-3:]
        c, h, w = self.pattern.shape
        row, col = self.location
        if c != channels:
            raise InvalidArgumentError(f"El patrón tiene {c} canales y la imagen {channels}")
        if row + h > height or col + w > width:
            raise InvalidArgumentError(
                f"Parche {h}x{w} en {self.location} fuera de la imagen {height}x{width}"
            )

    def as_soft_trigger(self, image_shape):
        """Forma equivalente de A_hw como SoftTrigger con máscara binaria"""
        self.check_fits(image_shape)
        channels, height, width = image_shape[-3:]
        c, h, w = self.pattern.shape
        row, col = self.location
        mask = np.zeros((height, width), dtype=np.float32)
        mask[row:row + h, col:col + w] = 1.0
        pattern = np.zeros((channels, height, width), dtype=np.float32)
        pattern[:, row:row + h, col:col + w] = self.pattern.values
        return SoftTrigger(mask=mask, pattern=pattern)

    def to_dict(self):
        return {
            'pattern': self.pattern.values.tolist(),
            'location': list(self.location),
            'fingerprint_digest': self.fingerprint_digest.hex(),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            pattern=TriggerPattern(np.asarray(data['pattern'], dtype=np.float32)),
            location=tuple(data['location']),
            fingerprint_digest=bytes.fromhex(data['fingerprint_digest']),
        )

    def save(self, path):
        path = Path(path)
        with open(path, 'x', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2, ensure_ascii=False)
        logger.info(f"TriggerSpec guardado: {path}")
        return path

    @classmethod
    def load(cls, path):
        with open(path, 'r', encoding='utf-8') as f:
            return cls.from_dict(json.load(f))


@dataclass(frozen=True)
class SoftTrigger:
    mask: np.ndarray
    pattern: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=np.float32)
        pattern = np.asarray(self.pattern, dtype=np.float32)
        if mask.ndim != 2 or pattern.ndim != 3:
            raise InvalidArgumentError(
                f"La máscara debe ser (H, W) y el patrón (C, H, W); recibido {mask.shape} y {pattern.shape}"
            )
        if pattern.shape[1:] != mask.shape:
            raise InvalidArgumentError(f"Máscara {mask.shape} incompatible con patrón {pattern.shape}")
        _check_unit_range(mask, "La máscara")
        _check_unit_range(pattern, "El patrón")
        object.__setattr__(self, 'mask', mask)
        object.__setattr__(self, 'pattern', pattern)

    @property
    def image_shape(self):
        return self.pattern.shape

    def save(self, directory, stem):
        """Guarda el par (máscara, patrón) como .npy más un manifiesto de texto"""
        directory = Path(directory)
        files = {'mask': directory / f"{stem}_mask.npy", 'pattern': directory / f"{stem}_pattern.npy"}
        for key, file_path in files.items():
            with open(file_path, 'xb') as f:
                np.save(f, getattr(self, key))
        manifest = {
            'mask_file': files['mask'].name,
            'pattern_file': files['pattern'].name,
            'image_shape': list(self.image_shape),
            'mask_l1': mask_l1(self),
        }
        manifest_path = directory / f"{stem}.json"
        with open(manifest_path, 'x', encoding='utf-8') as f:
            json.dump(manifest, f, indent=2)
        return manifest_path

    @classmethod
    def load(cls, manifest_path):
        manifest_path = Path(manifest_path)
        with open(manifest_path, 'r', encoding='utf-8') as f:
            manifest = json.load(f)
        mask = np.load(manifest_path.parent / manifest['mask_file'])
        pattern = np.load(manifest_path.parent / manifest['pattern_file'])
        return cls(mask=mask, pattern=pattern)


def apply_hw_trigger(x, spec):
    """A_hw: sobrescribe la región del parche con el patrón de hardware

    Acepta una imagen (C, H, W) o un lote (N, C, H, W); no modifica la entrada.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.ndim not in (3, 4):
        raise InvalidArgumentError(f"Se esperaba (C, H, W) o (N, C, H, W), recibido {x.shape}")
    spec.check_fits(x.shape)
    _, h, w = spec.pattern.shape
    row, col = spec.location
    out = x.copy()
    out[..., :, row:row + h, col:col + w] = spec.pattern.values
    return out


def _check_soft_shapes(x, trig):
    if tuple(x.shape[-3:]) != tuple(trig.image_shape):
        raise InvalidArgumentError(f"Imagen {tuple(x.shape)} incompatible con trigger {trig.image_shape}")


def apply_soft_trigger(x, trig):
    """A_adv(x, m, delta) = (1 - m) * x + m * delta"""
    x = np.asarray(x, dtype=np.float32)
    _check_soft_shapes(x, trig)
    mask = trig.mask[None, :, :]
    return (1.0 - mask) * x + mask * trig.pattern


def blend_tensor(x, mask, pattern):
    """Versión diferenciable de A_adv sobre tensores (N, C, H, W)"""
    mask = mask.unsqueeze(0) if mask.dim() == 2 else mask
    return (1.0 - mask) * x + mask * pattern


def perturbation_l2(x, trig):
    """Norma L2 de A_adv(x) - x sobre las C*H*W entradas"""
    x = np.asarray(x, dtype=np.float32)
    delta = apply_soft_trigger(x, trig).astype(np.float64) - x.astype(np.float64)
    return float(np.linalg.norm(delta.ravel()))


def mask_l1(trig):
    return float(np.abs(trig.mask.astype(np.float64)).sum())


def to_tensor(x, device=None):
    """Convierte arrays numpy a tensores float32 en el dispositivo indicado"""
    if isinstance(x, torch.Tensor):
        return x.to(device=device, dtype=torch.float32) if device is not None else x.float()
    return torch.as_tensor(np.asarray(x, dtype=np.float32), device=device)


def export_png(array, path, scale=8):
    """Exporta un patrón (C, H, W) o una máscara (H, W) como PNG ampliado"""
    array = np.clip(np.asarray(array, dtype=np.float32), 0.0, 1.0)
    if array.ndim == 3:
        array = array[0] if array.shape[0] == 1 else np.transpose(array, (1, 2, 0))
    image = Image.fromarray((array * 255).round().astype(np.uint8))
    if scale > 1:
        image = image.resize((image.width * scale, image.height * scale), Image.NEAREST)
    image.save(path)
    logger.info(f"Imagen del trigger exportada: {path}")
    return Path(path)
