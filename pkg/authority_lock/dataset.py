"""
Datasets del esquema de autoridad.

Construye el dataset compuesto D_auth / D_rand, los conjuntos de prueba
autorizados, el aumento con ruido gaussiano y los cargadores de CIFAR-10
(formato binario) y de datos sintéticos para pruebas rápidas.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .errors import DatasetIOError, InvalidArgumentError
from .trigger import apply_hw_trigger

logger = logging.getLogger(__name__)

CIFAR10_SHAPE = (3, 32, 32)
CIFAR10_RECORD_BYTES = 1 + 3 * 32 * 32
CIFAR10_RECORDS_PER_FILE = 10000
CIFAR10_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST_FILES = ["test_batch.bin"]


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray
    label: int


class ImageSet(Sequence):
    """Secuencia de LabeledImage respaldada por un array (N, C, H, W)"""

    def __init__(self, images, labels, num_classes=None):
        images = np.asarray(images, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if images.ndim != 4 and not (images.size == 0 and len(labels) == 0):
            raise InvalidArgumentError(f"Se esperaba un array (N, C, H, W), recibido {images.shape}")
        if len(images) != len(labels):
            raise InvalidArgumentError(f"{len(images)} imágenes y {len(labels)} etiquetas")
        if num_classes is None:
            num_classes = int(labels.max()) + 1 if len(labels) else 0
        if len(labels) and (labels.min() < 0 or labels.max() >= num_classes):
            raise InvalidArgumentError(f"Etiquetas fuera de [0, {num_classes})")
        self.images = images
        self.labels = labels
        self.num_classes = int(num_classes)

    @classmethod
    def from_items(cls, items, num_classes=None):
        items = list(items)
        if not items:
            return cls(np.zeros((0, 1, 1, 1), dtype=np.float32), np.zeros(0, dtype=np.int64), num_classes or 0)
        images = np.stack([np.asarray(item.pixels, dtype=np.float32) for item in items])
        labels = np.array([item.label for item in items], dtype=np.int64)
        return cls(images, labels, num_classes)

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, index):
        if isinstance(index, slice):
            return self.take(np.arange(len(self))[index])
        return LabeledImage(pixels=self.images[index], label=int(self.labels[index]))

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def take(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return ImageSet(self.images[indices], self.labels[indices], self.num_classes)

    def subset(self, n, seed):
        """Subconjunto aleatorio de n elementos (determinista dado seed)"""
        if n is None or n >= len(self):
            return self
        rng = np.random.default_rng(seed)
        return self.take(np.sort(rng.choice(len(self), size=n, replace=False)))

    def split(self, fraction, seed):
        """Divide en dos subconjuntos disjuntos (fraction, 1 - fraction)"""
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(self))
        cut = int(round(fraction * len(self)))
        return self.take(np.sort(order[:cut])), self.take(np.sort(order[cut:]))


def as_image_set(data, num_classes=None):
    if isinstance(data, ImageSet):
        return data
    return ImageSet.from_items(data, num_classes)


@dataclass(frozen=True)
class CompositeDataset:
    auth: ImageSet
    rand: ImageSet
    rand_true_labels: np.ndarray
    origin: str
    seed: int
    num_classes: int
    resample_each_epoch: bool = False

    @property
    def auth_items(self):
        return self.auth

    @property
    def rand_items(self):
        return self.rand

    def resample_rand_labels(self, epoch):
        """Nuevas etiquetas incorrectas para D_rand (política de re-muestreo por época)"""
        rng = np.random.default_rng([self.seed, epoch])
        labels = _random_wrong_labels(self.rand_true_labels, self.num_classes, rng)
        return replace(self, rand=ImageSet(self.rand.images, labels, self.num_classes))


def _random_wrong_labels(true_labels, num_classes, rng):
    # y + U{1..K-1} mod K es uniforme sobre Y \ {y}
    offsets = rng.integers(1, num_classes, size=len(true_labels))
    return (true_labels + offsets) % num_classes


def build_composite(base_train, spec, seed, auth_fraction=1.0, num_classes=None,
                    origin="custom", resample_each_epoch=False):
    """Construye D_auth (con trigger, etiqueta real) y D_rand (limpio, etiqueta incorrecta)"""
    base = as_image_set(base_train, num_classes)
    if len(base) == 0:
        raise InvalidArgumentError("El conjunto base de entrenamiento está vacío")
    k = int(num_classes or base.num_classes)
    if k < 2:
        raise InvalidArgumentError("Se necesitan al menos 2 clases para asignar etiquetas incorrectas")
    if not 0.0 < auth_fraction <= 1.0:
        raise InvalidArgumentError(f"auth_fraction debe estar en (0, 1], recibido {auth_fraction}")

    rng = np.random.default_rng(seed)
    n_auth = max(1, int(round(auth_fraction * len(base))))
    if n_auth == len(base):
        auth_index = np.arange(len(base))
    else:
        auth_index = np.sort(rng.choice(len(base), size=n_auth, replace=False))

    auth = ImageSet(apply_hw_trigger(base.images[auth_index], spec), base.labels[auth_index], k)
    rand_labels = _random_wrong_labels(base.labels, k, rng)
    rand = ImageSet(base.images, rand_labels, k)

    logger.info(
        f"Dataset compuesto '{origin}': {len(auth)} autorizados, {len(rand)} aleatorizados, K={k}, seed={seed}"
    )
    return CompositeDataset(
        auth=auth,
        rand=rand,
        rand_true_labels=base.labels.copy(),
        origin=origin,
        seed=seed,
        num_classes=k,
        resample_each_epoch=resample_each_epoch,
    )


def make_authorized_testset(base_test, spec):
    """Aplica el trigger de hardware a todas las muestras, conservando etiquetas"""
    base = as_image_set(base_test)
    if len(base) == 0:
        return base
    return ImageSet(apply_hw_trigger(base.images, spec), base.labels, base.num_classes)


def gaussian_augment(x, sigma, rng):
    """x + eps, eps ~ N(0, sigma^2 I), sin recorte a [0, 1]

    Con arrays numpy rng es un np.random.Generator; con tensores torch es un
    torch.Generator (o None para el generador global).
    """
    if sigma < 0:
        raise InvalidArgumentError(f"sigma debe ser no negativo, recibido {sigma}")
    if isinstance(x, torch.Tensor):
        if sigma == 0:
            return x.clone()
        noise = torch.randn(x.shape, generator=rng, dtype=x.dtype, device="cpu").to(x.device)
        return x + sigma * noise
    x = np.asarray(x, dtype=np.float32)
    if sigma == 0:
        return x.copy()
    return (x + sigma * rng.standard_normal(x.shape)).astype(np.float32)


def _resolve_cifar_dir(path):
    path = Path(path)
    nested = path / "cifar-10-batches-bin"
    return nested if nested.is_dir() else path


def _read_cifar_file(file_path):
    if not file_path.exists():
        raise DatasetIOError("Archivo de CIFAR-10 no encontrado", file_path)
    raw = np.frombuffer(file_path.read_bytes(), dtype=np.uint8)
    if raw.size != CIFAR10_RECORD_BYTES * CIFAR10_RECORDS_PER_FILE:
        raise DatasetIOError(
            f"Archivo de CIFAR-10 truncado o corrupto ({raw.size} bytes)", file_path
        )
    records = raw.reshape(CIFAR10_RECORDS_PER_FILE, CIFAR10_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    pixels = records[:, 1:].reshape(-1, *CIFAR10_SHAPE).astype(np.float32) / 255.0
    return pixels, labels


def _read_cifar_split(directory, names):
    parts = [_read_cifar_file(directory / name) for name in names]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return ImageSet(images, labels, 10)


def load_cifar10(path):
    """Carga CIFAR-10 desde los archivos binarios estándar (50000 / 10000)"""
    directory = _resolve_cifar_dir(path)
    train = _read_cifar_split(directory, CIFAR10_TRAIN_FILES)
    test = _read_cifar_split(directory, CIFAR10_TEST_FILES)
    logger.info(f"CIFAR-10 cargado desde {directory}: {len(train)} entrenamiento, {len(test)} prueba")
    return train, test


def _balanced_labels(n, num_classes, rng):
    return rng.permutation(np.arange(n) % num_classes)


def synth_dataset(n, num_classes, image_shape=CIFAR10_SHAPE, seed=0, n_test=None, noise=0.1):
    """Imágenes sintéticas de blobs gaussianos por clase, separables linealmente"""
    if n <= 0 or num_classes < 2:
        raise InvalidArgumentError(f"Tamaños inválidos: n={n}, K={num_classes}")
    image_shape = tuple(int(v) for v in image_shape)
    if len(image_shape) != 3 or min(image_shape) <= 0:
        raise InvalidArgumentError(f"Forma de imagen inválida: {image_shape}")
    n_test = max(num_classes, n // 4) if n_test is None else n_test

    rng = np.random.default_rng(seed)
    prototypes = rng.choice(np.array([0.3, 0.7], dtype=np.float32), size=(num_classes, *image_shape))

    def _make(count):
        labels = _balanced_labels(count, num_classes, rng)
        images = prototypes[labels] + noise * rng.standard_normal((count, *image_shape))
        return ImageSet(np.clip(images, 0.0, 1.0).astype(np.float32), labels, num_classes)

    train, test = _make(n), _make(n_test)
    logger.info(f"Dataset sintético: {len(train)} entrenamiento, {len(test)} prueba, K={num_classes}")
    return train, test


def data_root():
    """Raíz de datasets: AUTHLOCK_DATA_DIR o el valor por defecto de config_local"""
    from config_local import Config

    return Path(Config.DATA_DIR)
