"""
Suavizado aleatorio (randomized smoothing) y certificación L2.

El clasificador suavizado vota la clase del clasificador base sobre copias
ruidosas x + N(0, sigma^2 I). La certificación sigue el procedimiento en dos
fases: selección de la clase candidata con n0 muestras y estimación de la
cota inferior de Clopper-Pearson con n muestras nuevas; el radio certificado
es R = sigma * Phi^-1(p_A).
"""

import logging
import sys
from dataclasses import asdict, dataclass

import numpy as np
import torch
from scipy.stats import beta, binomtest, norm
from tqdm import tqdm

from .errors import InvalidArgumentError
from .models import LockedClassifier, forward
from .trigger import SoftTrigger, perturbation_l2

logger = logging.getLogger(__name__)

ABSTAIN = -1
DEFAULT_N0 = 100
DEFAULT_N = 1000
DEFAULT_ALPHA = 0.001
NOISE_BATCH = 500


@dataclass
class CertificationRecord:
    input_id: int
    prediction: int
    p_a_lower: float
    radius: float
    sigma: float
    n0: int
    n: int
    alpha: float

    @property
    def abstained(self):
        return self.prediction == ABSTAIN

    def to_row(self):
        return asdict(self)


def clopper_pearson_lower(k, n, alpha):
    """Cota inferior unilateral exacta al nivel 1 - alpha (cuantil de la Beta)"""
    if n < 1 or not 0 <= k <= n:
        raise InvalidArgumentError(f"Se requiere 0 <= k <= n y n >= 1 (k={k}, n={n})")
    if not 0.0 < alpha < 1.0:
        raise InvalidArgumentError(f"alpha debe estar en (0, 1), recibido {alpha}")
    if k == 0:
        return 0.0
    return float(beta.ppf(alpha, k, n - k + 1))


def inverse_normal_cdf(p):
    if not 0.0 < p < 1.0:
        raise InvalidArgumentError(f"p debe estar en (0, 1), recibido {p}")
    return float(norm.ppf(p))


def _base_logits(model):
    """Función lote -> logits para un LockedClassifier o cualquier callable"""
    if isinstance(model, LockedClassifier):
        return lambda batch: forward(model, batch)
    if not callable(model):
        raise InvalidArgumentError("El clasificador base debe ser un LockedClassifier o un callable")
    return model


def _check_sampling(sigma, *counts):
    if sigma <= 0:
        raise InvalidArgumentError(f"sigma debe ser positivo, recibido {sigma}")
    if any(c < 1 for c in counts):
        raise InvalidArgumentError("El número de muestras Monte Carlo debe ser al menos 1")


def _sample_counts(logits_fn, x, sigma, num, rng, num_classes=None, batch_size=NOISE_BATCH):
    """Conteo de clases argmax sobre num copias ruidosas de x

    El ruido sale secuencialmente del mismo Generator, por lo que los conteos
    no dependen de batch_size.
    """
    x = np.asarray(x, dtype=np.float32)
    counts = None
    remaining = num
    while remaining > 0:
        size = min(batch_size, remaining)
        remaining -= size
        noise = rng.standard_normal((size, *x.shape)).astype(np.float32)
        batch = torch.as_tensor(x[None] + sigma * noise)
        logits = logits_fn(batch)
        logits = logits.detach().cpu().numpy() if isinstance(logits, torch.Tensor) else np.asarray(logits)
        k = num_classes or logits.shape[1]
        votes = np.bincount(np.argmax(logits, axis=1), minlength=k)
        counts = votes if counts is None else counts + votes
    return counts


def smoothed_predict(model, x, sigma, n0=DEFAULT_N0, alpha=DEFAULT_ALPHA, rng=None, batch_size=NOISE_BATCH):
    """Voto mayoritario con prueba binomial exacta sobre las dos clases más votadas"""
    _check_sampling(sigma, n0)
    rng = np.random.default_rng() if rng is None else rng
    counts = _sample_counts(_base_logits(model), x, sigma, n0, rng, batch_size=batch_size)
    order = np.argsort(counts, kind="stable")[::-1]
    top, runner_up = int(counts[order[0]]), int(counts[order[1]]) if len(counts) > 1 else 0
    if binomtest(top, top + runner_up, p=0.5).pvalue > alpha:
        return ABSTAIN
    return int(order[0])


def certify(model, x, sigma, n0=DEFAULT_N0, n=DEFAULT_N, alpha=DEFAULT_ALPHA, rng=None,
            input_id=0, batch_size=NOISE_BATCH):
    _check_sampling(sigma, n0, n)
    if not 0.0 < alpha < 1.0:
        raise InvalidArgumentError(f"alpha debe estar en (0, 1), recibido {alpha}")
    rng = np.random.default_rng() if rng is None else rng
    logits_fn = _base_logits(model)

    selection = _sample_counts(logits_fn, x, sigma, n0, rng, batch_size=batch_size)
    candidate = int(np.argmax(selection))
    estimation = _sample_counts(logits_fn, x, sigma, n, rng, num_classes=len(selection), batch_size=batch_size)
    p_a_lower = clopper_pearson_lower(int(estimation[candidate]), n, alpha)

    if p_a_lower <= 0.5:
        prediction, radius = ABSTAIN, 0.0
    else:
        prediction, radius = candidate, sigma * inverse_normal_cdf(p_a_lower)
    return CertificationRecord(
        input_id=int(input_id), prediction=prediction, p_a_lower=p_a_lower, radius=float(radius),
        sigma=float(sigma), n0=int(n0), n=int(n), alpha=float(alpha),
    )


def _input_streams(count, seed):
    return [np.random.default_rng(child) for child in np.random.SeedSequence(seed).spawn(count)]


def certify_dataset(model, images, sigma, n0=DEFAULT_N0, n=DEFAULT_N, alpha=DEFAULT_ALPHA, seed=0,
                    batch_size=NOISE_BATCH):
    """Certifica cada entrada con su propio flujo de ruido derivado de seed"""
    images = np.asarray(images, dtype=np.float32)
    streams = _input_streams(len(images), seed)
    records = []
    for i in tqdm(range(len(images)), desc="Certificando", disable=not sys.stdout.isatty()):
        records.append(certify(model, images[i], sigma, n0, n, alpha, rng=streams[i],
                               input_id=i, batch_size=batch_size))
    certified = [r for r in records if not r.abstained]
    logger.info(
        f"Certificación completada: {len(records)} entradas, {len(records) - len(certified)} abstenciones, "
        f"radio medio {np.mean([r.radius for r in records]) if records else 0.0:.4f}"
    )
    return records


def smoothed_accuracy(model, images, labels, sigma, n0=DEFAULT_N0, alpha=DEFAULT_ALPHA, seed=0):
    """Precisión del clasificador suavizado (una abstención cuenta como fallo)"""
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise InvalidArgumentError("No se puede medir la precisión de un conjunto vacío")
    streams = _input_streams(len(images), seed)
    hits = [smoothed_predict(model, images[i], sigma, n0, alpha, rng=streams[i]) == labels[i]
            for i in range(len(images))]
    return float(np.mean(hits))


def base_noisy_accuracy(model, images, labels, sigma, seed=0):
    """Precisión del clasificador base en una sola pasada ruidosa"""
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise InvalidArgumentError("No se puede medir la precisión de un conjunto vacío")
    if sigma < 0:
        raise InvalidArgumentError(f"sigma debe ser no negativo, recibido {sigma}")
    rng = np.random.default_rng(seed)
    noisy = images + sigma * rng.standard_normal(images.shape).astype(np.float32)
    logits = _base_logits(model)(torch.as_tensor(noisy))
    logits = logits.detach().cpu().numpy() if isinstance(logits, torch.Tensor) else np.asarray(logits)
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def _trigger_l2(x, trig):
    if isinstance(trig, SoftTrigger):
        return perturbation_l2(x, trig)
    return trig.perturbation_l2(x)


def check_robustness_condition(record, x, trig):
    """||A_adv(x) - x||_2 < R(x) (desigualdad estricta)"""
    if record.abstained:
        raise InvalidArgumentError(f"La entrada {record.input_id} no está certificada (ABSTAIN)")
    return _trigger_l2(x, trig) < record.radius


def robustness_summary(records, images, trig):
    """Resumen agregado de la condición de robustez sobre todas las entradas

    Las entradas con ABSTAIN cuentan como fuera del radio.
    """
    images = np.asarray(images, dtype=np.float32)
    if len(records) != len(images):
        raise InvalidArgumentError(f"{len(records)} registros para {len(images)} entradas")
    if not records:
        raise InvalidArgumentError("No hay registros de certificación")
    norms = [_trigger_l2(images[r.input_id], trig) for r in records]
    inside = [not r.abstained and l2 < r.radius for r, l2 in zip(records, norms)]
    return {
        'fraction_inside_radius': float(np.mean(inside)),
        'mean_radius': float(np.mean([r.radius for r in records])),
        'mean_perturbation_l2': float(np.mean(norms)),
        'certified': int(sum(not r.abstained for r in records)),
        'total': len(records),
    }
