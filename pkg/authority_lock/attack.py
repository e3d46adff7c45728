"""
Ataques de recuperación de trigger contra el modelo bloqueado.

- adaptive_attack: optimiza (m, delta) para restaurar la precisión sobre las
  etiquetas reales, regularizado por la norma L1 de la máscara.
- nc_recover / nc_sweep: recuperación por clase objetivo al estilo Neural
  Cleanse más el índice de anomalía MAD.
- pixel_attack: perturbación aditiva dispersa sin máscara (estilo PixelBackdoor).
- finetune_attack: finetuning supervisado con pocas muestras limpias.

Los rangos [0, 1] se imponen con una sigmoide sobre variables sin
restricción; el ataque devuelve la mejor iteración según el objetivo.
"""

import copy
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import as_image_set
from .errors import AttackFailureError, InvalidArgumentError
from .models import evaluate_accuracy, fit_supervised, predict
from .trigger import SoftTrigger, apply_soft_trigger, blend_tensor, mask_l1, to_tensor
from .trigger import perturbation_l2 as soft_perturbation_l2

logger = logging.getLogger(__name__)

ANOMALY_THRESHOLD = 2.0
MAD_CONSISTENCY = 1.4826
LAMBDA_SCHEDULE = (1e-3, 1e-2, 1e-1)
MASK_INIT_RANGE = (0.04, 0.06)


@dataclass
class RecoveredTrigger:
    soft: SoftTrigger
    mask_l1: float
    acc_reversed: float
    steps_used: int
    objective_trace: list
    acc_clean: float = None
    lambda_reg: float = 0.0
    seed: int = 0
    kind: str = "adaptive"
    target_class: int = None
    target_hit_rate: float = None
    additive: bool = False

    @property
    def gain(self):
        if self.acc_clean is None:
            return None
        return self.acc_reversed - self.acc_clean

    @property
    def perturbation(self):
        """Perturbación aditiva delta = 2 * pattern - 1 (solo ataques aditivos)"""
        return 2.0 * self.soft.pattern - 1.0

    def apply(self, x):
        x = np.asarray(x, dtype=np.float32)
        if self.additive:
            return np.clip(x + self.perturbation, 0.0, 1.0)
        return apply_soft_trigger(x, self.soft)

    def perturbation_l2(self, x):
        if not self.additive:
            return soft_perturbation_l2(x, self.soft)
        x = np.asarray(x, dtype=np.float64)
        return float(np.linalg.norm((self.apply(x) - x).ravel()))

    def summary(self):
        return {
            'kind': self.kind,
            'mask_l1': self.mask_l1,
            'acc_reversed': self.acc_reversed,
            'acc_clean': self.acc_clean,
            'steps_used': self.steps_used,
            'lambda_reg': self.lambda_reg,
            'seed': self.seed,
            'target_class': self.target_class,
            'target_hit_rate': self.target_hit_rate,
            'additive': self.additive,
            'best_objective': self.objective_trace[-1] if self.objective_trace else None,
            'objective_trace': [float(v) for v in self.objective_trace],
        }

    def save(self, directory, stem):
        directory = Path(directory)
        self.soft.save(directory, stem)
        summary_path = directory / f"{stem}_summary.json"
        with open(summary_path, 'x', encoding='utf-8') as f:
            json.dump(self.summary(), f, indent=2, ensure_ascii=False)
        return summary_path

    @classmethod
    def load(cls, summary_path):
        summary_path = Path(summary_path)
        with open(summary_path, 'r', encoding='utf-8') as f:
            summary = json.load(f)
        stem = summary_path.name[: -len("_summary.json")]
        soft = SoftTrigger.load(summary_path.parent / f"{stem}.json")
        return cls(
            soft=soft,
            mask_l1=summary['mask_l1'],
            acc_reversed=summary['acc_reversed'],
            steps_used=summary['steps_used'],
            objective_trace=list(summary.get('objective_trace', [])),
            acc_clean=summary.get('acc_clean'),
            lambda_reg=summary.get('lambda_reg', 0.0),
            seed=summary.get('seed', 0),
            kind=summary.get('kind', 'adaptive'),
            target_class=summary.get('target_class'),
            target_hit_rate=summary.get('target_hit_rate'),
            additive=summary.get('additive', False),
        )


@dataclass
class AnomalyReport:
    per_class_l1: list
    anomaly_index: float
    flagged: bool
    threshold: float = ANOMALY_THRESHOLD
    suspect_class: int = None

    def to_dict(self):
        return {
            'per_class_l1': [float(v) for v in self.per_class_l1],
            'anomaly_index': self.anomaly_index,
            'flagged': self.flagged,
            'threshold': self.threshold,
            'suspect_class': self.suspect_class,
        }

    def save(self, path):
        with open(path, 'x', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2)
        return Path(path)


def anomaly_index(per_class_l1, threshold=ANOMALY_THRESHOLD):
    """Índice de anomalía |min - mediana| / (1.4826 * MAD) de las normas por clase"""
    norms = np.asarray(per_class_l1, dtype=np.float64)
    if norms.ndim != 1 or len(norms) < 2:
        raise InvalidArgumentError("Se necesitan al menos 2 normas por clase")
    if np.any(norms < 0) or not np.all(np.isfinite(norms)):
        raise InvalidArgumentError("Las normas L1 deben ser finitas y no negativas")
    median = np.median(norms)
    mad = np.median(np.abs(norms - median))
    deviation = abs(norms.min() - median)
    if deviation == 0:
        index = 0.0
    elif mad == 0:
        logger.warning("MAD = 0 con una norma mínima distinta de la mediana: índice infinito")
        index = math.inf
    else:
        index = float(deviation / (MAD_CONSISTENCY * mad))
    return AnomalyReport(
        per_class_l1=norms.tolist(),
        anomaly_index=index,
        flagged=index > threshold,
        threshold=threshold,
        suspect_class=int(np.argmin(norms)),
    )


def _frozen_network(model):
    network = copy.deepcopy(model.network).eval()
    for parameter in network.parameters():
        parameter.requires_grad_(False)
    return network


def _split_data(data, eval_data, eval_fraction, seed):
    data = as_image_set(data)
    if len(data) == 0:
        raise InvalidArgumentError("El ataque necesita datos etiquetados no vacíos")
    if eval_data is not None:
        eval_set = as_image_set(eval_data)
        if len(eval_set) == 0:
            raise InvalidArgumentError("El conjunto de evaluación del ataque está vacío")
        return data, eval_set
    if len(data) < 2:
        raise InvalidArgumentError("Se necesitan al menos 2 muestras para separar optimización y evaluación")
    eval_set, opt_set = data.split(eval_fraction, seed)
    if len(eval_set) == 0 or len(opt_set) == 0:
        raise InvalidArgumentError(f"eval_fraction={eval_fraction} deja una partición vacía")
    return opt_set, eval_set


def _check_steps(steps, lr):
    if steps < 0:
        raise InvalidArgumentError("steps debe ser no negativo")
    if lr <= 0:
        raise InvalidArgumentError("lr debe ser positivo")


def _optimize_mask_pattern(network, images, targets, lambda_reg, steps, lr, seed, batch_size, device):
    """Minimiza CE(f(A_adv(x, m, delta)), t) + lambda * ||m||_1; devuelve la mejor iteración"""
    generator = torch.Generator().manual_seed(seed)
    channels, height, width = images.shape[1:]
    low, high = MASK_INIT_RANGE
    init_mask = low + (high - low) * torch.rand((height, width), generator=generator)
    init_pattern = torch.rand((channels, height, width), generator=generator).clamp(1e-3, 1 - 1e-3)
    mask_raw = torch.logit(init_mask).to(device).requires_grad_(True)
    pattern_raw = torch.logit(init_pattern).to(device).requires_grad_(True)
    optimizer = torch.optim.Adam([mask_raw, pattern_raw], lr=lr, betas=(0.5, 0.9))

    best_objective = math.inf
    best_mask, best_pattern = init_mask.clone(), init_pattern.clone()
    trace = []
    for step in range(1, steps + 1):
        idx = torch.randint(0, len(images), (min(batch_size, len(images)),), generator=generator).numpy()
        x = to_tensor(images[idx]).to(device)
        y = torch.as_tensor(targets[idx], device=device)
        mask = torch.sigmoid(mask_raw)
        pattern = torch.sigmoid(pattern_raw)
        objective = F.cross_entropy(network(blend_tensor(x, mask, pattern)), y) + lambda_reg * mask.sum()
        value = float(objective.item())
        if not math.isfinite(value):
            logger.error(f"Objetivo no finito en el paso {step} de la recuperación de trigger")
            raise AttackFailureError("El objetivo del ataque no es finito", step)
        if value < best_objective:
            best_objective = value
            best_mask, best_pattern = mask.detach().cpu().clone(), pattern.detach().cpu().clone()
        trace.append(best_objective)
        optimizer.zero_grad(set_to_none=True)
        objective.backward()
        optimizer.step()
        if step % 200 == 0:
            logger.info(f"Paso {step}/{steps}: mejor objetivo {best_objective:.4f}, L1 de la máscara {float(best_mask.sum()):.2f}")

    soft = SoftTrigger(mask=best_mask.numpy().clip(0, 1), pattern=best_pattern.numpy().clip(0, 1))
    return soft, trace


def _triggered_accuracy(model, images, labels, trigger):
    if isinstance(trigger, RecoveredTrigger):
        triggered = trigger.apply(images)
    else:
        triggered = apply_soft_trigger(images, trigger)
    return evaluate_accuracy(model, triggered, labels)


def _target_hit_rate(model, eval_set, trigger, target_class):
    keep = eval_set.labels != target_class
    images = eval_set.images[keep] if keep.any() else eval_set.images
    if isinstance(trigger, RecoveredTrigger):
        triggered = trigger.apply(images)
    else:
        triggered = apply_soft_trigger(images, trigger)
    return float(np.mean(predict(model, triggered) == target_class))


def adaptive_attack(model, data, lambda_reg=1e-2, steps=2000, lr=0.1, seed=0, batch_size=128,
                    eval_data=None, eval_fraction=0.5):
    """Ataque adaptativo: recupera un trigger que restaura la precisión sobre las etiquetas reales"""
    if lambda_reg < 0:
        raise InvalidArgumentError("lambda_reg debe ser no negativo")
    _check_steps(steps, lr)
    opt_set, eval_set = _split_data(data, eval_data, eval_fraction, seed)
    network = _frozen_network(model)
    soft, trace = _optimize_mask_pattern(network, opt_set.images, opt_set.labels, lambda_reg,
                                         steps, lr, seed, batch_size, model.device)
    acc_reversed = _triggered_accuracy(model, eval_set.images, eval_set.labels, soft)
    acc_clean = evaluate_accuracy(model, eval_set.images, eval_set.labels)
    logger.info(
        f"Ataque adaptativo (lambda={lambda_reg}): acc_reversed {acc_reversed:.4f}, "
        f"acc_clean {acc_clean:.4f}, L1 {mask_l1(soft):.2f}"
    )
    return RecoveredTrigger(
        soft=soft, mask_l1=mask_l1(soft), acc_reversed=acc_reversed, steps_used=steps,
        objective_trace=trace, acc_clean=acc_clean, lambda_reg=lambda_reg, seed=seed, kind="adaptive",
    )


def adaptive_attack_sweep(model, data, lambdas=LAMBDA_SCHEDULE, **kwargs):
    """Ejecuta el ataque adaptativo para cada lambda y conserva el mejor acc_reversed"""
    results = [adaptive_attack(model, data, lambda_reg=value, **kwargs) for value in lambdas]
    best = max(results, key=lambda r: r.acc_reversed)
    logger.info(f"Mejor lambda del barrido: {best.lambda_reg} (acc_reversed {best.acc_reversed:.4f})")
    return best


def nc_recover(model, data, target_class, lambda_reg=1e-2, steps=1000, lr=0.1, seed=0, batch_size=128,
               eval_data=None, eval_fraction=0.5):
    """Recuperación al estilo Neural Cleanse hacia una clase objetivo fija"""
    if not 0 <= target_class < model.num_classes:
        raise InvalidArgumentError(f"target_class fuera de [0, {model.num_classes})")
    if lambda_reg < 0:
        raise InvalidArgumentError("lambda_reg debe ser no negativo")
    _check_steps(steps, lr)
    opt_set, eval_set = _split_data(data, eval_data, eval_fraction, seed)
    network = _frozen_network(model)
    targets = np.full(len(opt_set), target_class, dtype=np.int64)
    soft, trace = _optimize_mask_pattern(network, opt_set.images, targets, lambda_reg,
                                         steps, lr, seed, batch_size, model.device)
    return RecoveredTrigger(
        soft=soft,
        mask_l1=mask_l1(soft),
        acc_reversed=_triggered_accuracy(model, eval_set.images, eval_set.labels, soft),
        steps_used=steps,
        objective_trace=trace,
        acc_clean=evaluate_accuracy(model, eval_set.images, eval_set.labels),
        lambda_reg=lambda_reg,
        seed=seed,
        kind="nc",
        target_class=int(target_class),
        target_hit_rate=_target_hit_rate(model, eval_set, soft, target_class),
    )


def nc_sweep(model, data, lambda_reg=1e-2, steps=1000, lr=0.1, seed=0, **kwargs):
    """Recupera un trigger por cada clase y calcula el índice de anomalía"""
    triggers = []
    for target in range(model.num_classes):
        trigger = nc_recover(model, data, target, lambda_reg=lambda_reg, steps=steps, lr=lr,
                             seed=seed + target, **kwargs)
        logger.info(
            f"Neural Cleanse clase {target}: L1 {trigger.mask_l1:.2f}, acierto objetivo "
            f"{trigger.target_hit_rate:.4f}, acc_reversed {trigger.acc_reversed:.4f}"
        )
        triggers.append(trigger)
    report = anomaly_index([t.mask_l1 for t in triggers])
    logger.info(f"Índice de anomalía: {report.anomaly_index:.3f} (marcado: {report.flagged})")
    return triggers, report


def pixel_attack(model, data, target_class, l1_weight=1e-3, steps=1000, lr=0.05, seed=0, batch_size=128,
                 eval_data=None, eval_fraction=0.5):
    """Perturbación aditiva por píxel, sin máscara, con penalización L1 sobre la perturbación

    delta = tanh(w) en (-1, 1); x' = clip(x + delta, 0, 1). Se guarda con la
    convención máscara = 1, patrón = (delta + 1) / 2.
    """
    if not 0 <= target_class < model.num_classes:
        raise InvalidArgumentError(f"target_class fuera de [0, {model.num_classes})")
    if l1_weight < 0:
        raise InvalidArgumentError("l1_weight debe ser no negativo")
    _check_steps(steps, lr)
    opt_set, eval_set = _split_data(data, eval_data, eval_fraction, seed)
    network = _frozen_network(model)
    device = model.device
    generator = torch.Generator().manual_seed(seed)
    raw = torch.zeros(opt_set.image_shape, device=device, requires_grad=True)
    optimizer = torch.optim.Adam([raw], lr=lr)

    best_objective = math.inf
    best_delta = torch.zeros(opt_set.image_shape)
    trace = []
    for step in range(1, steps + 1):
        idx = torch.randint(0, len(opt_set), (min(batch_size, len(opt_set)),), generator=generator).numpy()
        x = to_tensor(opt_set.images[idx]).to(device)
        y = torch.full((len(idx),), int(target_class), dtype=torch.long, device=device)
        delta = torch.tanh(raw)
        objective = F.cross_entropy(network(torch.clamp(x + delta, 0.0, 1.0)), y) + l1_weight * delta.abs().sum()
        value = float(objective.item())
        if not math.isfinite(value):
            raise AttackFailureError("El objetivo del ataque por píxel no es finito", step)
        if value < best_objective:
            best_objective = value
            best_delta = delta.detach().cpu().clone()
        trace.append(best_objective)
        optimizer.zero_grad(set_to_none=True)
        objective.backward()
        optimizer.step()

    channels, height, width = opt_set.image_shape
    soft = SoftTrigger(
        mask=np.ones((height, width), dtype=np.float32),
        pattern=((best_delta.numpy() + 1.0) / 2.0).clip(0, 1),
    )
    recovered = RecoveredTrigger(
        soft=soft, mask_l1=mask_l1(soft), acc_reversed=0.0, steps_used=steps, objective_trace=trace,
        lambda_reg=l1_weight, seed=seed, kind="pixel", target_class=int(target_class), additive=True,
    )
    recovered.acc_reversed = _triggered_accuracy(model, eval_set.images, eval_set.labels, recovered)
    recovered.acc_clean = evaluate_accuracy(model, eval_set.images, eval_set.labels)
    recovered.target_hit_rate = _target_hit_rate(model, eval_set, recovered, target_class)
    logger.info(
        f"Ataque por píxel clase {target_class}: acierto objetivo {recovered.target_hit_rate:.4f}, "
        f"acc_reversed {recovered.acc_reversed:.4f}, L1 de delta {float(best_delta.abs().sum()):.2f}"
    )
    return recovered


def pixel_sweep(model, data, l1_weight=1e-3, steps=1000, lr=0.05, seed=0, **kwargs):
    """Ataque por píxel hacia todas las clases objetivo"""
    return [
        pixel_attack(model, data, target, l1_weight=l1_weight, steps=steps, lr=lr, seed=seed + target, **kwargs)
        for target in range(model.num_classes)
    ]


def finetune_attack(model, clean_samples, eval_clean, eval_auth, epochs=10, lr=0.01, seed=0, batch_size=32):
    """Finetuning supervisado con pocas muestras limpias; devuelve (modelo', delta_clean, delta_auth)"""
    samples = as_image_set(clean_samples, model.num_classes)
    if len(samples) == 0:
        raise InvalidArgumentError("El finetuning necesita al menos una muestra limpia")
    if epochs < 0:
        raise InvalidArgumentError("epochs debe ser no negativo")
    eval_clean = as_image_set(eval_clean)
    eval_auth = as_image_set(eval_auth)
    if epochs == 0:
        return model.clone(), 0.0, 0.0

    before_clean = evaluate_accuracy(model, eval_clean.images, eval_clean.labels)
    before_auth = evaluate_accuracy(model, eval_auth.images, eval_auth.labels)
    tuned = fit_supervised(model, samples, epochs=epochs, lr=lr, seed=seed, batch_size=batch_size, cosine=False)
    delta_clean = evaluate_accuracy(tuned, eval_clean.images, eval_clean.labels) - before_clean
    delta_auth = evaluate_accuracy(tuned, eval_auth.images, eval_auth.labels) - before_auth
    logger.info(
        f"Finetuning con {len(samples)} muestras durante {epochs} épocas: "
        f"delta acc_clean {delta_clean:+.4f}, delta acc_auth {delta_auth:+.4f}"
    )
    return tuned, delta_clean, delta_auth
