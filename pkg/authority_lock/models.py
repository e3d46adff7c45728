"""
Clasificadores bloqueados por la puerta de autoridad.

Incluye las arquitecturas (mlp, smallcnn, resnet18), la implantación con la
pérdida ponderada sobre D_auth / D_rand, el entrenamiento robusto con ruido
gaussiano, el endurecimiento contra finetuning y la extracción de features.
"""

import copy
import hashlib
import io
import json
import logging
import math
import random
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision
from torch.func import functional_call

from .dataset import ImageSet, as_image_set, gaussian_augment
from .errors import InvalidArgumentError, TrainingFailureError
from .trigger import to_tensor

logger = logging.getLogger(__name__)

FEATURE_TAPS = ("penultimate", "logits")


class MLPNet(nn.Module):
    """Perceptrón de dos capas ocultas para los datos sintéticos"""

    def __init__(self, num_classes, input_shape, hidden=128):
        super().__init__()
        in_features = int(np.prod(input_shape))
        self.body = nn.Sequential(
            nn.Flatten(),
            nn.Linear(in_features, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, hidden),
            nn.ReLU(inplace=True),
        )
        self.head = nn.Linear(hidden, num_classes)

    def features(self, x):
        return self.body(x)

    def forward(self, x):
        return self.head(self.features(x))


class SmallCNN(nn.Module):
    """Tres bloques conv-bn-relu-pool y una cabeza lineal, para entradas 32x32"""

    def __init__(self, num_classes, input_shape, widths=(32, 64, 128)):
        super().__init__()
        layers = []
        in_channels = input_shape[0]
        for width in widths:
            layers += [
                nn.Conv2d(in_channels, width, kernel_size=3, padding=1, bias=False),
                nn.BatchNorm2d(width),
                nn.ReLU(inplace=True),
                nn.Conv2d(width, width, kernel_size=3, padding=1, bias=False),
                nn.BatchNorm2d(width),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            ]
            in_channels = width
        self.body = nn.Sequential(*layers, nn.AdaptiveAvgPool2d(1), nn.Flatten())
        self.head = nn.Linear(in_channels, num_classes)

    def features(self, x):
        return self.body(x)

    def forward(self, x):
        return self.head(self.features(x))


class ResNet18Net(nn.Module):
    """ResNet-18 de torchvision con stem 3x3 para imágenes pequeñas"""

    def __init__(self, num_classes, input_shape):
        super().__init__()
        net = torchvision.models.resnet18(weights=None, num_classes=num_classes)
        net.conv1 = nn.Conv2d(input_shape[0], 64, kernel_size=3, stride=1, padding=1, bias=False)
        net.maxpool = nn.Identity()
        self.head = net.fc
        net.fc = nn.Identity()
        self.body = net

    def features(self, x):
        return self.body(x)

    def forward(self, x):
        return self.head(self.features(x))


ARCHITECTURES = {
    "mlp": MLPNet,
    "smallcnn": SmallCNN,
    "resnet18": ResNet18Net,
}


def build_network(arch_id, num_classes, input_shape, zero_head=False):
    if arch_id not in ARCHITECTURES:
        raise InvalidArgumentError(f"Arquitectura desconocida: {arch_id} (disponibles: {sorted(ARCHITECTURES)})")
    if num_classes < 2:
        raise InvalidArgumentError("num_classes debe ser al menos 2")
    network = ARCHITECTURES[arch_id](num_classes, tuple(input_shape))
    if zero_head:
        nn.init.zeros_(network.head.weight)
        nn.init.zeros_(network.head.bias)
    return network


def resolve_device(name="auto"):
    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(name)


def seed_everything(seed):
    """Fija todas las semillas para ejecuciones reproducibles en un dispositivo"""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    torch.cuda.manual_seed_all(seed)
    torch.backends.cudnn.deterministic = True
    torch.backends.cudnn.benchmark = False


@dataclass
class EpochRecord:
    epoch: int
    loss_total: float
    loss_auth: float
    loss_rand: float
    acc_auth: float
    acc_clean: float
    lr: float


@dataclass
class LockedClassifier:
    arch_id: str
    network: nn.Module
    num_classes: int
    input_shape: tuple
    train_sigma: float = 0.0
    trigger_digest: bytes = b"\x00" * 32
    seed: int = 0
    train_log: list = field(default_factory=list)
    epochs_trained: int = 0
    hardening_steps: int = 0
    hardening_ascents: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise InvalidArgumentError("num_classes debe ser al menos 2")
        if self.train_sigma < 0:
            raise InvalidArgumentError("train_sigma debe ser no negativo")
        self.input_shape = tuple(int(v) for v in self.input_shape)

    @classmethod
    def create(cls, arch_id, num_classes, input_shape, seed=0, device="cpu", **kwargs):
        seed_everything(seed)
        network = build_network(arch_id, num_classes, input_shape, kwargs.pop('zero_head', False))
        return cls(arch_id=arch_id, network=network.to(resolve_device(device)),
                   num_classes=num_classes, input_shape=input_shape, seed=seed, **kwargs)

    @property
    def device(self):
        return next(self.network.parameters()).device

    def clone(self, **changes):
        """Copia profunda de la red con campos opcionalmente reemplazados"""
        fields = {
            'arch_id': self.arch_id,
            'network': copy.deepcopy(self.network),
            'num_classes': self.num_classes,
            'input_shape': self.input_shape,
            'train_sigma': self.train_sigma,
            'trigger_digest': self.trigger_digest,
            'seed': self.seed,
            'train_log': list(self.train_log),
            'epochs_trained': self.epochs_trained,
            'hardening_steps': self.hardening_steps,
            'hardening_ascents': self.hardening_ascents,
        }
        fields.update(changes)
        return LockedClassifier(**fields)

    def save(self, directory):
        """Guarda los pesos con nombre direccionado por contenido y su manifiesto"""
        directory = Path(directory)
        buffer = io.BytesIO()
        torch.save({k: v.detach().cpu() for k, v in self.network.state_dict().items()}, buffer)
        blob = buffer.getvalue()
        digest = hashlib.sha256(blob).hexdigest()
        weights_path = directory / f"model_{digest[:12]}.pt"
        with open(weights_path, 'xb') as f:
            f.write(blob)

        manifest = {
            'arch_id': self.arch_id,
            'num_classes': self.num_classes,
            'input_shape': list(self.input_shape),
            'train_sigma': self.train_sigma,
            'trigger_digest': self.trigger_digest.hex(),
            'seed': self.seed,
            'epoch': self.epochs_trained,
            'hardening_steps': self.hardening_steps,
            'hardening_ascents': self.hardening_ascents,
            'weights_file': weights_path.name,
            'weights_sha256': digest,
        }
        manifest_path = directory / "model_manifest.json"
        with open(manifest_path, 'x', encoding='utf-8') as f:
            json.dump(manifest, f, indent=2, ensure_ascii=False)
        logger.info(f"Checkpoint guardado: {weights_path}")
        return manifest_path

    @classmethod
    def load(cls, manifest_path, device="cpu"):
        manifest_path = Path(manifest_path)
        if manifest_path.is_dir():
            manifest_path = manifest_path / "model_manifest.json"
        with open(manifest_path, 'r', encoding='utf-8') as f:
            manifest = json.load(f)
        weights_path = manifest_path.parent / manifest['weights_file']
        blob = weights_path.read_bytes()
        if hashlib.sha256(blob).hexdigest() != manifest['weights_sha256']:
            raise InvalidArgumentError(f"El hash de los pesos no coincide con el manifiesto: {weights_path}")
        network = build_network(manifest['arch_id'], manifest['num_classes'], manifest['input_shape'])
        network.load_state_dict(torch.load(io.BytesIO(blob), map_location="cpu"))
        return cls(
            arch_id=manifest['arch_id'],
            network=network.to(resolve_device(device)),
            num_classes=manifest['num_classes'],
            input_shape=tuple(manifest['input_shape']),
            train_sigma=manifest['train_sigma'],
            trigger_digest=bytes.fromhex(manifest['trigger_digest']),
            seed=manifest['seed'],
            epochs_trained=manifest['epoch'],
            hardening_steps=manifest.get('hardening_steps', 0),
            hardening_ascents=manifest.get('hardening_ascents', 0),
        )


def _check_batch(model, batch):
    batch = to_tensor(batch)
    if batch.dim() == len(model.input_shape):
        batch = batch.unsqueeze(0)
    if tuple(batch.shape[1:]) != model.input_shape:
        raise InvalidArgumentError(
            f"Lote con forma {tuple(batch.shape)} incompatible con la entrada {model.input_shape}"
        )
    return batch


def forward(model, batch, batch_size=512):
    """Logits (N, K) en modo inferencia"""
    batch = _check_batch(model, batch)
    model.network.eval()
    outputs = []
    with torch.no_grad():
        for start in range(0, len(batch), batch_size):
            chunk = batch[start:start + batch_size].to(model.device)
            outputs.append(model.network(chunk).float().cpu())
    if not outputs:
        return torch.zeros((0, model.num_classes))
    return torch.cat(outputs)


def predict(model, batch, batch_size=512):
    """Clase predicha por fila; los empates se resuelven por el índice menor"""
    return np.argmax(forward(model, batch, batch_size).numpy(), axis=1)


def evaluate_accuracy(model, images, labels, batch_size=512):
    if len(labels) == 0:
        raise InvalidArgumentError("No se puede medir la precisión de un conjunto vacío")
    return float(np.mean(predict(model, images, batch_size) == np.asarray(labels)))


def extract_features(model, batch, tap="penultimate", batch_size=512):
    """Activaciones que alimentan la capa de clasificación final"""
    if tap not in FEATURE_TAPS:
        raise InvalidArgumentError(f"Tap de features desconocido: {tap} (disponibles: {FEATURE_TAPS})")
    batch = _check_batch(model, batch)
    fn = model.network.features if tap == "penultimate" else model.network
    model.network.eval()
    outputs = []
    with torch.no_grad():
        for start in range(0, len(batch), batch_size):
            outputs.append(fn(batch[start:start + batch_size].to(model.device)).float().cpu())
    return torch.cat(outputs).numpy()


@dataclass
class HardeningConfig:
    clean: ImageSet
    steps_per_epoch: int = 1
    loss_ceiling: float = None
    lr: float = 0.01
    batch_size: int = 128
    inner_lr: float = 0.1
    inner_steps: int = 3


def _make_optimizer(network, lr, momentum, weight_decay):
    return torch.optim.SGD(network.parameters(), lr=lr, momentum=momentum, weight_decay=weight_decay)


def _sample_batch(n, batch_size, generator):
    return torch.randint(0, n, (min(batch_size, n),), generator=generator).numpy()


def weighted_loss(logits, labels, weights):
    """Pérdida ponderada sum(w * CE) / N y las CE por muestra"""
    ce = F.cross_entropy(logits, labels, reduction='none')
    return (weights * ce).sum() / len(labels), ce


def _weighted_step(network, optimizer, images, labels, weights, sigma, noise_gen, device):
    """Un paso de descenso sobre sum(w * CE) / N; devuelve las CE por muestra"""
    x = to_tensor(images)
    if sigma > 0:
        x = gaussian_augment(x, sigma, noise_gen)
    x = x.to(device)
    y = torch.as_tensor(labels, device=device)
    w = torch.as_tensor(weights, dtype=torch.float32, device=device)
    network.train()
    optimizer.zero_grad(set_to_none=True)
    loss, ce = weighted_loss(network(x), y, w)
    loss.backward()
    optimizer.step()
    return ce.detach().cpu().numpy(), float(loss.item())


def _simulated_finetune(network, x, y, inner_lr, inner_steps):
    """Parámetros tras inner_steps pasos de SGD sobre (x, y), como los daría un finetuning

    Aproximación de primer orden: el gradiente interno se trata como constante,
    así que el gradiente externo llega a los parámetros originales sin segundo orden.
    """
    params = dict(network.named_parameters())
    for _ in range(inner_steps):
        ce = F.cross_entropy(functional_call(network, params, (x,)), y)
        grads = torch.autograd.grad(ce, list(params.values()))
        params = {name: p - inner_lr * g for (name, p), g in zip(params.items(), grads)}
    return params


def _ascent_step(network, optimizer, images, labels, loss_ceiling, device, inner_lr=0.0, inner_steps=0):
    """Paso de ascenso sobre -CE limpia medida tras un finetuning simulado

    Solo aportan gradiente las muestras cuya CE tras el finetuning simulado no
    supera el techo; el paso se omite si ninguna lo cumple. Devuelve
    (CE media, aplicado).
    """
    x = to_tensor(images).to(device)
    y = torch.as_tensor(labels, device=device)
    network.train()
    optimizer.zero_grad(set_to_none=True)
    if inner_steps > 0:
        params = _simulated_finetune(network, x, y, inner_lr, inner_steps)
        logits = functional_call(network, params, (x,))
    else:
        logits = network(x)
    ce = F.cross_entropy(logits, y, reduction='none')
    value = float(ce.mean().item())
    if not math.isfinite(value):
        return value, False
    active = ce.detach() <= loss_ceiling
    if not bool(active.any()):
        return value, False
    (-ce[active].mean()).backward()
    optimizer.step()
    return value, True


def _hardening_round(network, implant_opt, harden_opt, comp_arrays, hardening, ceiling,
                     sigma, generators, device):
    images, labels, weights = comp_arrays
    batch_gen, noise_gen = generators
    clean = hardening.clean
    skipped = 0
    for _ in range(hardening.steps_per_epoch):
        if images is not None and len(images):
            idx = _sample_batch(len(images), hardening.batch_size, batch_gen)
            ce, _ = _weighted_step(network, implant_opt, images[idx], labels[idx], weights[idx],
                                   sigma, noise_gen, device)
            if not np.all(np.isfinite(ce)):
                return None
        idx = _sample_batch(len(clean), hardening.batch_size, batch_gen)
        value, applied = _ascent_step(network, harden_opt, clean.images[idx], clean.labels[idx], ceiling, device,
                                      hardening.inner_lr, hardening.inner_steps)
        if not math.isfinite(value):
            return None
        skipped += int(not applied)
    return skipped


def implant(model, comp, lambda_rand=1.0, epochs=30, lr=0.05, sigma=0.0, seed=0, batch_size=128,
            momentum=0.9, weight_decay=5e-4, eval_auth=None, eval_clean=None, hardening=None,
            epoch_callback=None):
    """Implanta la puerta de autoridad minimizando la pérdida ponderada

    L = (1/N) [ sum_auth CE(f(x), y) + lambda * sum_rand CE(f(x), y_rand) ]

    Con sigma > 0 todas las entradas (con el trigger ya aplicado) reciben
    ruido gaussiano antes de pasar por la red.
    """
    if lambda_rand < 0:
        raise InvalidArgumentError(f"lambda_rand debe ser positivo, recibido {lambda_rand}")
    if lambda_rand == 0 and len(comp.rand):
        logger.warning("lambda_rand = 0: las muestras aleatorizadas no contribuyen a la pérdida")
    if sigma < 0:
        raise InvalidArgumentError(f"sigma debe ser no negativo, recibido {sigma}")
    if epochs < 0 or batch_size <= 0:
        raise InvalidArgumentError("epochs y batch_size deben ser positivos")
    if len(comp.auth) == 0 and len(comp.rand) == 0:
        raise InvalidArgumentError("El dataset compuesto está vacío")

    seed_everything(seed)
    locked = model.clone(train_sigma=float(sigma), seed=seed, train_log=[])
    network, device = locked.network, locked.device
    optimizer = _make_optimizer(network, lr, momentum, weight_decay)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(epochs, 1))
    batch_gen = torch.Generator().manual_seed(seed)
    noise_gen = torch.Generator().manual_seed(seed + 1)

    eval_auth = comp.auth if eval_auth is None else as_image_set(eval_auth)
    if eval_clean is None:
        eval_clean = ImageSet(comp.rand.images, comp.rand_true_labels, comp.num_classes)
    eval_clean = as_image_set(eval_clean)

    harden_opt = None
    ceiling = None
    if hardening is not None:
        harden_opt = torch.optim.SGD(network.parameters(), lr=hardening.lr, momentum=momentum)
        ceiling = hardening.loss_ceiling if hardening.loss_ceiling is not None else math.log(comp.num_classes)

    n_auth = len(comp.auth)
    for epoch in range(1, epochs + 1):
        current = comp.resample_rand_labels(epoch) if comp.resample_each_epoch else comp
        images = np.concatenate([current.auth.images, current.rand.images]) if len(current.rand) else current.auth.images
        labels = np.concatenate([current.auth.labels, current.rand.labels])
        weights = np.concatenate([np.ones(n_auth, dtype=np.float32),
                                  np.full(len(current.rand), lambda_rand, dtype=np.float32)])

        order = torch.randperm(len(labels), generator=batch_gen).numpy()
        sums = {'total': 0.0, 'auth': 0.0, 'rand': 0.0}
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            ce, loss = _weighted_step(network, optimizer, images[idx], labels[idx], weights[idx],
                                      sigma, noise_gen, device)
            if not math.isfinite(loss):
                logger.error(f"Pérdida no finita durante la implantación en la época {epoch}")
                raise TrainingFailureError("La implantación divergió", epoch)
            is_auth = idx < n_auth
            sums['total'] += loss * len(idx)
            sums['auth'] += float(ce[is_auth].sum())
            sums['rand'] += float(ce[~is_auth].sum())

        if hardening is not None:
            skipped = _hardening_round(network, optimizer, harden_opt, (images, labels, weights),
                                       hardening, ceiling, sigma, (batch_gen, noise_gen), device)
            if skipped is None:
                raise TrainingFailureError("El endurecimiento divergió", epoch)
            locked.hardening_steps += hardening.steps_per_epoch
            locked.hardening_ascents += hardening.steps_per_epoch - skipped

        current_lr = optimizer.param_groups[0]['lr']
        scheduler.step()
        record = EpochRecord(
            epoch=epoch,
            loss_total=sums['total'] / len(labels),
            loss_auth=sums['auth'] / max(n_auth, 1),
            loss_rand=sums['rand'] / max(len(current.rand), 1),
            acc_auth=evaluate_accuracy(locked, eval_auth.images, eval_auth.labels) if len(eval_auth) else float('nan'),
            acc_clean=evaluate_accuracy(locked, eval_clean.images, eval_clean.labels) if len(eval_clean) else float('nan'),
            lr=current_lr,
        )
        locked.train_log.append(record)
        locked.epochs_trained = epoch
        logger.info(
            f"Época {epoch}/{epochs}: pérdida {record.loss_total:.4f} "
            f"(auth {record.loss_auth:.4f}, rand {record.loss_rand:.4f}), "
            f"acc_auth {record.acc_auth:.4f}, acc_clean {record.acc_clean:.4f}"
        )
        if epoch_callback is not None:
            epoch_callback(epoch, locked)

    return locked


def anti_finetune_harden(model, clean_data, steps=100, loss_ceiling=None, composite=None,
                         lambda_rand=1.0, lr=0.01, implant_lr=0.01, seed=0, batch_size=128,
                         inner_lr=0.1, inner_steps=3):
    """Endurece el modelo contra finetuning con ascenso sobre -CE limpio

    Cada paso intercala un paso del objetivo de implantación (si se pasa el
    dataset compuesto) con un paso de ascenso sobre la CE limpia. La CE se mide
    con los pesos que dejarían inner_steps pasos de finetuning (tasa inner_lr)
    sobre el mismo lote; las muestras cuya CE supera loss_ceiling (por defecto
    ln K) no aportan gradiente y el paso se omite si no queda ninguna.
    """
    clean = as_image_set(clean_data, model.num_classes)
    if len(clean) == 0:
        raise InvalidArgumentError("Se necesitan datos limpios para el endurecimiento")
    if steps < 0:
        raise InvalidArgumentError("steps debe ser no negativo")
    if inner_steps < 0 or inner_lr < 0:
        raise InvalidArgumentError("inner_steps e inner_lr deben ser no negativos")
    if not model.train_log and model.epochs_trained == 0:
        logger.warning("El modelo no parece implantado; el endurecimiento degradará su utilidad")
    ceiling = math.log(model.num_classes) if loss_ceiling is None else float(loss_ceiling)

    seed_everything(seed)
    hardened = model.clone()
    network, device = hardened.network, hardened.device
    implant_opt = _make_optimizer(network, implant_lr, 0.9, 5e-4)
    harden_opt = torch.optim.SGD(network.parameters(), lr=lr, momentum=0.9)
    batch_gen = torch.Generator().manual_seed(seed)
    noise_gen = torch.Generator().manual_seed(seed + 1)

    comp_arrays = (None, None, None)
    if composite is not None:
        images = np.concatenate([composite.auth.images, composite.rand.images])
        labels = np.concatenate([composite.auth.labels, composite.rand.labels])
        weights = np.concatenate([np.ones(len(composite.auth), dtype=np.float32),
                                  np.full(len(composite.rand), lambda_rand, dtype=np.float32)])
        comp_arrays = (images, labels, weights)

    config = HardeningConfig(clean=clean, steps_per_epoch=1, loss_ceiling=ceiling, lr=lr, batch_size=batch_size,
                             inner_lr=inner_lr, inner_steps=inner_steps)
    skipped = 0
    for step in range(1, steps + 1):
        result = _hardening_round(network, implant_opt, harden_opt, comp_arrays, config, ceiling,
                                  model.train_sigma, (batch_gen, noise_gen), device)
        if result is None:
            logger.error(f"Pérdida no finita durante el endurecimiento en el paso {step}")
            raise TrainingFailureError("El endurecimiento divergió", step)
        skipped += result

    hardened.hardening_steps += steps
    hardened.hardening_ascents += steps - skipped
    logger.info(f"Endurecimiento completado: {steps} pasos, {steps - skipped} ascensos aplicados, "
                f"{skipped} omitidos por el techo {ceiling:.4f}")
    return hardened


def fit_supervised(model, data, epochs=10, lr=0.05, seed=0, batch_size=128, momentum=0.9,
                   weight_decay=5e-4, cosine=True, epoch_callback=None):
    """Entrenamiento supervisado estándar de todos los parámetros"""
    data = as_image_set(data, model.num_classes)
    if len(data) == 0:
        raise InvalidArgumentError("El conjunto de entrenamiento está vacío")
    seed_everything(seed)
    trained = model.clone()
    network, device = trained.network, trained.device
    optimizer = _make_optimizer(network, lr, momentum, weight_decay)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(epochs, 1)) if cosine else None
    batch_gen = torch.Generator().manual_seed(seed)
    weights = np.ones(len(data), dtype=np.float32)

    for epoch in range(1, epochs + 1):
        order = torch.randperm(len(data), generator=batch_gen).numpy()
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            _, loss = _weighted_step(network, optimizer, data.images[idx], data.labels[idx], weights[idx],
                                     0.0, None, device)
            if not math.isfinite(loss):
                raise TrainingFailureError("El entrenamiento supervisado divergió", epoch)
            total += loss * len(idx)
        if scheduler is not None:
            scheduler.step()
        trained.epochs_trained += 1
        logger.debug(f"Época supervisada {epoch}/{epochs}: pérdida {total / len(data):.4f}")
        if epoch_callback is not None:
            epoch_callback(epoch, trained)
    return trained


def train_log_rows(model):
    """Filas (dict) del registro de entrenamiento para el CSV"""
    return [asdict(record) for record in model.train_log]
