"""
Métricas, análisis de información mutua, proyecciones de features e informes.
"""

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.integrate import trapezoid
from sklearn.decomposition import PCA
from sklearn.manifold import TSNE

from .dataset import as_image_set, make_authorized_testset
from .errors import InvalidArgumentError
from .models import evaluate_accuracy, extract_features
from .trigger import SoftTrigger, TriggerSpec, apply_hw_trigger, apply_soft_trigger

logger = logging.getLogger(__name__)

MISSING = "—"
REPORT_COLUMNS = ['model', 'dataset', 'sigma', 'attack', 'seeds',
                  'acc_baseline', 'acc_auth', 'acc_clean', 'acc_reversed', 'gain_att']
METRIC_COLUMNS = REPORT_COLUMNS[5:]


def _apply_trigger(images, trigger):
    if trigger is None:
        return images
    if isinstance(trigger, TriggerSpec):
        return apply_hw_trigger(images, trigger)
    if isinstance(trigger, SoftTrigger):
        return apply_soft_trigger(images, trigger)
    if hasattr(trigger, 'apply'):
        return trigger.apply(images)
    raise InvalidArgumentError(f"Tipo de trigger no soportado: {type(trigger).__name__}")


def accuracy(model, dataset, trigger=None):
    """Precisión con el trigger dado (TriggerSpec, SoftTrigger, RecoveredTrigger) o sin él"""
    data = as_image_set(dataset)
    if len(data) == 0:
        raise InvalidArgumentError("El dataset de evaluación está vacío")
    return evaluate_accuracy(model, _apply_trigger(data.images, trigger), data.labels)


def attack_gain(acc_reversed, acc_clean):
    return acc_reversed - acc_clean


@dataclass
class MetricsRecord:
    model_id: str
    dataset_id: str
    sigma: float
    seed: int
    acc_auth: float
    acc_clean: float
    acc_baseline: float = None
    acc_reversed: float = None
    gain_att: float = None
    attack: str = None

    def __post_init__(self):
        if self.acc_reversed is not None and self.acc_clean is not None:
            expected = attack_gain(self.acc_reversed, self.acc_clean)
            if self.gain_att is None:
                self.gain_att = expected
            elif abs(self.gain_att - expected) > 1e-12:
                raise InvalidArgumentError(
                    f"gain_att={self.gain_att} no coincide con acc_reversed - acc_clean={expected}"
                )

    @property
    def context(self):
        return (self.model_id, self.dataset_id, float(self.sigma))

    def to_row(self):
        return asdict(self)

    @classmethod
    def from_row(cls, row):
        def _value(key, cast):
            value = row.get(key)
            return None if value in (None, "", "None") else cast(value)

        return cls(
            model_id=row['model_id'],
            dataset_id=row['dataset_id'],
            sigma=float(row['sigma']),
            seed=int(row['seed']),
            acc_auth=_value('acc_auth', float),
            acc_clean=_value('acc_clean', float),
            acc_baseline=_value('acc_baseline', float),
            acc_reversed=_value('acc_reversed', float),
            gain_att=_value('gain_att', float),
            attack=_value('attack', str),
        )


# --- Información mutua ---

@dataclass
class ProbeConfig:
    holdout: float = 0.3
    epochs: int = 300
    lr: float = 0.05
    weight_decay: float = 1e-4


def _entropy_bits(labels, num_classes):
    freq = np.bincount(labels, minlength=num_classes) / len(labels)
    freq = freq[freq > 0]
    return float(-(freq * np.log2(freq)).sum())


def mi_estimate(features, labels, probe_config=None, seed=0, num_classes=None):
    """Cota inferior variacional I(T; Y) >= H(Y) - CE_probe, en bits

    Una sonda lineal se entrena sobre una partición de las features y la
    entropía cruzada se mide en la partición reservada.
    """
    config = probe_config or ProbeConfig()
    features = np.asarray(features, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or len(features) != len(labels):
        raise InvalidArgumentError(f"Features {features.shape} incompatibles con {len(labels)} etiquetas")
    k = int(num_classes or labels.max() + 1)
    if len(np.unique(labels)) < 2:
        raise InvalidArgumentError("Las etiquetas deben cubrir al menos 2 clases")
    if len(labels) < 4 * k:
        raise InvalidArgumentError(f"Se necesitan al menos 4K = {4 * k} muestras, recibidas {len(labels)}")

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(labels))
    cut = max(k, int(round(config.holdout * len(labels))))
    held, fit = order[:cut], order[cut:]

    mean = features[fit].mean(axis=0)
    std = features[fit].std(axis=0) + 1e-6
    x_fit = torch.as_tensor((features[fit] - mean) / std)
    x_held = torch.as_tensor((features[held] - mean) / std)
    y_fit = torch.as_tensor(labels[fit])
    y_held = torch.as_tensor(labels[held])

    generator = torch.Generator().manual_seed(seed)
    probe = torch.nn.Linear(features.shape[1], k)
    with torch.no_grad():
        probe.weight.copy_(0.01 * torch.randn(probe.weight.shape, generator=generator))
        probe.bias.zero_()
    optimizer = torch.optim.Adam(probe.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    for _ in range(config.epochs):
        optimizer.zero_grad(set_to_none=True)
        F.cross_entropy(probe(x_fit), y_fit).backward()
        optimizer.step()

    with torch.no_grad():
        ce_bits = float(F.cross_entropy(probe(x_held), y_held)) / math.log(2)
    upper = math.log2(k)
    estimate = min(max(_entropy_bits(labels[held], k) - ce_bits, 0.0), upper)
    assert 0.0 <= estimate <= upper
    return estimate


@dataclass
class MICurve:
    epochs: list
    i_auth: list
    i_clean: list
    i_baseline: list
    auc_auth: float = None
    auc_clean: float = None

    def __post_init__(self):
        lengths = {len(self.epochs), len(self.i_auth), len(self.i_clean), len(self.i_baseline)}
        if len(lengths) != 1:
            raise InvalidArgumentError("Las listas de la curva de MI deben tener la misma longitud")
        if len(self.epochs) >= 2:
            self.auc_auth = mi_curve_auc(list(zip(self.epochs, self.i_auth)))
            self.auc_clean = mi_curve_auc(list(zip(self.epochs, self.i_clean)))

    def rows(self):
        return [
            {'epoch': e, 'i_auth': a, 'i_clean': c, 'i_baseline': b}
            for e, a, c, b in zip(self.epochs, self.i_auth, self.i_clean, self.i_baseline)
        ]


def mi_curve_auc(curve):
    """Integral trapezoidal de [(epoch, valor), ...] sobre el eje de épocas"""
    if len(curve) < 2:
        raise InvalidArgumentError("Se necesitan al menos 2 puntos para el AUC")
    epochs = np.array([p[0] for p in curve], dtype=np.float64)
    values = np.array([p[1] for p in curve], dtype=np.float64)
    if np.any(np.diff(epochs) <= 0):
        raise InvalidArgumentError("Las épocas deben ser estrictamente crecientes")
    return float(trapezoid(values, epochs))


class MICurveTracker:
    """Callback de época que mide I(T; Y) con y sin trigger de autoridad

    Se pasa como epoch_callback a implant (curvas auth / clean) y,
    opcionalmente, a fit_supervised del modelo de referencia (curva baseline).
    """

    def __init__(self, probe_set, spec, tap="penultimate", probe_config=None, seed=0):
        self.probe_set = as_image_set(probe_set)
        self.auth_set = make_authorized_testset(self.probe_set, spec)
        self.tap = tap
        self.probe_config = probe_config
        self.seed = seed
        self.values = {}
        self.baseline = {}

    def _estimate(self, model, images):
        features = extract_features(model, images, tap=self.tap)
        return mi_estimate(features, self.probe_set.labels, self.probe_config, self.seed,
                           num_classes=model.num_classes)

    def __call__(self, epoch, model):
        i_auth = self._estimate(model, self.auth_set.images)
        i_clean = self._estimate(model, self.probe_set.images)
        self.values[epoch] = (i_auth, i_clean)
        logger.info(f"MI época {epoch}: I_auth {i_auth:.3f} bits, I_clean {i_clean:.3f} bits")

    def baseline_callback(self, epoch, model):
        self.baseline[epoch] = self._estimate(model, self.probe_set.images)

    def curve(self):
        epochs = sorted(self.values)
        return MICurve(
            epochs=epochs,
            i_auth=[self.values[e][0] for e in epochs],
            i_clean=[self.values[e][1] for e in epochs],
            i_baseline=[self.baseline.get(e, float('nan')) for e in epochs],
        )


# --- Proyecciones y exportación de features ---

def _check_projection_input(features):
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 3 or features.shape[1] < 2:
        raise InvalidArgumentError(f"Se necesita una matriz (N >= 3, d >= 2), recibido {features.shape}")
    if np.linalg.matrix_rank(features - features.mean(axis=0)) < 2:
        raise InvalidArgumentError("Las features centradas tienen rango menor que 2")
    return features


def project_2d(features, method="pca", seed=0):
    """Proyección 2-D de las features (PCA determinista o t-SNE)"""
    features = _check_projection_input(features)
    if method == "pca":
        return PCA(n_components=2, svd_solver="full").fit_transform(features)
    if method == "tsne":
        perplexity = min(30.0, (len(features) - 1) / 3.0)
        return TSNE(n_components=2, perplexity=perplexity, init="pca", random_state=seed).fit_transform(features)
    raise InvalidArgumentError(f"Método de proyección desconocido: {method}")


def explained_variance_share(features):
    """Fracción de varianza explicada por las dos primeras componentes"""
    features = _check_projection_input(features)
    return float(PCA(n_components=2, svd_solver="full").fit(features).explained_variance_ratio_.sum())


def export_features(features, labels, directory, stem="features"):
    """Matriz float32 plana + archivo de etiquetas + manifiesto de texto"""
    features = np.ascontiguousarray(features, dtype="<f4")
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or len(features) != len(labels):
        raise InvalidArgumentError(f"Features {features.shape} incompatibles con {len(labels)} etiquetas")
    directory = Path(directory)
    matrix_path = directory / f"{stem}.f32"
    labels_path = directory / f"{stem}_labels.txt"
    with open(matrix_path, 'xb') as f:
        f.write(features.tobytes())
    with open(labels_path, 'x', encoding='utf-8') as f:
        f.write("\n".join(str(int(v)) for v in labels) + "\n")
    manifest = {
        'n': int(features.shape[0]),
        'd': int(features.shape[1]),
        'dtype': 'float32',
        'byte_order': 'little',
        'matrix_file': matrix_path.name,
        'labels_file': labels_path.name,
    }
    manifest_path = directory / f"{stem}.json"
    with open(manifest_path, 'x', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2)
    return manifest_path


def load_features(manifest_path):
    manifest_path = Path(manifest_path)
    with open(manifest_path, 'r', encoding='utf-8') as f:
        manifest = json.load(f)
    raw = np.fromfile(manifest_path.parent / manifest['matrix_file'], dtype="<f4")
    labels = np.loadtxt(manifest_path.parent / manifest['labels_file'], dtype=np.int64, ndmin=1)
    return raw.reshape(manifest['n'], manifest['d']), labels


# --- Informes ---

def _mean_or_none(values):
    values = [v for v in values if v is not None and not (isinstance(v, float) and math.isnan(v))]
    return float(np.mean(values)) if values else None


def report_rows(records):
    """Una fila por contexto (modelo, dataset, sigma) y ataque, con la media sobre semillas"""
    groups = {}
    for record in records:
        groups.setdefault((*record.context, record.attack), []).append(record)
    rows = []
    for (model_id, dataset_id, sigma, attack), group in groups.items():
        row = {'model': model_id, 'dataset': dataset_id, 'sigma': sigma, 'attack': attack,
               'seeds': len({r.seed for r in group})}
        for column in METRIC_COLUMNS[:-1]:
            row[column] = _mean_or_none([getattr(r, column) for r in group])
        if row['acc_reversed'] is not None and row['acc_clean'] is not None:
            row['gain_att'] = attack_gain(row['acc_reversed'], row['acc_clean'])
        else:
            row['gain_att'] = None
        rows.append(row)
    return rows


def _format_percent(value):
    return MISSING if value is None else f"{100.0 * value:.2f}"


def _format_row(row):
    return [str(row['model']), str(row['dataset']), f"{float(row['sigma']):g}", row['attack'] or MISSING,
            str(row['seeds'])] + [_format_percent(row[column]) for column in METRIC_COLUMNS]


def render_rows(rows, fmt="markdown"):
    table = [_format_row(row) for row in rows]
    if fmt == "csv":
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        writer.writerows(table)
        return buffer.getvalue()
    if fmt == "markdown":
        lines = ["| " + " | ".join(REPORT_COLUMNS) + " |",
                 "|" + "|".join("---" for _ in REPORT_COLUMNS) + "|"]
        lines += ["| " + " | ".join(cells) + " |" for cells in table]
        return "\n".join(lines) + "\n"
    raise InvalidArgumentError(f"Formato de informe desconocido: {fmt}")


def render_report(records, fmt="markdown"):
    """Tabla de métricas (porcentajes con 2 decimales, '—' si falta el valor)"""
    records = list(records)
    if not records:
        raise InvalidArgumentError("No hay registros para el informe")
    return render_rows(report_rows(records), fmt)


def read_report_csv(text):
    """Lee un informe CSV; los porcentajes vuelven como fracciones y '—' como None"""
    rows = []
    for raw in csv.DictReader(io.StringIO(text)):
        row = {'model': raw['model'], 'dataset': raw['dataset'],
               'sigma': float(raw['sigma']), 'attack': None if raw['attack'] == MISSING else raw['attack'],
               'seeds': int(raw['seeds'])}
        for column in METRIC_COLUMNS:
            row[column] = None if raw[column] == MISSING else float(raw[column]) / 100.0
        rows.append(row)
    return rows
