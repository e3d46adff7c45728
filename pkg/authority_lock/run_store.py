"""
Directorios de ejecución de solo-anexado.

Cada comando crea run_<comando>_<YYYYmmdd_HHMMSS>[_n] bajo output_dir, con
config.snapshot.json y un manifest.json que lista los archivos producidos
con su hash SHA-256. Ningún archivo existente se sobrescribe.
"""

import csv
import datetime
import hashlib
import json
import logging
from pathlib import Path

from .analysis import MetricsRecord
from .errors import InvalidArgumentError

logger = logging.getLogger(__name__)

SNAPSHOT_FILE = "config.snapshot.json"
MANIFEST_FILE = "manifest.json"
METRICS_FILE = "metrics.csv"


def calculate_file_hash(file_path):
    """Calcula el hash SHA-256 de un archivo"""
    hash_sha256 = hashlib.sha256()
    with open(file_path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            hash_sha256.update(chunk)
    return hash_sha256.hexdigest()


class RunDirectory:
    def __init__(self, output_dir, command, timestamp=None):
        self.command = command
        self.timestamp = timestamp or datetime.datetime.now()
        base = Path(output_dir)
        base.mkdir(parents=True, exist_ok=True)

        name = f"run_{command}_{self.timestamp.strftime('%Y%m%d_%H%M%S')}"
        path, suffix = base / name, 1
        while True:
            try:
                path.mkdir()
                break
            except FileExistsError:
                suffix += 1
                path = base / f"{name}_{suffix}"
        self.path = path
        self.info = {
            'command': command,
            'timestamp': self.timestamp.isoformat(),
            'success': True,
            'errors': [],
        }
        logger.info(f"Directorio de ejecución creado: {self.path}")

    def file(self, name):
        target = self.path / name
        if target.exists():
            raise FileExistsError(f"El archivo ya existe en el directorio de ejecución: {target}")
        return target

    def write_json(self, name, data):
        target = self.file(name)
        with open(target, 'x', encoding='utf-8') as f:
            json.dump(data, f, indent=2, ensure_ascii=False)
        return target

    def write_text(self, name, text):
        target = self.file(name)
        with open(target, 'x', encoding='utf-8') as f:
            f.write(text)
        return target

    def write_csv(self, name, rows, fieldnames=None):
        rows = list(rows)
        fieldnames = fieldnames or (list(rows[0].keys()) if rows else [])
        target = self.file(name)
        with open(target, 'x', encoding='utf-8', newline='') as f:
            writer = csv.DictWriter(f, fieldnames=fieldnames)
            writer.writeheader()
            writer.writerows(rows)
        return target

    def write_snapshot(self, config):
        return self.write_json(SNAPSHOT_FILE, config.snapshot())

    def write_metrics(self, records):
        return self.write_csv(METRICS_FILE, [r.to_row() for r in records],
                              fieldnames=list(MetricsRecord.__dataclass_fields__))

    def add_error(self, message):
        self.info['success'] = False
        self.info['errors'].append(message)

    def finalize(self, **extra):
        """Escribe manifest.json con el hash de cada archivo producido"""
        files = {
            item.name: {'sha256': calculate_file_hash(item), 'size': item.stat().st_size}
            for item in sorted(self.path.iterdir())
            if item.is_file() and item.name != MANIFEST_FILE and item.suffix != ".log"
        }
        manifest = dict(self.info, files=files, **extra)
        path = self.write_json(MANIFEST_FILE, manifest)
        if self.info['success']:
            logging.info(f"Ejecución '{self.command}' completada: {self.path}")
        else:
            logging.error(f"Ejecución '{self.command}' completada con errores: {self.info['errors']}")
        return path


def load_snapshot(run_dir):
    with open(Path(run_dir) / SNAPSHOT_FILE, 'r', encoding='utf-8') as f:
        return json.load(f)


def load_metrics(run_dir):
    """Registros de métricas de un directorio de ejecución"""
    path = Path(run_dir) / METRICS_FILE
    if not path.exists():
        raise InvalidArgumentError(f"El directorio no contiene {METRICS_FILE}: {run_dir}")
    with open(path, 'r', encoding='utf-8', newline='') as f:
        return [MetricsRecord.from_row(row) for row in csv.DictReader(f)]


def find_runs(output_dir, command=None):
    """Directorios de ejecución ordenados por nombre (y por tanto por fecha)"""
    pattern = f"run_{command}_*" if command else "run_*"
    return sorted(p for p in Path(output_dir).glob(pattern) if p.is_dir())
