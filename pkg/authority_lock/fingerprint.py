"""
Simulación de la huella de hardware (PUF) y derivación del trigger de autoridad.

Un PUF real responde a un desafío con bits que dependen de variaciones de
fabricación del chip. Aquí se simula con una función pseudoaleatoria con
clave (HMAC-SHA256) y etiqueta de separación de dominio, lo que da una
respuesta determinista, reproducible y con efecto avalancha.
"""

import hashlib
import hmac
import itertools
import logging
import struct
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .trigger import TriggerPattern, TriggerSpec

logger = logging.getLogger(__name__)

DOMAIN_TAG = b"authority-puf-v1"
RESPONSE_BYTES = 32


@dataclass(frozen=True)
class DeviceFingerprint:
    device_id: bytes
    challenge: bytes
    response: bytes

    def __post_init__(self):
        if not self.device_id or not self.challenge:
            raise InvalidArgumentError("device_id y challenge no pueden estar vacíos")
        if len(self.response) != RESPONSE_BYTES:
            raise InvalidArgumentError(
                f"La respuesta del PUF debe tener {RESPONSE_BYTES} bytes, tiene {len(self.response)}"
            )

    def to_dict(self):
        """Representación hexadecimal para archivos de configuración"""
        return {
            'device_id': self.device_id.hex(),
            'challenge': self.challenge.hex(),
            'response': self.response.hex(),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            device_id=bytes.fromhex(data['device_id']),
            challenge=bytes.fromhex(data['challenge']),
            response=bytes.fromhex(data['response']),
        )


def _as_bytes(value, name):
    if isinstance(value, str):
        value = value.encode('utf-8')
    if not isinstance(value, (bytes, bytearray)) or len(value) == 0:
        raise InvalidArgumentError(f"{name} debe ser una cadena de bytes no vacía")
    return bytes(value)


def _length_prefixed(*parts):
    return b"".join(struct.pack(">I", len(p)) + p for p in parts)


def derive_fingerprint(device_id, challenge):
    """Deriva la respuesta simulada del PUF para (device_id, challenge)"""
    device_id = _as_bytes(device_id, "device_id")
    challenge = _as_bytes(challenge, "challenge")
    response = hmac.new(DOMAIN_TAG, _length_prefixed(device_id, challenge), hashlib.sha256).digest()
    return DeviceFingerprint(device_id=device_id, challenge=challenge, response=response)


def fingerprint_digest(fp):
    """Hash SHA-256 que identifica la huella de origen de un trigger"""
    return hashlib.sha256(
        DOMAIN_TAG + _length_prefixed(fp.device_id, fp.challenge, fp.response)
    ).digest()


def expand_response(fp, n_bytes):
    """Expande la respuesta a n_bytes: response || H(response || 1) || H(response || 2) ..."""
    if n_bytes <= 0:
        raise InvalidArgumentError("n_bytes debe ser positivo")
    stream = bytearray(fp.response)
    for counter in itertools.count(1):
        if len(stream) >= n_bytes:
            break
        stream += hashlib.sha256(fp.response + struct.pack(">I", counter)).digest()
    return bytes(stream[:n_bytes])


def fingerprint_to_trigger(fp, channels=3, patch_h=3, patch_w=3):
    """Convierte la huella en un patrón (C, h, w) con valores b/255"""
    if channels <= 0 or patch_h <= 0 or patch_w <= 0:
        raise InvalidArgumentError(
            f"Dimensiones del trigger inválidas: ({channels}, {patch_h}, {patch_w})"
        )
    n_values = channels * patch_h * patch_w
    raw = np.frombuffer(expand_response(fp, n_values), dtype=np.uint8)
    values = (raw.astype(np.float32) / 255.0).reshape(channels, patch_h, patch_w)
    return TriggerPattern(values)


def build_trigger_spec(fp, channels=3, patch_h=3, patch_w=3, location=(0, 0)):
    """Construye el TriggerSpec completo anclado a la huella"""
    pattern = fingerprint_to_trigger(fp, channels, patch_h, patch_w)
    spec = TriggerSpec(pattern=pattern, location=tuple(location), fingerprint_digest=fingerprint_digest(fp))
    logger.info(
        f"Trigger de autoridad derivado: forma {pattern.shape}, posición {spec.location}, "
        f"huella {spec.fingerprint_digest.hex()[:16]}..."
    )
    return spec


def hamming_distance(a, b):
    """Distancia de Hamming en bits entre dos respuestas de igual longitud"""
    if len(a) != len(b):
        raise InvalidArgumentError("Las respuestas deben tener la misma longitud")
    bits = np.unpackbits(np.frombuffer(a, dtype=np.uint8) ^ np.frombuffer(b, dtype=np.uint8))
    return int(bits.sum())


def response_uniqueness(fingerprints):
    """Distancia de Hamming fraccional media entre todos los pares (ideal 0.5)"""
    fps = list(fingerprints)
    if len(fps) < 2:
        raise InvalidArgumentError("Se necesitan al menos dos huellas")
    total_bits = 8 * RESPONSE_BYTES
    distances = [
        hamming_distance(a.response, b.response) / total_bits
        for a, b in itertools.combinations(fps, 2)
    ]
    return float(np.mean(distances))
