"""
Jerarquía de excepciones del paquete authority_lock.

Las funciones de la librería lanzan estas excepciones; la capa de CLI las
captura y las traduce a códigos de salida.
"""


class AuthorityLockError(Exception):
    """Error base de authority_lock"""


class InvalidArgumentError(AuthorityLockError, ValueError):
    """Argumento fuera de rango o con forma inválida"""


class TrainingFailureError(AuthorityLockError):
    """El entrenamiento divergió (pérdida NaN o infinita)"""

    def __init__(self, message, epoch):
        super().__init__(f"{message} (época {epoch})")
        self.epoch = epoch


class AttackFailureError(AuthorityLockError):
    """La optimización de un ataque produjo un objetivo no finito"""

    def __init__(self, message, step):
        super().__init__(f"{message} (paso {step})")
        self.step = step


class DatasetIOError(AuthorityLockError, OSError):
    """Archivo de dataset ausente o truncado"""

    def __init__(self, message, path):
        super().__init__(f"{message}: {path}")
        self.path = str(path)


class ConfigError(AuthorityLockError):
    """Configuración de ejecución inválida"""

    def __init__(self, message, field=None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


class CheckpointMismatchError(AuthorityLockError):
    """El checkpoint no corresponde a la configuración (arquitectura, clases o forma)"""
