import os

from dotenv import load_dotenv

load_dotenv()


class Config:
    # Rutas de datos y resultados
    DATA_DIR = os.environ.get('AUTHLOCK_DATA_DIR') or 'data'
    OUTPUT_DIR = os.environ.get('AUTHLOCK_OUTPUT_DIR') or 'runs'

    # Dispositivo de cómputo: auto, cpu, cuda, cuda:1...
    DEVICE = os.environ.get('AUTHLOCK_DEVICE') or 'auto'

    LOG_LEVEL = os.environ.get('AUTHLOCK_LOG_LEVEL') or 'INFO'
    LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'
