"""Excepciones del simulador.

Todas llevan un mensaje legible; la CLI las traduce a códigos de salida.
"""


class ConfigurationError(ValueError):
    """Configuración física o de sesión inválida (código de salida 4)."""


class FrameError(ValueError):
    """Error al decodificar un frame del canal clásico."""


class BadMagicError(FrameError):
    """Los primeros 4 bytes no son el magic esperado."""


class UnsupportedVersionError(FrameError):
    """Versión de protocolo desconocida."""


class CrcMismatchError(FrameError):
    """El CRC32 no coincide con cabecera + payload."""


class TruncatedFrameError(FrameError):
    """Faltan bytes para completar el frame."""


class PayloadLengthError(FrameError):
    """payload_len no coincide con los bytes disponibles o el payload está mal formado."""


class UnknownFrameTypeError(FrameError):
    """Tipo de frame fuera de la tabla conocida."""


class ProtocolError(ValueError):
    """Intercambio mal formado entre Alice y Bob (longitudes, orden de frames)."""


class SynchronizationError(RuntimeError):
    """No se encontró un pico de correlación significativo."""


class ReconciliationFailure(RuntimeError):
    """El hash de verificación no coincide tras la corrección de errores (código 2)."""


class NoKeyPossible(RuntimeError):
    """La amplificación de privacidad no deja bits de clave."""


class CalibrationError(RuntimeError):
    """Clic fuera de la diagonal durante la calibración del FSG."""


class ExtractionAbort(RuntimeError):
    """Demasiadas confirmaciones sin origen en los clics de Eve (código 3)."""


class EngineFault(RuntimeError):
    """Se intentó programar un evento en el pasado."""


class StorageError(ValueError):
    """Archivo persistido corrupto o con formato desconocido."""
