"""
errors.py
=========
Excepciones del sistema BNTK.

El CLI traduce cada familia a un código de salida:
- ConfigError / ValueError / FileNotFoundError -> 2
- NumericalAbort (y subclases) -> 3
"""


class ConfigError(ValueError):
    """Configuración de ejecución inválida (flags, archivos, rangos)."""


class DataFormatError(ValueError):
    """Archivo de datos con formato incorrecto (magic, longitud, truncado)."""


class NumericalAbort(RuntimeError):
    """Aborto numérico: pérdida no finita, gradientes no finitos, divergencia."""


class DegenerateEmbeddingError(NumericalAbort):
    """Embedding de norma cero donde Ξ, Σ₍₁₎ o Σ₍₂₎ dividen por ‖x‖."""


class CholeskyError(NumericalAbort):
    """La matriz de Gram no es PSD ni siquiera tras escalar el jitter."""
