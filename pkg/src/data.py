"""
data.py
=======
Adquisición y construcción de conjuntos de datos.

Este módulo se encarga de:
- Leer MNIST en formato IDX (big-endian, opcionalmente comprimido con gzip)
- Leer CIFAR-10 binario (registros de 3073 bytes) conservando un par de clases
- Generar datos sintéticos de regresión con un proceso gaussiano profundo de dos etapas
- Generar etiquetas por proyección aleatoria fija
- Normalizar entradas y exportar datasets a CSV

Todos los generadores son puros en (argumentos, semilla).
"""

import csv
import gzip
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from src.errors import DataFormatError
from src.init_oracle import gp_sample
from src.kernel_core import relu_sigma_matrix


logger = logging.getLogger("Data")

NORMALIZATIONS = ("none", "unit_pixels", "mean_sq_norm")

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CIFAR_RECORD_BYTES = 3073
CIFAR_PIXELS = 3072

SYNTHETIC_HIDDEN_FEATURES = 16


@dataclass
class Dataset:
    """
    Conjunto de datos con partición train/test.

    Attributes:
        train_x: Entradas N × d₀
        train_y: Objetivos N × d_r
        test_x: Entradas N_test × d₀ (puede estar vacío)
        test_y: Objetivos N_test × d_r
        name: Nombre del conjunto
        normalization: Modo de normalización aplicado
        task: 'classification' (objetivos one-hot) o 'regression'
    """
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    name: str
    normalization: str = "none"
    task: str = "classification"

    def __post_init__(self):
        if self.train_x.shape[0] != self.train_y.shape[0]:
            raise ValueError("train_x y train_y tienen distinto número de filas")
        if self.test_x.shape[0] != self.test_y.shape[0]:
            raise ValueError("test_x y test_y tienen distinto número de filas")
        if self.train_x.shape[0] == 0:
            raise ValueError(f"Dataset '{self.name}' sin muestras de entrenamiento")
        for array in (self.train_x, self.train_y, self.test_x, self.test_y):
            if not np.all(np.isfinite(array)):
                raise DataFormatError(f"Dataset '{self.name}' contiene NaN/Inf")
        if self.task == "classification":
            for targets in (self.train_y, self.test_y):
                if len(targets) and not np.all(np.sum(targets == 1.0, axis=1) == 1):
                    raise DataFormatError(f"Dataset '{self.name}': objetivos no one-hot")

    @property
    def input_dim(self) -> int:
        return self.train_x.shape[1]

    @property
    def output_dim(self) -> int:
        return self.train_y.shape[1]

    def summary(self) -> str:
        return (f"{self.name}: N={len(self.train_x)}, N_test={len(self.test_x)}, "
                f"d₀={self.input_dim}, d_r={self.output_dim}, norm={self.normalization}")


# ============================================================================
# Normalización
# ============================================================================

def normalize_inputs(train_x: np.ndarray, test_x: np.ndarray,
                     mode: str = "mean_sq_norm") -> Tuple[np.ndarray, np.ndarray]:
    """
    Normaliza entradas con estadísticas de train aplicadas a ambas particiones.

    Modos:
        none: sin cambios
        unit_pixels: divide por el máximo absoluto de train
        mean_sq_norm: reescala para que la media de ‖ξ‖² en train sea d₀
    """
    if mode not in NORMALIZATIONS:
        raise ValueError(f"Normalización desconocida: {mode}. Opciones: {', '.join(NORMALIZATIONS)}")
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    if mode == "none":
        return train_x, test_x
    if mode == "unit_pixels":
        peak = float(np.max(np.abs(train_x)))
        if peak == 0.0:
            return train_x, test_x
        return train_x / peak, test_x / peak

    mean_sq = float(np.mean(np.sum(train_x * train_x, axis=1)))
    if mean_sq == 0.0:
        raise ValueError("No se puede normalizar: todas las entradas de train son cero")
    factor = math.sqrt(train_x.shape[1] / mean_sq)
    return train_x * factor, test_x * factor


# ============================================================================
# MNIST (IDX)
# ============================================================================

def _read_bytes(path: Path) -> bytes:
    if not path.exists():
        raise FileNotFoundError(f"Archivo no encontrado: {path}")
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def read_idx(path: str, expected_magic: int) -> np.ndarray:
    """
    Lee un archivo IDX de bytes sin signo.

    Returns:
        Arreglo uint8 con la forma declarada en la cabecera

    Raises:
        DataFormatError: Magic incorrecto o archivo truncado
    """
    path = Path(path)
    data = _read_bytes(path)
    if len(data) < 4:
        raise DataFormatError(f"{path}: archivo truncado")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise DataFormatError(f"{path}: magic 0x{magic:08x}, se esperaba 0x{expected_magic:08x}")

    ndim = magic & 0xFF
    header_size = 4 + 4 * ndim
    if len(data) < header_size:
        raise DataFormatError(f"{path}: cabecera truncada")
    shape = struct.unpack(f">{ndim}I", data[4:header_size])
    expected = int(np.prod(shape))
    if len(data) - header_size < expected:
        raise DataFormatError(
            f"{path}: se esperaban {expected} bytes de datos, hay {len(data) - header_size}"
        )
    return np.frombuffer(data, dtype=np.uint8, count=expected, offset=header_size).reshape(shape)


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    targets = np.zeros((len(labels), num_classes))
    targets[np.arange(len(labels)), labels] = 1.0
    return targets


def _read_mnist_split(images_path: str, labels_path: str, limit: Optional[int],
                      classes: Optional[Sequence[int]]) -> Tuple[np.ndarray, np.ndarray]:
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"{images_path}: {images.shape[0]} imágenes pero {labels.shape[0]} etiquetas"
        )
    if labels.size and labels.max() > 9:
        raise DataFormatError(f"{labels_path}: etiqueta fuera de rango {labels.max()}")

    if classes is not None:
        keep = np.isin(labels, np.asarray(list(classes)))
        images, labels = images[keep], labels[keep]
    if limit is not None:
        images, labels = images[:limit], labels[:limit]

    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return x, _one_hot(labels.astype(np.int64), 10)


def load_mnist_idx(images_path: str, labels_path: str, limit: Optional[int] = None,
                   classes: Optional[Sequence[int]] = None,
                   test_images_path: Optional[str] = None, test_labels_path: Optional[str] = None,
                   test_limit: Optional[int] = None,
                   normalization: str = "none") -> Dataset:
    """
    Carga MNIST desde archivos IDX.

    Los píxeles se escalan a [0, 1] y los objetivos son one-hot de 10
    dimensiones. Sin archivos de test, la partición de test queda vacía.

    Args:
        images_path, labels_path: Archivos IDX de entrenamiento (.gz aceptado)
        limit: Máximo de muestras de entrenamiento (None = todas)
        classes: Dígitos a conservar (None = todos)
        normalization: Modo de normalize_inputs

    Raises:
        ValueError: Si limit = 0 o no queda ninguna muestra
        DataFormatError: Magic, dimensiones o longitud inválidas
    """
    if limit is not None and limit <= 0:
        raise ValueError(f"limit debe ser positivo, se recibió {limit}")

    train_x, train_y = _read_mnist_split(images_path, labels_path, limit, classes)
    if len(train_x) == 0:
        raise ValueError(f"{images_path}: no quedan muestras tras filtrar")

    if test_images_path and test_labels_path:
        test_x, test_y = _read_mnist_split(test_images_path, test_labels_path, test_limit, classes)
    else:
        test_x, test_y = np.zeros((0, train_x.shape[1])), np.zeros((0, 10))

    train_x, test_x = normalize_inputs(train_x, test_x, normalization)
    dataset = Dataset(train_x, train_y, test_x, test_y, "mnist", normalization)
    logger.info(f"Cargado {dataset.summary()}")
    return dataset


# ============================================================================
# CIFAR-10 (binario)
# ============================================================================

def _read_cifar_records(paths: Iterable[str]) -> Tuple[np.ndarray, np.ndarray]:
    labels, pixels = [], []
    for path in paths:
        path = Path(path)
        data = _read_bytes(path)
        if len(data) % CIFAR_RECORD_BYTES != 0:
            raise DataFormatError(
                f"{path}: longitud {len(data)} no divisible por {CIFAR_RECORD_BYTES}"
            )
        records = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        labels.append(records[:, 0].astype(np.int64))
        pixels.append(records[:, 1:])
    if not labels:
        raise ValueError("Se necesita al menos un archivo CIFAR-10")
    return np.concatenate(labels), np.concatenate(pixels)


def _select_pair(labels, pixels, class_a, class_b, limit):
    keep = (labels == class_a) | (labels == class_b)
    labels, pixels = labels[keep], pixels[keep]
    if limit is not None:
        labels, pixels = labels[:limit], pixels[:limit]
    targets = np.zeros((len(labels), 2))
    targets[labels == class_a, 0] = 1.0
    targets[labels == class_b, 1] = 1.0
    return pixels.astype(np.float64) / 255.0, targets


def load_cifar10_pair(bin_paths: Sequence[str], class_a: int = 5, class_b: int = 4,
                      test_paths: Optional[Sequence[str]] = None, limit: Optional[int] = None,
                      test_limit: Optional[int] = None, normalization: str = "none") -> Dataset:
    """
    Carga un problema binario de CIFAR-10.

    Por defecto (perro, ciervo) = etiquetas (5, 4). Objetivos one-hot de
    2 dimensiones: class_a → (1, 0), class_b → (0, 1).

    Raises:
        DataFormatError: Longitud de archivo no divisible por 3073
        ValueError: Ninguna de las dos clases está presente
    """
    if class_a == class_b:
        raise ValueError("class_a y class_b deben ser distintas")
    if limit is not None and limit <= 0:
        raise ValueError(f"limit debe ser positivo, se recibió {limit}")

    labels, pixels = _read_cifar_records(bin_paths)
    train_x, train_y = _select_pair(labels, pixels, class_a, class_b, limit)
    if len(train_x) == 0:
        raise ValueError(f"Las clases {class_a} y {class_b} no aparecen en {list(bin_paths)}")

    if test_paths:
        test_labels, test_pixels = _read_cifar_records(test_paths)
        test_x, test_y = _select_pair(test_labels, test_pixels, class_a, class_b, test_limit)
    else:
        test_x, test_y = np.zeros((0, CIFAR_PIXELS)), np.zeros((0, 2))

    train_x, test_x = normalize_inputs(train_x, test_x, normalization)
    dataset = Dataset(train_x, train_y, test_x, test_y, "cifar", normalization)
    logger.info(f"Cargado {dataset.summary()}")
    return dataset


# ============================================================================
# Generadores sintéticos
# ============================================================================

def gen_synthetic_gp(n_train: int = 2000, n_test: int = 2000, input_dim: int = 10,
                     output_dim: int = 1, seed: int = 0,
                     hidden_features: int = SYNTHETIC_HIDDEN_FEATURES) -> Dataset:
    """
    Regresión con un proceso gaussiano profundo de dos etapas.

    Entradas normales estándar; características ocultas H ~ GP(Σ_relu) sobre
    las entradas; objetivos ~ GP(Σ_relu) sobre H.

    Raises:
        CholeskyError: Si falla Cholesky tras escalar el jitter
    """
    if n_train < 1 or n_test < 0:
        raise ValueError(f"Tamaños inválidos: n_train={n_train}, n_test={n_test}")
    if input_dim < 1 or output_dim < 1:
        raise ValueError("input_dim y output_dim deben ser positivos")

    inputs_seq, stage1_seq, stage2_seq = np.random.SeedSequence(seed).spawn(3)
    total = n_train + n_test
    inputs = np.random.default_rng(inputs_seq).standard_normal((total, input_dim))

    hidden = gp_sample(lambda a, b: relu_sigma_matrix(a, b, input_dim),
                       inputs, hidden_features, stage1_seq).values
    targets = gp_sample(lambda a, b: relu_sigma_matrix(a, b, hidden_features),
                        hidden, output_dim, stage2_seq).values

    dataset = Dataset(inputs[:n_train], targets[:n_train], inputs[n_train:], targets[n_train:],
                      "synthetic", "none", "regression")
    logger.info(f"Generado {dataset.summary()}")
    return dataset


def gen_projection_labels(inputs: np.ndarray, output_dim: int, seed: int = 0,
                          projection: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Etiquetas y = Pξ/√d₀ con P normal estándar congelada por la semilla.

    Args:
        inputs: Matriz N × d₀
        output_dim: d_r
        projection: P explícita (d_r × d₀) en lugar de muestrearla
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if inputs.shape[0] == 0:
        raise ValueError("gen_projection_labels necesita entradas")
    input_dim = inputs.shape[1]
    if projection is None:
        projection = np.random.default_rng(seed).standard_normal((output_dim, input_dim))
    projection = np.asarray(projection, dtype=np.float64)
    if projection.shape != (output_dim, input_dim):
        raise ValueError(f"Proyección de forma {projection.shape}, se esperaba {(output_dim, input_dim)}")
    return inputs @ projection.T / math.sqrt(input_dim)


def projection_dataset(n_train: int, input_dim: int, output_dim: int, seed: int = 0) -> Dataset:
    """Entradas normales estándar con etiquetas por proyección fija (sin test)."""
    inputs_seq, labels_seq = np.random.SeedSequence(seed).spawn(2)
    inputs = np.random.default_rng(inputs_seq).standard_normal((n_train, input_dim))
    labels_seed = int(labels_seq.generate_state(1)[0])
    targets = gen_projection_labels(inputs, output_dim, labels_seed)
    return Dataset(inputs, targets, np.zeros((0, input_dim)), np.zeros((0, output_dim)),
                   "projection", "none", "regression")


# ============================================================================
# Exportación
# ============================================================================

def export_csv(dataset: Dataset, directory: str) -> List[Path]:
    """
    Exporta inputs.csv y targets.csv con una columna `split`.

    Returns:
        Rutas escritas
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for file_name, prefix, train, test in (
        ("inputs.csv", "x", dataset.train_x, dataset.test_x),
        ("targets.csv", "y", dataset.train_y, dataset.test_y),
    ):
        path = directory / file_name
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["split"] + [f"{prefix}{i}" for i in range(train.shape[1])])
            for split, rows in (("train", train), ("test", test)):
                for row in rows:
                    writer.writerow([split] + [repr(float(value)) for value in row])
        written.append(path)
    logger.info(f"Dataset exportado a {directory}")
    return written
