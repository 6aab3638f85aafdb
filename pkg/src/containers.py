"""
containers.py
=============
Contenedores binarios planos del simulador.

Este módulo se encarga de:
- Escribir y leer instantáneas de pesos ("WNS1") del oráculo y de las redes finitas
- Escribir y leer estados de entrenamiento en espacio de funciones ("FSD1")
- Calcular hashes SHA-256 de archivos para el manifiesto de ejecución

Formato WNS1 (little-endian):
    magic b"WNS1"
    u32 × 7   d0, d, dr, width, depth_g, depth_f, código de activación
    u64       semilla
    f32       m del softplus
    f32[...]  bloques de pesos row-major en orden de declaración
              (capas de g, luego capas de f)

Formato FSD1 (little-endian):
    magic b"FSD1"
    u32       número de arreglos
    por arreglo: u16 largo del nombre, nombre utf-8, u8 tipo (0=f64, 1=i64),
                 u8 ndim, u64 × ndim forma, datos row-major
"""

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from src.errors import DataFormatError


MAGIC_SNAPSHOT = b"WNS1"
MAGIC_STATE = b"FSD1"

ACTIVATION_CODES = {"relu": 0, "linear": 1, "softplus": 2}
ACTIVATION_NAMES = {code: name for name, code in ACTIVATION_CODES.items()}

_SNAPSHOT_HEADER = struct.Struct("<7IQf")

_DTYPE_CODES = {np.dtype("<f8"): 0, np.dtype("<i8"): 1}
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}


@dataclass(frozen=True)
class SnapshotHeader:
    """
    Cabecera de una instantánea de pesos.

    Attributes:
        input_dim: d₀
        bottleneck_dim: d
        output_dim: d_r
        width: n (capas ocultas de g y de f)
        depth_g: capas ocultas de g
        depth_f: capas ocultas de f
        activation: 'relu', 'linear' o 'softplus'
        seed: semilla de 64 bits
        softplus_m: parámetro m del softplus
    """
    input_dim: int
    bottleneck_dim: int
    output_dim: int
    width: int
    depth_g: int
    depth_f: int
    activation: str
    seed: int
    softplus_m: float = 1.0

    def block_shapes(self) -> List[Tuple[int, int]]:
        """Formas de los bloques de pesos en orden de declaración."""
        n = self.width
        shapes = [(n, self.input_dim)]
        shapes += [(n, n)] * (self.depth_g - 1)
        shapes.append((self.bottleneck_dim, n))
        shapes.append((n, self.bottleneck_dim))
        shapes += [(n, n)] * (self.depth_f - 1)
        shapes.append((self.output_dim, n))
        return shapes


# ============================================================================
# WNS1
# ============================================================================

def write_weight_snapshot(path: str, header: SnapshotHeader, blocks: List[np.ndarray]) -> None:
    """
    Escribe una instantánea de pesos en formato WNS1.

    Args:
        path: Ruta del archivo de salida
        header: Cabecera con dimensiones y semilla
        blocks: Matrices de pesos en orden de declaración

    Raises:
        ValueError: Si las formas no coinciden con la cabecera
    """
    if header.activation not in ACTIVATION_CODES:
        raise ValueError(f"Activación no soportada en WNS1: {header.activation}")

    shapes = header.block_shapes()
    if len(blocks) != len(shapes):
        raise ValueError(f"Se esperaban {len(shapes)} bloques, se recibieron {len(blocks)}")
    for index, (block, shape) in enumerate(zip(blocks, shapes)):
        if tuple(block.shape) != shape:
            raise ValueError(f"Bloque {index}: forma {block.shape}, se esperaba {shape}")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(MAGIC_SNAPSHOT)
        f.write(_SNAPSHOT_HEADER.pack(
            header.input_dim, header.bottleneck_dim, header.output_dim, header.width,
            header.depth_g, header.depth_f, ACTIVATION_CODES[header.activation],
            header.seed & 0xFFFFFFFFFFFFFFFF, header.softplus_m,
        ))
        for block in blocks:
            f.write(np.ascontiguousarray(block, dtype="<f4").tobytes())


def read_weight_snapshot(path: str) -> Tuple[SnapshotHeader, List[np.ndarray]]:
    """
    Lee una instantánea WNS1.

    Returns:
        (cabecera, bloques float32)

    Raises:
        FileNotFoundError: Si el archivo no existe
        DataFormatError: Magic incorrecto, código desconocido o archivo truncado
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Instantánea no encontrada: {path}")

    data = path.read_bytes()
    if data[:4] != MAGIC_SNAPSHOT:
        raise DataFormatError(f"{path}: magic inválido {data[:4]!r}, se esperaba {MAGIC_SNAPSHOT!r}")
    if len(data) < 4 + _SNAPSHOT_HEADER.size:
        raise DataFormatError(f"{path}: cabecera truncada")

    d0, d, dr, width, depth_g, depth_f, code, seed, softplus_m = \
        _SNAPSHOT_HEADER.unpack_from(data, 4)
    if code not in ACTIVATION_NAMES:
        raise DataFormatError(f"{path}: código de activación desconocido {code}")

    header = SnapshotHeader(d0, d, dr, width, depth_g, depth_f,
                            ACTIVATION_NAMES[code], seed, softplus_m)

    offset = 4 + _SNAPSHOT_HEADER.size
    blocks = []
    for shape in header.block_shapes():
        size = shape[0] * shape[1] * 4
        if offset + size > len(data):
            raise DataFormatError(f"{path}: bloque de pesos truncado")
        block = np.frombuffer(data, dtype="<f4", count=shape[0] * shape[1], offset=offset)
        blocks.append(block.reshape(shape).astype(np.float32))
        offset += size

    if offset != len(data):
        raise DataFormatError(f"{path}: {len(data) - offset} bytes sobrantes")
    return header, blocks


# ============================================================================
# FSD1
# ============================================================================

def write_named_arrays(path: str, arrays: Dict[str, np.ndarray]) -> None:
    """
    Escribe un diccionario de arreglos en formato FSD1.

    Solo se aceptan arreglos float64 o int64 (los enteros de otro tipo se
    promueven a int64).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(MAGIC_STATE)
        f.write(struct.pack("<I", len(arrays)))
        for name, array in arrays.items():
            array = np.asarray(array)
            if np.issubdtype(array.dtype, np.integer):
                array = array.astype("<i8")
            else:
                array = array.astype("<f8")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<BB", _DTYPE_CODES[array.dtype], array.ndim))
            f.write(struct.pack(f"<{array.ndim}Q", *array.shape))
            f.write(np.ascontiguousarray(array).tobytes())


def read_named_arrays(path: str) -> Dict[str, np.ndarray]:
    """
    Lee un archivo FSD1.

    Raises:
        FileNotFoundError: Si el archivo no existe
        DataFormatError: Magic incorrecto o archivo truncado
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint no encontrado: {path}")

    data = path.read_bytes()
    if data[:4] != MAGIC_STATE:
        raise DataFormatError(f"{path}: magic inválido {data[:4]!r}, se esperaba {MAGIC_STATE!r}")

    try:
        (count,) = struct.unpack_from("<I", data, 4)
        offset = 8
        arrays: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset:offset + name_len].decode("utf-8")
            offset += name_len
            dtype_code, ndim = struct.unpack_from("<BB", data, offset)
            offset += 2
            shape = struct.unpack_from(f"<{ndim}Q", data, offset)
            offset += 8 * ndim
            dtype = _DTYPES[dtype_code]
            count_items = int(np.prod(shape)) if ndim else 1
            nbytes = count_items * dtype.itemsize
            if offset + nbytes > len(data):
                raise DataFormatError(f"{path}: arreglo '{name}' truncado")
            array = np.frombuffer(data, dtype=dtype, count=count_items, offset=offset)
            arrays[name] = array.reshape(shape).copy()
            offset += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as e:
        raise DataFormatError(f"{path}: contenedor FSD1 corrupto ({e})")
    return arrays


# ============================================================================
# Integridad
# ============================================================================

def calculate_file_hash(file_path: str, algorithm: str = "sha256") -> str:
    """
    Calcula el hash de un archivo completo leyendo por chunks.

    Args:
        file_path: Ruta del archivo
        algorithm: Algoritmo de hash (sha256, md5, sha1)

    Returns:
        Hash en formato hexadecimal
    """
    if algorithm not in ("sha256", "md5", "sha1"):
        raise ValueError(f"Algoritmo de hash no soportado: {algorithm}")

    hash_obj = hashlib.new(algorithm)
    with open(file_path, 'rb') as f:
        while True:
            chunk = f.read(8192)
            if not chunk:
                break
            hash_obj.update(chunk)
    return hash_obj.hexdigest()
