"""
Fixtures compartidas de la suite.

Los experimentos a escala de escritorio se marcan con @pytest.mark.slow y
sólo se ejecutan con --runslow.
"""

import gzip
import json
import os
import struct
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src import config_manager
from src.config_manager import ConfigManager
from src.data import Dataset


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="Ejecutar también los experimentos lentos")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: experimento a escala de escritorio (requiere --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="usar --runslow para ejecutarlo")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


# ============================================================================
# Escritores de archivos de prueba
# ============================================================================

def write_idx_images(path, images: np.ndarray, compress: bool = False) -> str:
    images = np.asarray(images, dtype=np.uint8)
    header = struct.pack(">I", 0x00000803) + struct.pack(">3I", *images.shape)
    payload = header + images.tobytes()
    opener = gzip.open if compress else open
    with opener(str(path), "wb") as f:
        f.write(payload)
    return str(path)


def write_idx_labels(path, labels: np.ndarray, compress: bool = False) -> str:
    labels = np.asarray(labels, dtype=np.uint8)
    payload = struct.pack(">I", 0x00000801) + struct.pack(">I", labels.size) + labels.tobytes()
    opener = gzip.open if compress else open
    with opener(str(path), "wb") as f:
        f.write(payload)
    return str(path)


def write_cifar_records(path, labels, seed: int = 0) -> str:
    rng = np.random.default_rng(seed)
    with open(str(path), "wb") as f:
        for label in labels:
            f.write(bytes([label]) + rng.integers(0, 256, 3072, dtype=np.uint8).tobytes())
    return str(path)


@pytest.fixture
def idx_writer():
    return write_idx_images, write_idx_labels


@pytest.fixture
def cifar_writer():
    return write_cifar_records


@pytest.fixture
def mnist_files(tmp_path):
    """Archivos IDX diminutos: 6 imágenes 4×4 de entrenamiento y 3 de test."""
    rng = np.random.default_rng(7)
    train_images = rng.integers(0, 256, (6, 4, 4))
    test_images = rng.integers(0, 256, (3, 4, 4))
    return {
        "train_images": write_idx_images(tmp_path / "train-images-idx3-ubyte", train_images),
        "train_labels": write_idx_labels(tmp_path / "train-labels-idx1-ubyte", [0, 1, 2, 3, 4, 5]),
        "test_images": write_idx_images(tmp_path / "t10k-images-idx3-ubyte", test_images),
        "test_labels": write_idx_labels(tmp_path / "t10k-labels-idx1-ubyte", [7, 8, 9]),
        "directory": str(tmp_path),
    }


# ============================================================================
# Conjuntos de datos pequeños
# ============================================================================

@pytest.fixture
def one_sample_dataset():
    """ξ = 1, y = 0: el ejemplo escalar evaluable a mano."""
    return Dataset(np.array([[1.0]]), np.array([[0.0]]), np.zeros((0, 1)), np.zeros((0, 1)),
                   "escalar", "none", "regression")


@pytest.fixture
def small_regression():
    rng = np.random.default_rng(11)
    train_x = rng.standard_normal((12, 4))
    test_x = rng.standard_normal((5, 4))
    projection = rng.standard_normal((2, 4)) / 2.0
    return Dataset(train_x, train_x @ projection.T, test_x, test_x @ projection.T,
                   "pequeño", "none", "regression")


@pytest.fixture
def small_classification():
    rng = np.random.default_rng(5)
    train_x = rng.standard_normal((10, 3))
    test_x = rng.standard_normal((4, 3))
    train_y = np.eye(2)[rng.integers(0, 2, 10)]
    test_y = np.eye(2)[rng.integers(0, 2, 4)]
    return Dataset(train_x, train_y, test_x, test_y, "clases", "none", "classification")


# ============================================================================
# Configuración sustituida
# ============================================================================

@pytest.fixture
def override_config(tmp_path, monkeypatch):
    """
    Instala como configuración global una copia de config/config.json con
    las secciones modificadas: override_config({"oraculo": {"jitter_maximo": 10}}).
    """
    project_config = Path(__file__).parent.parent / "config" / "config.json"

    def install(changes):
        data = json.loads(project_config.read_text(encoding="utf-8"))
        for section, values in changes.items():
            data.setdefault(section, {}).update(values)
        path = tmp_path / "config.json"
        path.write_text(json.dumps(data), encoding="utf-8")
        manager = ConfigManager(str(path))
        monkeypatch.setattr(config_manager, "_config_manager_instance", manager)
        return manager

    return install
