"""
run_manifest.py
===============
Registro de resultados de una ejecución.

Este módulo se encarga de:
- Definir las cabeceras CSV de métricas, desviaciones y residuos
- Escribir filas CSV de forma incremental y segura entre hilos
- Calcular pérdida y exactitud de un conjunto de predicciones
- Generar manifest.json con la configuración resuelta, versiones y
  hashes SHA-256 de cada archivo de salida
"""

import csv
import json
import logging
import math
import platform
import threading
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.containers import calculate_file_hash


METRICS_HEADER = ["step", "wall_ms", "train_loss", "test_loss", "train_acc",
                  "test_acc", "bottleneck_width", "mode", "seed"]
DEVIATION_HEADER = ["kind", "pair_id", "n", "R", "deviation", "stderr"]
RESIDUAL_HEADER = ["quantity", "step", "residual", "n", "d", "lr"]
LINEAR_HEADER = ["step", "depth_f", "depth_g", "n", "train_loss", "max_rel_dev"]
TVT_HEADER = ["bottleneck_width", "train_loss", "test_loss"]
SWEEP_SUMMARY_HEADER = ["bottleneck_width", "final_train_loss", "final_test_loss",
                        "final_train_error", "final_test_error"]


@dataclass
class MetricRow:
    """
    Fila de métricas emitida cada `eval_every` pasos.

    Attributes:
        step: Paso de entrenamiento
        wall_ms: Milisegundos transcurridos desde el inicio
        train_loss: Media de ½‖F − y‖² sobre train
        test_loss: Idem sobre test (NaN si no hay test)
        train_acc: Exactitud argmax (NaN en regresión)
        test_acc: Idem sobre test
        bottleneck_width: d o "inf"
        mode: Modo de entrenamiento
        seed: Semilla de la ejecución
    """
    step: int
    wall_ms: float
    train_loss: float
    test_loss: float
    train_acc: float
    test_acc: float
    bottleneck_width: Union[int, str]
    mode: str
    seed: int

    def as_list(self) -> List[Any]:
        return [getattr(self, name) for name in METRICS_HEADER]


def prediction_metrics(predictions: np.ndarray, targets: np.ndarray,
                       task: str = "classification") -> Tuple[float, float]:
    """
    Pérdida media ½‖F − y‖² y exactitud argmax.

    Returns:
        (loss, accuracy); ambos NaN si no hay muestras, exactitud NaN
        para regresión
    """
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape:
        raise ValueError(f"Formas distintas: {predictions.shape} vs {targets.shape}")
    if predictions.shape[0] == 0:
        return math.nan, math.nan

    residual = predictions - targets
    loss = float(0.5 * np.mean(np.sum(residual * residual, axis=1)))
    if task != "classification":
        return loss, math.nan
    accuracy = float(np.mean(np.argmax(predictions, axis=1) == np.argmax(targets, axis=1)))
    return loss, accuracy


def format_value(value: Any) -> str:
    """Texto CSV: floats con repr (ida y vuelta exacta), NaN como 'nan'."""
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        return repr(value)
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


class RunRecorder:
    """
    Registro de archivos de salida de una ejecución.

    Mantiene las tablas CSV abiertas en modo incremental y, al cerrar,
    escribe manifest.json con los hashes de todos los archivos registrados.
    """

    def __init__(self, output_dir: str, subcommand: str):
        """
        Args:
            output_dir: Directorio de salida (se crea si no existe)
            subcommand: Subcomando del CLI que produce la ejecución
        """
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.subcommand = subcommand
        self.started = datetime.now()

        self._tables: Dict[str, Tuple[Any, Any]] = {}
        self._files: List[Path] = []
        self.lock = threading.Lock()
        self.logger = logging.getLogger(f"RunRecorder-{subcommand}")

    # ========================================================================
    # Tablas CSV
    # ========================================================================

    def open_table(self, file_name: str, header: Sequence[str]) -> Path:
        """Crea (o trunca) una tabla CSV y escribe su cabecera."""
        path = self.output_dir / file_name
        with self.lock:
            if file_name in self._tables:
                return path
            handle = open(path, 'w', newline='', encoding='utf-8')
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(list(header))
            handle.flush()
            self._tables[file_name] = (handle, writer)
            self._files.append(path)
        self.logger.debug(f"Tabla abierta: {path}")
        return path

    def append(self, file_name: str, row: Union[Sequence[Any], MetricRow]) -> None:
        """Agrega una fila a una tabla abierta y la vuelca a disco."""
        if isinstance(row, MetricRow):
            row = row.as_list()
        with self.lock:
            if file_name not in self._tables:
                raise ValueError(f"Tabla no abierta: {file_name}")
            handle, writer = self._tables[file_name]
            writer.writerow([format_value(value) for value in row])
            handle.flush()

    def register_file(self, path: str) -> None:
        """Registra un archivo externo (instantánea, checkpoint) en el manifiesto."""
        with self.lock:
            path = Path(path)
            if path not in self._files:
                self._files.append(path)

    # ========================================================================
    # Manifiesto
    # ========================================================================

    def close(self, resolved_config: Dict[str, Any], seed: Optional[int],
              status: str = "ok") -> Path:
        """
        Cierra las tablas y escribe manifest.json.

        Args:
            resolved_config: Configuración completa tras aplicar la precedencia
            seed: Semilla maestra
            status: 'ok' o descripción del fallo

        Returns:
            Ruta de manifest.json
        """
        with self.lock:
            for handle, _ in self._tables.values():
                handle.close()
            self._tables.clear()
            files = list(self._files)

        entries = {}
        for path in files:
            if path.exists():
                entries[path.name] = {
                    "sha256": calculate_file_hash(str(path)),
                    "bytes": path.stat().st_size,
                }

        manifest = {
            "subcomando": self.subcommand,
            "estado": status,
            "semilla": seed,
            "config": _jsonable(resolved_config),
            "versiones": software_versions(),
            "archivos": entries,
            "inicio": self.started.isoformat(),
            "fin": datetime.now().isoformat(),
        }
        manifest_path = self.output_dir / "manifest.json"
        with open(manifest_path, 'w', encoding='utf-8') as f:
            json.dump(manifest, f, indent=2, ensure_ascii=False)
        self.logger.info(f"Manifiesto escrito: {manifest_path} ({len(entries)} archivos)")
        return manifest_path


def software_versions() -> Dict[str, str]:
    """Versiones de Python, numpy, scipy y del paquete."""
    import scipy

    from src import __version__

    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "bntk": __version__,
    }


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(key): _jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(item) for item in value]
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (np.integer, np.floating)):
        return value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    return value

