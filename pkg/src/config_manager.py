"""
config_manager.py
=================
Módulo para gestionar la configuración del simulador BNTK.

Este módulo lee el archivo config.json y proporciona acceso
a los parámetros de configuración en todo el sistema:
- Valores por defecto de kernels, oráculo, entrenamiento y verificación
- Presets con los hiperparámetros de los experimentos
- Archivos de ejecución planos con formato `clave = valor`
"""

import json
import os
from pathlib import Path
from typing import Dict, List, Any, Optional

from src.errors import ConfigError


class ConfigManager:
    """
    Gestor de configuración del sistema.

    Lee y valida el archivo config.json y proporciona métodos
    para acceder a los diferentes parámetros del sistema.
    """

    def __init__(self, config_path: Optional[str] = None):
        """
        Inicializa el gestor de configuración.

        Args:
            config_path: Ruta al archivo config.json. Si es None,
                        busca en la ruta por defecto ../config/config.json
        """
        if config_path is None:
            # Este archivo está en src/, el config está en config/
            project_root = Path(__file__).parent.parent
            config_path = project_root / "config" / "config.json"

        self.config_path = Path(config_path)
        self.config: Dict[str, Any] = {}
        self._load_config()

    def _load_config(self) -> None:
        """
        Carga la configuración desde el archivo JSON.

        Raises:
            FileNotFoundError: Si el archivo config.json no existe
            ConfigError: Si el archivo JSON está mal formado
        """
        if not self.config_path.exists():
            raise FileNotFoundError(
                f"Archivo de configuración no encontrado: {self.config_path}"
            )

        try:
            with open(self.config_path, 'r', encoding='utf-8') as f:
                self.config = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Error al parsear config.json: {e.msg} (pos {e.pos})")

    def reload(self) -> None:
        """Recarga la configuración desde el archivo."""
        self._load_config()

    # ========================================================================
    # Sistema
    # ========================================================================

    def get_system_name(self) -> str:
        """Retorna el nombre del sistema (BNTK)."""
        return self.config.get("sistema", {}).get("nombre", "BNTK")

    def get_system_version(self) -> str:
        """Retorna la versión del sistema."""
        return self.config.get("sistema", {}).get("version", "1.0.0")

    # ========================================================================
    # Kernels y oráculo
    # ========================================================================

    def get_eps_clamp(self) -> float:
        """Margen de recorte de λ para Ξ y Σ₍₂₎."""
        return float(self.config.get("kernels", {}).get("eps_clamp", 1e-7))

    def get_oracle_width(self) -> int:
        """Ancho n de la red que sirve de oráculo (10000 por defecto)."""
        return int(self.config.get("oraculo", {}).get("ancho", 10000))

    def get_oracle_depth_g(self) -> int:
        """Capas ocultas de g en el oráculo."""
        return int(self.config.get("oraculo", {}).get("profundidad_g", 1))

    def get_initial_jitter(self) -> float:
        """Jitter inicial relativo a traza/dim para Cholesky."""
        return float(self.config.get("oraculo", {}).get("jitter_inicial_relativo", 1e-10))

    def get_max_jitter_doublings(self) -> int:
        return int(self.config.get("oraculo", {}).get("max_duplicaciones_jitter", 20))

    def get_max_jitter(self) -> float:
        return float(self.config.get("oraculo", {}).get("jitter_maximo", 1e-4))

    # ========================================================================
    # Entrenamiento
    # ========================================================================

    def get_training_defaults(self) -> Dict[str, Any]:
        """
        Retorna los valores por defecto de entrenamiento con los nombres
        de los flags del CLI.
        """
        section = self.config.get("entrenamiento", {})
        return {
            "lr": float(section.get("lr", 250.0)),
            "batch": int(section.get("batch", 20)),
            "steps": int(section.get("pasos", 5000)),
            "eval_every": int(section.get("evaluar_cada", 100)),
            "mode": section.get("modo", "bottleneck_sgd"),
            "seed": int(section.get("semilla", 0)),
            "loss_scale": float(section.get("escala_perdida", 1.0)),
            "output_anchor": section.get("anclaje_salida", "initial"),
            "n": int(section.get("ancho_finito", 2000)),
            "widths": str(section.get("anchos_barrido", "1,4,16,64,256")),
        }

    def get_preset(self, name: str) -> Dict[str, Any]:
        """
        Obtiene un preset por nombre.

        Raises:
            ConfigError: Si el preset no existe
        """
        presets = self.config.get("presets", {})
        if name not in presets:
            raise ConfigError(
                f"Preset desconocido: '{name}'. Disponibles: {', '.join(sorted(presets))}"
            )
        return dict(presets[name])

    def get_preset_names(self) -> List[str]:
        return sorted(self.config.get("presets", {}))

    # ========================================================================
    # Datos
    # ========================================================================

    def get_data_directory(self) -> Path:
        """Retorna la ruta al directorio de datos (relativa a la raíz del proyecto)."""
        dir_name = self.config.get("datos", {}).get("directorio", "datos")
        path = Path(dir_name)
        if path.is_absolute():
            return path
        return Path(__file__).parent.parent / dir_name

    def get_data_setting(self, key: str, default: Any = None) -> Any:
        return self.config.get("datos", {}).get(key, default)

    def get_desk_limits(self) -> Dict[str, int]:
        """Tamaños de subconjunto a escala de escritorio (se levantan con --full)."""
        section = self.config.get("datos", {})
        return {
            "train": int(section.get("limite_train", 2000)),
            "test": int(section.get("limite_test", 1000)),
        }

    def get_normalization(self) -> str:
        return self.config.get("datos", {}).get("normalizacion", "mean_sq_norm")

    # ========================================================================
    # Verificación
    # ========================================================================

    def get_verification_setting(self, key: str, default: Any = None) -> Any:
        return self.config.get("verificacion", {}).get(key, default)

    def get_jackknife_blocks(self) -> int:
        """Bloques jackknife para el error estándar de las covarianzas Monte Carlo."""
        return int(self.config.get("verificacion", {}).get("bloques_jackknife", 10))

    def get_full_scale_replicas(self) -> Dict[str, int]:
        """Número de réplicas a escala completa por tipo de covarianza."""
        section = self.config.get("verificacion", {})
        return {
            "JJ": int(section.get("replicas_completas_jj", 100000)),
            "Jf": int(section.get("replicas_completas_jf", 30000)),
            "ff": int(section.get("replicas_completas_ff", 30000)),
        }

    # ========================================================================
    # Salida y concurrencia
    # ========================================================================

    def get_results_directory(self) -> Path:
        project_root = Path(__file__).parent.parent
        dir_name = self.config.get("salida", {}).get("directorio_resultados", "resultados")
        return project_root / dir_name

    def get_logs_directory(self) -> Path:
        """Retorna la ruta completa al directorio de logs."""
        project_root = Path(__file__).parent.parent
        dir_name = self.config.get("salida", {}).get("directorio_logs", "logs")
        return project_root / dir_name

    def get_worker_count(self) -> int:
        """
        Número de hilos de trabajo.

        La variable de entorno BNTK_THREADS fija el tope; sin ella se usa
        el número de CPUs.
        """
        cpus = os.cpu_count() or 1
        raw = os.environ.get("BNTK_THREADS")
        if raw is None or raw.strip() == "":
            return cpus
        try:
            cap = int(raw)
        except ValueError:
            raise ConfigError(f"BNTK_THREADS debe ser un entero, se recibió '{raw}'")
        if cap < 1:
            raise ConfigError(f"BNTK_THREADS debe ser positivo, se recibió {cap}")
        return min(cap, cpus)

    def print_config_summary(self) -> None:
        """Imprime un resumen de la configuración actual."""
        defaults = self.get_training_defaults()
        print("\n" + "=" * 60)
        print(f"  {self.get_system_name()} v{self.get_system_version()}")
        print("=" * 60)
        print(f"\n🧮 KERNELS:   eps_clamp = {self.get_eps_clamp():g}")
        print(f"🎲 ORÁCULO:   n = {self.get_oracle_width()}")
        print(f"📈 ENTRENAMIENTO: lr = {defaults['lr']}, batch = {defaults['batch']}, "
              f"pasos = {defaults['steps']}")
        print(f"📦 PRESETS:   {', '.join(self.get_preset_names())}")
        print("\n" + "=" * 60 + "\n")


# ============================================================================
# Archivos de ejecución planos `clave = valor`
# ============================================================================

def load_flat_config(path: str) -> Dict[str, str]:
    """
    Lee un archivo de configuración plano que refleja los flags del CLI.

    Formato: una línea `clave = valor` por parámetro; las líneas vacías y
    las que empiezan con `#` se ignoran. Las claves aceptan `-` o `_`
    (`batch-size` y `batch_size` son equivalentes).

    Args:
        path: Ruta del archivo

    Returns:
        Diccionario clave -> valor (como texto, sin convertir)

    Raises:
        FileNotFoundError: Si el archivo no existe
        ConfigError: Si una línea no tiene la forma `clave = valor`
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Archivo de configuración no encontrado: {path}")

    values: Dict[str, str] = {}
    with open(path, 'r', encoding='utf-8') as f:
        for line_number, raw_line in enumerate(f, start=1):
            line = raw_line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_number}: se esperaba 'clave = valor'")
            key, value = line.split("=", 1)
            key = key.strip().lstrip("-").replace("-", "_")
            if not key:
                raise ConfigError(f"{path}:{line_number}: clave vacía")
            values[key] = value.strip()
    return values


# ============================================================================
# Instancia global
# ============================================================================

_config_manager_instance = None


def get_config() -> ConfigManager:
    """
    Retorna una instancia global de ConfigManager (patrón Singleton).

    Example:
        >>> from src.config_manager import get_config
        >>> config = get_config()
        >>> width = config.get_oracle_width()
    """
    global _config_manager_instance
    if _config_manager_instance is None:
        _config_manager_instance = ConfigManager()
    return _config_manager_instance
