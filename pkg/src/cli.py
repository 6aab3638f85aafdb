"""
cli.py
======
Ejecutor de experimentos por línea de comandos.

Subcomandos:
    train-fs          Entrenamiento en espacio de funciones (uno o varios d)
    train-finite      SGD de una red finita de cuatro capas
    sweep-bottleneck  Barrido del ancho del cuello de botella con redes finitas
    verify-cov        Desviaciones Monte Carlo de las covarianzas f-f, J-f, J-J
    verify-residuals  Residuales de las ecuaciones límite en GD de red finita
    verify-linear     Redes lineales: residuales, equivalencia y aceleración
    gen-data          Exporta un conjunto de datos a CSV

Precedencia de parámetros: config.json < --preset < --config < flags.
Códigos de salida: 0 éxito, 2 error de configuración, 3 aborto numérico.
"""

import argparse
import logging
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from src.config_manager import ConfigManager, get_config, load_flat_config
from src.data import (
    NORMALIZATIONS,
    Dataset,
    export_csv,
    gen_synthetic_gp,
    load_cifar10_pair,
    load_mnist_idx,
    projection_dataset,
)
from src.dynamics import (
    ANCHORS,
    MODES,
    TrainConfig,
    load_checkpoint,
    run_training,
    train_vs_test_curve,
)
from src.errors import ConfigError, NumericalAbort
from src.finite_net import BottleneckMlp, MlpSpec, parse_activation, sweep_bottleneck, train_finite
from src.init_oracle import init_wide_net, load_snapshot, save_snapshot
from src.linear_equiv import acceleration_probe, simulate_linear_pair, steps_to_threshold
from src.run_manifest import (
    DEVIATION_HEADER,
    LINEAR_HEADER,
    METRICS_HEADER,
    RESIDUAL_HEADER,
    SWEEP_SUMMARY_HEADER,
    TVT_HEADER,
    RunRecorder,
)
from src.verify import KINDS, finite_residuals, linear_residuals, mc_covariance_deviation, random_input_pairs


SUBCOMMANDS = ("train-fs", "train-finite", "sweep-bottleneck", "verify-cov",
               "verify-residuals", "verify-linear", "gen-data")
DATASETS = ("synthetic", "mnist", "cifar", "projection")
EXPERIMENTS = ("residuals", "equivalence", "acceleration")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

logger = logging.getLogger("CLI")


# ============================================================================
# Conversión de valores
# ============================================================================

def parse_widths(text: str) -> Tuple[Optional[int], ...]:
    """
    Lista de anchos separada por comas; 'inf' representa el cuello infinito.

    Example:
        >>> parse_widths("10,100,inf")
        (10, 100, None)
    """
    widths = []
    for token in str(text).split(","):
        token = token.strip().lower()
        if not token:
            continue
        if token == "inf":
            widths.append(None)
            continue
        try:
            value = int(token)
        except ValueError:
            raise argparse.ArgumentTypeError(f"Ancho inválido: '{token}'")
        if value < 1:
            raise argparse.ArgumentTypeError(f"Los anchos deben ser positivos, se recibió {value}")
        widths.append(value)
    if not widths:
        raise argparse.ArgumentTypeError("La lista de anchos está vacía")
    return tuple(widths)


def parse_int_list(text: str) -> Tuple[int, ...]:
    widths = parse_widths(text)
    if None in widths:
        raise argparse.ArgumentTypeError("'inf' no está permitido aquí")
    return widths


def parse_depths(text: str) -> Tuple[Tuple[int, int], ...]:
    """Pares L_fxL_g separados por comas, p. ej. '1x1,2x2'."""
    depths = []
    for token in str(text).split(","):
        token = token.strip().lower()
        if not token:
            continue
        try:
            depth_f, depth_g = (int(part) for part in token.split("x"))
        except ValueError:
            raise argparse.ArgumentTypeError(f"Profundidad inválida: '{token}' (formato LfxLg)")
        if depth_f < 1 or depth_g < 1:
            raise argparse.ArgumentTypeError(f"Profundidades no positivas: '{token}'")
        depths.append((depth_f, depth_g))
    if not depths:
        raise argparse.ArgumentTypeError("La lista de profundidades está vacía")
    return tuple(depths)


def parse_bool(text: Any) -> bool:
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "si", "sí", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"Booleano inválido: '{text}'")


FIELD_PARSERS: Dict[str, Callable[[Any], Any]] = {
    "dataset": str,
    "activation": str,
    "d": parse_widths,
    "n": int,
    "lr": float,
    "batch": int,
    "steps": int,
    "eval_every": int,
    "seed": int,
    "loss_scale": float,
    "output_anchor": str,
    "mode": str,
    "depth_g": int,
    "output": str,
    "full": parse_bool,
    "full_scale": parse_bool,
    "kind": str,
    "replicas": int,
    "pairs": int,
    "pair_dim": int,
    "experiment": str,
    "widths": parse_int_list,
    "depths": parse_depths,
    "init_scale": float,
    "samples": int,
    "test_samples": int,
    "input_dim": int,
    "output_dim": int,
    "normalization": str,
    "data_dir": str,
    "save_snapshot": str,
    "load_snapshot": str,
    "checkpoint": str,
    "resume": str,
    "time_budget": float,
}


# ============================================================================
# Configuración de la ejecución
# ============================================================================

@dataclass
class RunConfig:
    """
    Configuración resuelta de una ejecución.

    Attributes:
        subcommand: Subcomando
        dataset: synthetic, mnist, cifar o projection
        d: Anchos del cuello de botella (None = infinito)
        n: Ancho oculto (oráculo, red finita o verificación)
        output: Directorio de salida
    """
    subcommand: str
    dataset: str = "synthetic"
    activation: str = "relu"
    d: Tuple[Optional[int], ...] = (10,)
    n: int = 10000
    lr: float = 250.0
    batch: int = 20
    steps: int = 5000
    eval_every: int = 100
    seed: int = 0
    loss_scale: float = 1.0
    output_anchor: str = "initial"
    mode: str = "bottleneck_sgd"
    depth_g: int = 1
    output: Optional[str] = None
    full: bool = False
    full_scale: bool = False
    kind: str = "all"
    replicas: int = 10000
    pairs: int = 10
    pair_dim: int = 2
    experiment: str = "residuals"
    widths: Tuple[int, ...] = (1, 4, 16, 64, 256)
    depths: Tuple[Tuple[int, int], ...] = ((1, 1), (2, 2), (3, 3))
    init_scale: float = 0.1
    samples: int = 2000
    test_samples: int = 2000
    input_dim: int = 10
    output_dim: int = 1
    normalization: Optional[str] = None
    data_dir: Optional[str] = None
    save_snapshot: Optional[str] = None
    load_snapshot: Optional[str] = None
    checkpoint: Optional[str] = None
    resume: Optional[str] = None
    time_budget: Optional[float] = None
    workers: int = 1

    def validate(self) -> None:
        """
        Comprueba la ejecución resuelta antes de despachar.

        El CLI exige lr > 0 y steps > 0 aunque TrainConfig acepte cero: una
        ejecución sin aprendizaje o sin pasos no produce ninguna curva, así
        que se rechaza como error de uso. Quien necesite esos casos límite
        usa la API de dynamics directamente.

        Raises:
            ConfigError: Valores no positivos, enumerados inválidos o
                archivos referenciados inexistentes
        """
        if self.subcommand not in SUBCOMMANDS:
            raise ConfigError(f"Subcomando desconocido: {self.subcommand}")
        positives = {"n": self.n, "lr": self.lr, "batch": self.batch, "steps": self.steps,
                     "eval_every": self.eval_every, "loss_scale": self.loss_scale,
                     "depth_g": self.depth_g, "pairs": self.pairs, "pair_dim": self.pair_dim,
                     "init_scale": self.init_scale, "samples": self.samples,
                     "input_dim": self.input_dim, "output_dim": self.output_dim}
        for name, value in positives.items():
            if value is None or value <= 0:
                raise ConfigError(f"{name} debe ser positivo, se recibió {value}")
        if self.seed < 0:
            raise ConfigError(f"seed debe ser ≥ 0, se recibió {self.seed}")
        if self.test_samples < 0:
            raise ConfigError(f"test_samples debe ser ≥ 0, se recibió {self.test_samples}")
        if self.time_budget is not None and self.time_budget <= 0:
            raise ConfigError(f"time_budget debe ser positivo, se recibió {self.time_budget}")

        choices = {"dataset": (self.dataset, DATASETS), "mode": (self.mode, MODES),
                   "output_anchor": (self.output_anchor, ANCHORS),
                   "kind": (self.kind, KINDS + ("all",)),
                   "experiment": (self.experiment, EXPERIMENTS)}
        for name, (value, options) in choices.items():
            if value not in options:
                raise ConfigError(f"{name} inválido: '{value}'. Opciones: {', '.join(options)}")
        if self.normalization is not None and self.normalization not in NORMALIZATIONS:
            raise ConfigError(f"normalization inválida: '{self.normalization}'")
        try:
            parse_activation(self.activation)
        except ValueError as e:
            raise ConfigError(str(e))

        for name in ("load_snapshot", "resume"):
            path = getattr(self, name)
            if path is not None and not Path(path).exists():
                raise ConfigError(f"{name}: archivo no encontrado: {path}")


def _coerce(values: Dict[str, Any], source: str) -> Dict[str, Any]:
    coerced = {}
    for key, raw in values.items():
        key = key.replace("-", "_")
        if key not in FIELD_PARSERS:
            raise ConfigError(f"{source}: clave desconocida '{key}'")
        try:
            coerced[key] = FIELD_PARSERS[key](raw)
        except (ValueError, argparse.ArgumentTypeError) as e:
            raise ConfigError(f"{source}: valor inválido para '{key}': {e}")
    return coerced


def subcommand_defaults(subcommand: str, config: ConfigManager) -> Dict[str, Any]:
    """Valores por defecto de config.json para un subcomando."""
    training = config.get_training_defaults()
    values: Dict[str, Any] = {key: training[key] for key in
                              ("lr", "batch", "steps", "eval_every", "mode", "seed",
                               "loss_scale", "output_anchor")}
    values["workers"] = config.get_worker_count()
    values["depth_g"] = config.get_oracle_depth_g()
    values["samples"] = int(config.get_data_setting("sinteticos_train", 2000))
    values["test_samples"] = int(config.get_data_setting("sinteticos_test", 2000))
    values["input_dim"] = int(config.get_data_setting("sinteticos_d0", 10))
    values["output_dim"] = int(config.get_data_setting("sinteticos_dr", 1))
    values["output"] = str(config.get_results_directory() / subcommand)

    if subcommand == "train-fs":
        values["n"] = config.get_oracle_width()
    elif subcommand in ("train-finite", "sweep-bottleneck"):
        values["n"] = training["n"]
        values["widths"] = parse_int_list(training["widths"])
    elif subcommand == "verify-cov":
        values["n"] = int(config.get_verification_setting("n", 10000))
        values["replicas"] = int(config.get_verification_setting("replicas", 10000))
        values["pairs"] = int(config.get_verification_setting("pares", 10))
        values["pair_dim"] = int(config.get_verification_setting("dimension_pares", 2))
    elif subcommand in ("verify-residuals", "verify-linear"):
        values["dataset"] = "projection"
        values["n"] = int(config.get_verification_setting("n_residuales", 20000))
        values["d"] = (int(config.get_verification_setting("d_residuales", 3)),)
        values["steps"] = int(config.get_verification_setting("pasos_residuales", 100))
        values["samples"] = int(config.get_verification_setting("muestras_residuales", 20))
        values["input_dim"] = int(config.get_verification_setting("d0_residuales", 10))
        values["output_dim"] = int(config.get_verification_setting("dr_residuales", 1))
        lr_key = "lr_residuales" if subcommand == "verify-residuals" else "lr_lineal"
        values["lr"] = float(config.get_verification_setting(lr_key, 1e-3))
        values["depths"] = parse_depths(config.get_verification_setting("profundidades_lineales",
                                                                        "1x1,2x2,3x3"))
        values["init_scale"] = float(config.get_verification_setting("escala_init_aceleracion", 0.1))
    return values


def resolve_run_config(args: argparse.Namespace, config: ConfigManager) -> RunConfig:
    """
    Aplica la precedencia config.json < preset < archivo --config < flags.

    Raises:
        ConfigError: Preset o clave desconocidos, valores inválidos
        FileNotFoundError: Archivo --config inexistente
    """
    values = subcommand_defaults(args.subcommand, config)
    if args.preset:
        values.update(_coerce(config.get_preset(args.preset), f"preset '{args.preset}'"))
    if args.config:
        values.update(_coerce(load_flat_config(args.config), args.config))
    explicit = {key: value for key, value in vars(args).items()
                if key in FIELD_PARSERS and value is not None}
    values.update(explicit)

    known = {field.name for field in fields(RunConfig)}
    run = RunConfig(subcommand=args.subcommand, **{k: v for k, v in values.items() if k in known})
    run.validate()
    return run


# ============================================================================
# Datos
# ============================================================================

def _data_path(run: RunConfig, config: ConfigManager, name: str) -> Path:
    directory = Path(run.data_dir) if run.data_dir else config.get_data_directory()
    return directory / name


def _first_existing(path: Path) -> Optional[Path]:
    for candidate in (path, path.with_name(path.name + ".gz")):
        if candidate.exists():
            return candidate
    return None


def _mnist_file(run: RunConfig, config: ConfigManager, key: str, default: str) -> Optional[Path]:
    return _first_existing(_data_path(run, config, config.get_data_setting(key, default)))


def load_dataset(run: RunConfig, config: ConfigManager) -> Dataset:
    """
    Construye el conjunto de datos de la ejecución.

    MNIST y CIFAR usan los archivos del directorio de datos; los de test son
    opcionales. Sin --full se aplican los límites de escritorio.

    Raises:
        FileNotFoundError: Faltan archivos de entrenamiento
    """
    if run.dataset == "synthetic":
        return gen_synthetic_gp(run.samples, run.test_samples, run.input_dim, run.output_dim, run.seed)
    if run.dataset == "projection":
        return projection_dataset(run.samples, run.input_dim, run.output_dim, run.seed)

    limits = {"train": None, "test": None} if run.full else config.get_desk_limits()
    normalization = run.normalization or config.get_normalization()

    if run.dataset == "mnist":
        images = _mnist_file(run, config, "mnist_imagenes_train", "train-images-idx3-ubyte")
        labels = _mnist_file(run, config, "mnist_etiquetas_train", "train-labels-idx1-ubyte")
        if images is None or labels is None:
            raise FileNotFoundError(
                f"Archivos MNIST de entrenamiento no encontrados en {_data_path(run, config, '')}"
            )
        test_images = _mnist_file(run, config, "mnist_imagenes_test", "t10k-images-idx3-ubyte")
        test_labels = _mnist_file(run, config, "mnist_etiquetas_test", "t10k-labels-idx1-ubyte")
        return load_mnist_idx(str(images), str(labels), limits["train"],
                              test_images_path=str(test_images) if test_images else None,
                              test_labels_path=str(test_labels) if test_labels else None,
                              test_limit=limits["test"], normalization=normalization)

    train_paths = [_data_path(run, config, name) for name in config.get_data_setting("cifar_batches_train", [])]
    present = [str(path) for path in train_paths if path.exists()]
    if not present:
        raise FileNotFoundError(f"Archivos CIFAR-10 de entrenamiento no encontrados en "
                                f"{_data_path(run, config, '')}")
    test_paths = [str(_data_path(run, config, name))
                  for name in config.get_data_setting("cifar_batches_test", [])
                  if _data_path(run, config, name).exists()]
    return load_cifar10_pair(present, int(config.get_data_setting("cifar_clase_a", 5)),
                             int(config.get_data_setting("cifar_clase_b", 4)),
                             test_paths or None, limits["train"], limits["test"], normalization)


# ============================================================================
# Subcomandos
# ============================================================================

METRICS_FILE = "metrics.csv"
TVT_FILE = "tvt.csv"
SWEEP_FILE = "sweep_summary.csv"
DEVIATION_FILE = "deviations.csv"
RESIDUAL_FILE = "residuals.csv"
LINEAR_FILE = "linear.csv"


def _single_width(run: RunConfig, allow_inf: bool = False) -> Optional[int]:
    if len(run.d) != 1:
        raise ConfigError(f"{run.subcommand} requiere un único ancho --d, se recibieron {len(run.d)}")
    if run.d[0] is None and not allow_inf:
        raise ConfigError(f"{run.subcommand} no admite un cuello de botella infinito")
    return run.d[0]


def run_train_fs(run: RunConfig, recorder: RunRecorder, config: ConfigManager) -> None:
    dataset = load_dataset(run, config)
    if run.load_snapshot or run.save_snapshot or run.checkpoint or run.resume:
        _single_width(run, allow_inf=True)

    recorder.open_table(METRICS_FILE, METRICS_HEADER)
    curves = {}
    for width in run.d:
        train_config = TrainConfig(
            lr=run.lr, batch_size=run.batch, steps=run.steps, eval_every=run.eval_every,
            mode=run.mode, seed=run.seed, bottleneck_dim=width, loss_scale=run.loss_scale,
            output_anchor=run.output_anchor, depth_g=run.depth_g, activation=run.activation,
            oracle_width=run.n, eps_clamp=config.get_eps_clamp(), time_budget_s=run.time_budget,
        )
        oracle = None
        if train_config.resolved_mode == "infinite_ntk_baseline":
            if run.load_snapshot or run.save_snapshot:
                raise ConfigError("El cuello de botella infinito no usa instantáneas de oráculo")
        else:
            if run.load_snapshot:
                oracle = load_snapshot(run.load_snapshot)
            else:
                oracle = init_wide_net((dataset.input_dim, width, dataset.output_dim), run.depth_g,
                                       run.activation, run.n, run.seed)
            if run.save_snapshot:
                save_snapshot(oracle, run.save_snapshot)
                recorder.register_file(run.save_snapshot)

        state = None
        if run.resume:
            state = load_checkpoint(run.resume, train_config, dataset, oracle, run.workers)
        print(f"▶ d = {train_config.width_label} ({train_config.resolved_mode})")
        rows = run_training(train_config, dataset, oracle, state,
                            on_metrics=lambda row: recorder.append(METRICS_FILE, row),
                            checkpoint_path=run.checkpoint, workers=run.workers)
        if run.checkpoint:
            recorder.register_file(run.checkpoint)
        curves[train_config.width_label] = rows

    if len(dataset.test_x):
        recorder.open_table(TVT_FILE, TVT_HEADER)
        for row in train_vs_test_curve(curves):
            recorder.append(TVT_FILE, row)


def run_train_finite(run: RunConfig, recorder: RunRecorder, config: ConfigManager) -> None:
    dataset = load_dataset(run, config)
    width = _single_width(run)
    if run.load_snapshot:
        net = BottleneckMlp.load_weights(run.load_snapshot)
    else:
        spec = MlpSpec.four_layer(dataset.input_dim, run.n, width, dataset.output_dim,
                                  run.activation, run.seed)
        net = BottleneckMlp(spec)

    recorder.open_table(METRICS_FILE, METRICS_HEADER)
    train_finite(net, dataset, run.lr, run.batch, run.steps, run.eval_every, run.seed,
                 run.loss_scale, on_metrics=lambda row: recorder.append(METRICS_FILE, row))
    if run.save_snapshot:
        net.save_weights(run.save_snapshot)
        recorder.register_file(run.save_snapshot)


def run_sweep(run: RunConfig, recorder: RunRecorder, config: ConfigManager) -> None:
    dataset = load_dataset(run, config)
    results, summary = sweep_bottleneck(run.widths, run.n, dataset, run.lr, run.batch, run.steps,
                                        run.seed, run.eval_every, run.activation, run.loss_scale,
                                        run.workers)
    recorder.open_table(METRICS_FILE, METRICS_HEADER)
    for width in run.widths:
        for row in results[width]:
            recorder.append(METRICS_FILE, row)
    recorder.open_table(SWEEP_FILE, SWEEP_SUMMARY_HEADER)
    for row in summary:
        recorder.append(SWEEP_FILE, row)
        print(f"  d = {row[0]:>4}: train_error = {row[3]:.4f}, test_error = {row[4]:.4f}")


def run_verify_cov(run: RunConfig, recorder: RunRecorder, config: ConfigManager) -> None:
    kinds = KINDS if run.kind == "all" else (run.kind,)
    pairs = random_input_pairs(run.pairs, run.pair_dim, run.seed)
    threshold = float(config.get_verification_setting("umbral_desviacion", 0.15))
    full_scale = config.get_full_scale_replicas()

    recorder.open_table(DEVIATION_FILE, DEVIATION_HEADER)
    for kind in kinds:
        replicas = full_scale[kind] if run.full_scale else run.replicas
        reports = mc_covariance_deviation(kind, pairs, run.n, replicas, run.seed, run.activation,
                                          run.workers)
        for report in reports:
            recorder.append(DEVIATION_FILE, report.as_row())
        passed = sum(report.passes(threshold) for report in reports)
        print(f"  {kind}: {passed}/{len(reports)} pares con desviación − 2·SE ≤ {threshold}")


def _write_residuals(recorder: RunRecorder, file_name: str, series: Dict, threshold: float) -> None:
    recorder.open_table(file_name, RESIDUAL_HEADER)
    for quantity in ("f", "g", "J"):
        for row in series[quantity].rows():
            recorder.append(file_name, row)
        median = series[quantity].median()
        status = "✅" if median <= threshold else "⚠️"
        print(f"  {status} {quantity}: mediana {median:.4g} (umbral {threshold})")


def run_verify_residuals(run: RunConfig, recorder: RunRecorder, config: ConfigManager) -> None:
    dataset = load_dataset(run, config)
    width = _single_width(run)
    series = finite_residuals(dataset.train_x, dataset.train_y, run.n, width, run.lr, run.steps,
                              run.seed, run.activation, config.get_eps_clamp())
    _write_residuals(recorder, RESIDUAL_FILE, series,
                     float(config.get_verification_setting("umbral_residual", 0.1)))


def run_verify_linear(run: RunConfig, recorder: RunRecorder, config: ConfigManager) -> None:
    dataset = load_dataset(run, config)
    width = _single_width(run)

    if run.experiment == "residuals":
        threshold = float(config.get_verification_setting("umbral_residual", 0.1))
        for mode in ("deep4", "effective2"):
            print(f"▶ {mode}")
            series = linear_residuals(mode, dataset.train_x, dataset.train_y, run.n, width,
                                      run.lr, run.steps, run.seed)
            _write_residuals(recorder, f"residuals_{mode}.csv", series, threshold)
        return

    recorder.open_table(LINEAR_FILE, LINEAR_HEADER)
    if run.experiment == "equivalence":
        for depth_f, depth_g in run.depths:
            result = simulate_linear_pair((dataset.input_dim, width, dataset.output_dim), depth_f,
                                          depth_g, run.n, run.lr, run.lr, dataset.train_x,
                                          dataset.train_y, run.steps, run.seed)
            running = np.maximum.accumulate(result.deviations)
            for step, (loss, deviation) in enumerate(zip(result.losses, running)):
                recorder.append(LINEAR_FILE, [step, depth_f, depth_g, run.n, loss, deviation])
            print(f"  L_f={depth_f}, L_g={depth_g}: max_rel_dev = {result.max_rel_dev:.3g}")
        return

    curves = acceleration_probe(run.depths, run.n, dataset.train_x, dataset.train_y, run.lr,
                                run.steps, run.seed, run.init_scale, width)
    for (depth_f, depth_g), curve in curves.items():
        for step, loss in enumerate(curve):
            recorder.append(LINEAR_FILE, [step, depth_f, depth_g, run.n, loss, float("nan")])
        reached = steps_to_threshold(curve, 0.1)
        print(f"  L_f={depth_f}, L_g={depth_g}: 0.1·L₀ en el paso {reached if reached is not None else 'nunca'}")


def run_gen_data(run: RunConfig, recorder: RunRecorder, config: ConfigManager) -> None:
    dataset = load_dataset(run, config)
    for path in export_csv(dataset, run.output):
        recorder.register_file(str(path))
    print(f"  {dataset.summary()}")


HANDLERS: Dict[str, Callable[[RunConfig, RunRecorder, ConfigManager], None]] = {
    "train-fs": run_train_fs,
    "train-finite": run_train_finite,
    "sweep-bottleneck": run_sweep,
    "verify-cov": run_verify_cov,
    "verify-residuals": run_verify_residuals,
    "verify-linear": run_verify_linear,
    "gen-data": run_gen_data,
}


# ============================================================================
# Parser y despacho
# ============================================================================

def setup_logging(log_level=logging.INFO, log_dir: Optional[str] = None) -> None:
    """Configura el sistema de logging (consola y logs/system.log)."""
    log_dir = Path(log_dir) if log_dir else get_config().get_logs_directory()
    os.makedirs(log_dir, exist_ok=True)
    log_format = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    logging.basicConfig(
        level=log_level,
        format=log_format,
        handlers=[
            logging.StreamHandler(),
            logging.FileHandler(log_dir / 'system.log')
        ]
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bntk",
        description="Simulador de redes infinitamente anchas con cuello de botella",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Ejemplos:
  # Datos sintéticos con varios anchos de cuello de botella
  python3 main.py train-fs --preset synthetic

  # Línea base NTK con cuello infinito en MNIST
  python3 main.py train-fs --dataset mnist --d inf

  # Covarianzas J-J con 10⁴ réplicas
  python3 main.py verify-cov --kind JJ --n 10000 --replicas 10000
        """
    )
    parser.add_argument('--debug', action='store_true', help='Habilitar modo debug (más logging)')
    parser.add_argument('--log-dir', help='Directorio de logs (por defecto el de config.json)')
    parser.add_argument('--show-config', action='store_true', help='Imprimir el resumen de config.json')

    subparsers = parser.add_subparsers(dest="subcommand", required=True, metavar="SUBCOMANDO")
    for name in SUBCOMMANDS:
        sub = subparsers.add_parser(name, help=f"Ejecutar {name}")
        sub.add_argument('--preset', help='Preset de config.json')
        sub.add_argument('--config', help='Archivo plano clave = valor')
        sub.add_argument('--output', help='Directorio de salida')
        sub.add_argument('--seed', type=int)
        sub.add_argument('--dataset', choices=DATASETS)
        sub.add_argument('--activation', help="relu, linear o softplus(m)")
        sub.add_argument('--d', type=parse_widths, help='Ancho(s) del cuello de botella, p. ej. 10,100,inf')
        sub.add_argument('--n', type=int, help='Ancho oculto')
        sub.add_argument('--lr', type=float)
        sub.add_argument('--batch', type=int)
        sub.add_argument('--steps', type=int)
        sub.add_argument('--eval-every', type=int)
        sub.add_argument('--loss-scale', type=float)
        sub.add_argument('--samples', type=int, help='Muestras de entrenamiento (sintéticos/proyección)')
        sub.add_argument('--test-samples', type=int)
        sub.add_argument('--input-dim', type=int)
        sub.add_argument('--output-dim', type=int)
        sub.add_argument('--normalization', choices=NORMALIZATIONS)
        sub.add_argument('--data-dir')
        sub.add_argument('--full', action='store_true', default=None,
                         help='Usar los conjuntos completos (sin límites de escritorio)')

        if name == "train-fs":
            sub.add_argument('--mode', choices=MODES)
            sub.add_argument('--output-anchor', choices=ANCHORS)
            sub.add_argument('--depth-g', type=int)
            sub.add_argument('--checkpoint', help='Ruta FSD1 donde guardar el estado')
            sub.add_argument('--resume', help='Checkpoint FSD1 desde el que reanudar')
            sub.add_argument('--time-budget', type=float, help='Tope de segundos por ancho')
        if name in ("train-fs", "train-finite"):
            sub.add_argument('--save-snapshot', help='Guardar pesos iniciales (WNS1)')
            sub.add_argument('--load-snapshot', help='Cargar pesos iniciales (WNS1)')
        if name == "sweep-bottleneck":
            sub.add_argument('--widths', type=parse_int_list, help='Anchos del barrido, p. ej. 1,4,16')
        if name == "verify-cov":
            sub.add_argument('--kind', choices=KINDS + ("all",))
            sub.add_argument('--replicas', type=int)
            sub.add_argument('--pairs', type=int)
            sub.add_argument('--pair-dim', type=int)
            sub.add_argument('--full-scale', action='store_true', default=None,
                             help='Réplicas a escala completa (10⁵ J-J, 3·10⁴ J-f y f-f)')
        if name == "verify-linear":
            sub.add_argument('--experiment', choices=EXPERIMENTS)
            sub.add_argument('--depths', type=parse_depths, help='Pares LfxLg, p. ej. 1x1,2x2')
            sub.add_argument('--init-scale', type=float)
    return parser


def dispatch(argv: Sequence[str]) -> int:
    """
    Ejecuta un subcomando y retorna el código de salida.

    Returns:
        0 éxito, 2 error de configuración o de uso, 3 aborto numérico
    """
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_CONFIG

    setup_logging(logging.DEBUG if args.debug else logging.INFO, args.log_dir)
    config = get_config()
    if args.show_config:
        config.print_config_summary()

    print("\n" + "=" * 70)
    print(f"  🧮 {config.get_system_name()} · {args.subcommand}")
    print("=" * 70 + "\n")

    try:
        run = resolve_run_config(args, config)
    except (ConfigError, ValueError, FileNotFoundError) as e:
        logger.error(f"Configuración inválida: {e}")
        print(f"❌ ERROR: {e}")
        return EXIT_CONFIG

    recorder = RunRecorder(run.output, run.subcommand)
    status, code = "ok", EXIT_OK
    try:
        HANDLERS[run.subcommand](run, recorder, config)
    except NumericalAbort as e:
        logger.error(f"Aborto numérico: {e}")
        print(f"❌ ABORTO NUMÉRICO: {e}")
        status, code = f"numerical_abort: {e}", EXIT_NUMERICAL
    except (ConfigError, ValueError, FileNotFoundError) as e:
        logger.error(f"Error de configuración: {e}")
        print(f"❌ ERROR: {e}")
        status, code = f"config_error: {e}", EXIT_CONFIG
    finally:
        manifest = recorder.close(asdict(run), run.seed, status)

    if code == EXIT_OK:
        print(f"\n✅ Resultados en {run.output} (manifiesto: {manifest.name})")
    return code

