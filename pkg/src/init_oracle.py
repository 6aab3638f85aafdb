"""
init_oracle.py
==============
Oráculo de las funciones iniciales aleatorias g₀, F₀ = f₀(g₀) y J₀.

Este módulo se encarga de:
- Instanciar y congelar una red ancha (n = 10000 por defecto) cuyas salidas
  sirven de muestra de g₀(ξ), F₀(ξ) y J₀(x) en puntos arbitrarios
- Persistir la instantánea en el contenedor WNS1
- Muestrear procesos gaussianos exactos por Cholesky con jitter escalonado

Los pesos se guardan en float32 (también en memoria) para que una
instantánea recargada sea idéntica bit a bit; la evaluación es float64.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Protocol, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cholesky

from src.config_manager import get_config
from src.containers import SnapshotHeader, read_weight_snapshot, write_weight_snapshot
from src.errors import CholeskyError
from src.finite_net import Activation, mlp_forward, mlp_jacobian_rows, parse_activation


logger = logging.getLogger("InitOracle")

DEFAULT_WIDTH = 10000


class InitialOracle(Protocol):
    """Fuente de (g₀, F₀, J₀) aceptada por los entrenadores."""

    input_dim: int
    bottleneck_dim: int
    output_dim: int

    def evaluate(self, xi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        ...

    def evaluate_f(self, x: np.ndarray) -> np.ndarray:
        ...

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        ...


@dataclass(frozen=True)
class WideNetSnapshot:
    """
    Red ancha congelada que hace de oráculo de inicialización.

    g(ξ) = θᴸ φ(… φ(θ¹ξ/√d₀) …)/√n y f(x) = v φ(ux/√d)/√n.

    Attributes:
        input_dim: d₀
        bottleneck_dim: d
        output_dim: d_r
        width: n
        depth_g: capas ocultas de g
        activation: relu, linear o softplus(m)
        seed: semilla de 64 bits
        g_layers: θ¹..θᴸ (float32)
        f_u: u, matriz n × d (float32)
        f_v: v, matriz d_r × n (float32)
    """
    input_dim: int
    bottleneck_dim: int
    output_dim: int
    width: int
    depth_g: int
    activation: Activation
    seed: int
    g_layers: Tuple[np.ndarray, ...]
    f_u: np.ndarray
    f_v: np.ndarray

    @property
    def f_layers(self) -> Tuple[np.ndarray, np.ndarray]:
        return (self.f_u, self.f_v)

    def evaluate(self, xi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(g₀, F₀) en una entrada o en filas de entradas."""
        xi = np.asarray(xi, dtype=np.float64)
        single = xi.ndim == 1
        batch = np.atleast_2d(xi)
        if batch.shape[1] != self.input_dim:
            raise ValueError(f"Dimensión de ξ {batch.shape[1]}, se esperaba {self.input_dim}")
        g0, _ = mlp_forward(self.g_layers, batch, self.activation)
        F0, _ = mlp_forward(self.f_layers, g0, self.activation)
        if single:
            return g0[0], F0[0]
        return g0, F0

    def evaluate_f(self, x: np.ndarray) -> np.ndarray:
        """f₀ en embeddings arbitrarios."""
        x = np.asarray(x, dtype=np.float64)
        batch = np.atleast_2d(x)
        if batch.shape[1] != self.bottleneck_dim:
            raise ValueError(f"Dimensión de x {batch.shape[1]}, se esperaba {self.bottleneck_dim}")
        out, _ = mlp_forward(self.f_layers, batch, self.activation)
        return out[0] if x.ndim == 1 else out

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        """J₀(x) = v·diag(φ'(ux/√d))·u/√(nd); d_r × d o B × d_r × d."""
        x = np.asarray(x, dtype=np.float64)
        batch = np.atleast_2d(x)
        if batch.shape[1] != self.bottleneck_dim:
            raise ValueError(f"Dimensión de x {batch.shape[1]}, se esperaba {self.bottleneck_dim}")
        rows = mlp_jacobian_rows(self.f_layers, batch, self.activation)
        return rows[0] if x.ndim == 1 else rows

    def header(self) -> SnapshotHeader:
        return SnapshotHeader(
            input_dim=self.input_dim,
            bottleneck_dim=self.bottleneck_dim,
            output_dim=self.output_dim,
            width=self.width,
            depth_g=self.depth_g,
            depth_f=1,
            activation=self.activation.name,
            seed=self.seed,
            softplus_m=self.activation.softplus_m,
        )


@dataclass(frozen=True)
class GpSampleSet:
    """
    Muestra conjunta de un proceso gaussiano centrado.

    Attributes:
        points: Puntos de evaluación (P × dim)
        values: Valores muestreados (P × out_dim)
        chol_jitter: Jitter absoluto sumado a la diagonal
    """
    points: np.ndarray
    values: np.ndarray
    chol_jitter: float


# ============================================================================
# Construcción
# ============================================================================

def init_wide_net(dims: Tuple[int, int, int], depth_g: int = 1, activation="relu",
                  width: int = DEFAULT_WIDTH, seed: int = 0) -> WideNetSnapshot:
    """
    Crea una instantánea determinista a partir de la semilla.

    Args:
        dims: (d₀, d, d_r)
        depth_g: Capas ocultas de g (≥ 1)
        activation: Nombre ('relu', 'linear', 'softplus(m)') o Activation
        width: Ancho n
        seed: Semilla

    Raises:
        ValueError: Dimensiones no positivas

    Example:
        >>> oracle = init_wide_net((784, 10, 10), width=10000, seed=3)
    """
    input_dim, bottleneck_dim, output_dim = dims
    if min(input_dim, bottleneck_dim, output_dim) < 1:
        raise ValueError(f"Dimensiones no positivas: {dims}")
    if width < 1:
        raise ValueError(f"width debe ser ≥ 1, se recibió {width}")
    if depth_g < 1:
        raise ValueError(f"depth_g debe ser ≥ 1, se recibió {depth_g}")
    if isinstance(activation, str):
        activation = parse_activation(activation)

    rng = np.random.default_rng(seed)
    shapes = SnapshotHeader(input_dim, bottleneck_dim, output_dim, width, depth_g, 1,
                            activation.name, seed, activation.softplus_m).block_shapes()
    blocks = [rng.standard_normal(shape, dtype=np.float32) for shape in shapes]

    logger.debug(f"Instantánea creada: dims={dims}, n={width}, semilla={seed}")
    return _snapshot_from_blocks(dims, width, depth_g, activation, seed, blocks)


def _snapshot_from_blocks(dims, width, depth_g, activation, seed, blocks) -> WideNetSnapshot:
    blocks = [np.asarray(block, dtype=np.float32) for block in blocks]
    for block in blocks:
        block.setflags(write=False)
    return WideNetSnapshot(
        input_dim=dims[0],
        bottleneck_dim=dims[1],
        output_dim=dims[2],
        width=width,
        depth_g=depth_g,
        activation=activation,
        seed=seed,
        g_layers=tuple(blocks[:depth_g + 1]),
        f_u=blocks[depth_g + 1],
        f_v=blocks[depth_g + 2],
    )


def snapshot_from_weights(g_layers, f_u, f_v, activation="linear", seed: int = 0) -> WideNetSnapshot:
    """
    Construye una instantánea con pesos explícitos (ej. redes de ancho 1
    evaluables a mano).
    """
    if isinstance(activation, str):
        activation = parse_activation(activation)
    g_layers = [np.atleast_2d(np.asarray(w, dtype=np.float32)) for w in g_layers]
    f_u = np.atleast_2d(np.asarray(f_u, dtype=np.float32))
    f_v = np.atleast_2d(np.asarray(f_v, dtype=np.float32))
    dims = (g_layers[0].shape[1], g_layers[-1].shape[0], f_v.shape[0])
    width = f_u.shape[0]
    return _snapshot_from_blocks(dims, width, len(g_layers) - 1, activation, seed,
                                 list(g_layers) + [f_u, f_v])


# ============================================================================
# Evaluación
# ============================================================================

def oracle_eval(snapshot: WideNetSnapshot, xi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(g₀(ξ), F₀(ξ)) con F₀ = f₀(g₀) por el mismo forward."""
    return snapshot.evaluate(xi)


def oracle_eval_f(snapshot: WideNetSnapshot, x: np.ndarray) -> np.ndarray:
    """f₀(x) en un embedding arbitrario."""
    return snapshot.evaluate_f(x)


def oracle_eval_jacobian(snapshot: WideNetSnapshot, x: np.ndarray) -> np.ndarray:
    """J₀(x), constante a trozos para ReLU."""
    return snapshot.jacobian(x)


# ============================================================================
# Persistencia
# ============================================================================

def save_snapshot(snapshot: WideNetSnapshot, path: str) -> None:
    """Guarda la instantánea en formato WNS1."""
    blocks = list(snapshot.g_layers) + [snapshot.f_u, snapshot.f_v]
    write_weight_snapshot(path, snapshot.header(), blocks)
    logger.info(f"Instantánea guardada en {path} (n={snapshot.width})")


def load_snapshot(path: str) -> WideNetSnapshot:
    """
    Carga una instantánea WNS1.

    Raises:
        DataFormatError: Si el archivo no es una instantánea de oráculo
    """
    header, blocks = read_weight_snapshot(path)
    if header.depth_f != 1:
        raise ValueError(f"{path}: el oráculo requiere f de una capa oculta (depth_f={header.depth_f})")
    activation = Activation(header.activation, header.softplus_m)
    dims = (header.input_dim, header.bottleneck_dim, header.output_dim)
    logger.info(f"Instantánea cargada desde {path} (n={header.width}, semilla={header.seed})")
    return _snapshot_from_blocks(dims, header.width, header.depth_g, activation, header.seed, blocks)


# ============================================================================
# Muestreo de procesos gaussianos
# ============================================================================

def gp_sample(kernel: Callable[[np.ndarray, np.ndarray], np.ndarray], points: np.ndarray,
              out_dim: int, seed, jitter: Optional[float] = None,
              initial_jitter: Optional[float] = None, max_doublings: Optional[int] = None,
              max_jitter: Optional[float] = None) -> GpSampleSet:
    """
    Muestra exacta values = chol(G + jitter·I) · Z con Z normal estándar.

    El jitter parte de initial_jitter·traza/dim (o del valor dado) y se
    duplica hasta max_doublings veces sin superar max_jitter·traza/dim.
    Los tres límites que no se indiquen salen de la sección 'oraculo' de
    config.json.

    Args:
        kernel: Constructor de Gram kernel(A, B)
        points: Matriz P × dim
        out_dim: Coordenadas i.i.d. de salida
        seed: Semilla o SeedSequence

    Raises:
        CholeskyError: Si la Gram no es PSD tras escalar el jitter
    """
    config = get_config()
    if initial_jitter is None:
        initial_jitter = config.get_initial_jitter()
    if max_doublings is None:
        max_doublings = config.get_max_jitter_doublings()
    if max_jitter is None:
        max_jitter = config.get_max_jitter()

    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.shape[0] < 1:
        raise ValueError("gp_sample necesita al menos un punto")
    if out_dim < 1:
        raise ValueError(f"out_dim debe ser ≥ 1, se recibió {out_dim}")

    gram = np.asarray(kernel(points, points), dtype=np.float64)
    gram = 0.5 * (gram + gram.T)
    size = gram.shape[0]
    rng = np.random.default_rng(seed)
    normals = rng.standard_normal((size, out_dim))

    scale = float(np.trace(gram)) / size
    if scale <= 0.0:
        if np.any(gram != 0.0):
            raise CholeskyError("Gram con traza no positiva")
        return GpSampleSet(points, np.zeros((size, out_dim)), 0.0)

    current = jitter if jitter is not None else initial_jitter * scale
    ceiling = max(max_jitter * scale, current)
    identity = np.eye(size)
    for attempt in range(max_doublings + 1):
        try:
            lower = cholesky(gram + current * identity, lower=True)
            if attempt:
                logger.debug(f"Cholesky con jitter {current:.3g} tras {attempt} duplicaciones")
            return GpSampleSet(points, lower @ normals, current)
        except LinAlgError:
            if current * 2.0 > ceiling * (1.0 + 1e-12):
                break
            current *= 2.0
    raise CholeskyError(
        f"Gram no PSD tras escalar el jitter hasta {current:.3g} (escala {scale:.3g})"
    )

