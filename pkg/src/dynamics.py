"""
dynamics.py
===========
Entrenador en espacio de funciones para redes infinitamente anchas con
cuello de botella finito.

Este módulo se encarga de:
- Evolución SGD discreta de g, J y F a partir del historial de pasos
- Variante de flujo de gradiente por Euler (lote completo)
- Línea base de cuello de botella infinito (NTK profundo congelado)
- Bucle de entrenamiento con minibatches sembrados y métricas periódicas
- Curvas de pérdida train vs test y checkpoints FSD1

Convenciones:
    L = Σ_i ½‖F_i − y_i‖² escalada por loss_scale, χ = loss_scale·(F − y)
    g_t(ξ) = g₀(ξ) − μ Σ_s Θ(ξ, ξ_s) p_s,           p_s = J_sᵀχ_s
    J_t(x) = J₀(x) − μ Σ_s χ_s Ξ(x, g_s)ᵀ
    F_t(ξ) = A(ξ) − μ Σ_s K(g_t(ξ), g_s) χ_s
con A(ξ) = F₀(ξ) (anclaje 'initial') o f₀(g_t(ξ)) (anclaje 'moving').
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from src.containers import read_named_arrays, write_named_arrays
from src.errors import DegenerateEmbeddingError, NumericalAbort
from src.finite_net import iterate_batches
from src.init_oracle import InitialOracle, gp_sample, init_wide_net
from src.kernel_core import (
    DEFAULT_EPS_CLAMP,
    BottleneckKernels,
    linear_ntk_matrix,
    relu_nngp_deep_matrix,
    relu_ntk_deep_matrix,
)
from src.run_manifest import MetricRow, prediction_metrics


logger = logging.getLogger("Dynamics")

MODES = ("bottleneck_sgd", "bottleneck_gradient_flow_euler", "infinite_ntk_baseline")
ANCHORS = ("initial", "moving")

_QUERY_CHUNK = 256


# ============================================================================
# Tipos
# ============================================================================

@dataclass
class HistoryEntry:
    """
    Cantidades guardadas de un paso de SGD.

    Attributes:
        batch_indices: Índices de entrenamiento del lote
        g_batch: Embeddings g_{s,i} del lote (B × d)
        chi_batch: χ_{s,i} (B × d_r)
        p_batch: p_{s,i} = J_{s,i}ᵀχ_{s,i} (B × d), calculado al insertar
    """
    batch_indices: np.ndarray
    g_batch: np.ndarray
    chi_batch: np.ndarray
    p_batch: np.ndarray


class HistoryBuffer:
    """
    Única copia del historial: filas concatenadas con crecimiento amortizado.

    `step_sizes` guarda cuántas filas aportó cada paso; `entries()` devuelve
    vistas por paso sobre los mismos arreglos.
    """

    def __init__(self, bottleneck_dim: int, output_dim: int):
        self.size = 0
        self.step_sizes: List[int] = []
        self._indices = np.zeros(0, dtype=np.int64)
        self._g = np.zeros((0, bottleneck_dim))
        self._chi = np.zeros((0, output_dim))
        self._p = np.zeros((0, bottleneck_dim))

    def append(self, entry: HistoryEntry) -> None:
        rows = len(entry.batch_indices)
        needed = self.size + rows
        if needed > len(self._indices):
            capacity = max(needed, 2 * len(self._indices), 64)
            self._indices = _grow(self._indices, capacity)
            self._g = _grow(self._g, capacity)
            self._chi = _grow(self._chi, capacity)
            self._p = _grow(self._p, capacity)
        self._indices[self.size:needed] = entry.batch_indices
        self._g[self.size:needed] = entry.g_batch
        self._chi[self.size:needed] = entry.chi_batch
        self._p[self.size:needed] = entry.p_batch
        self.size = needed
        self.step_sizes.append(rows)

    def entries(self) -> List[HistoryEntry]:
        """Entradas por paso como vistas (sin copia) de los arreglos concatenados."""
        out = []
        offset = 0
        for rows in self.step_sizes:
            stop = offset + rows
            out.append(HistoryEntry(self._indices[offset:stop], self._g[offset:stop],
                                    self._chi[offset:stop], self._p[offset:stop]))
            offset = stop
        return out

    @property
    def indices(self) -> np.ndarray:
        return self._indices[:self.size]

    @property
    def g(self) -> np.ndarray:
        return self._g[:self.size]

    @property
    def chi(self) -> np.ndarray:
        return self._chi[:self.size]

    @property
    def p(self) -> np.ndarray:
        return self._p[:self.size]


def _grow(array: np.ndarray, capacity: int) -> np.ndarray:
    grown = np.zeros((capacity,) + array.shape[1:], dtype=array.dtype)
    grown[:len(array)] = array
    return grown


@dataclass
class TrainConfig:
    """
    Configuración de una ejecución del entrenador en espacio de funciones.

    Attributes:
        lr: μ (≥ 0)
        batch_size: Tamaño de minibatch
        steps: Pasos totales
        eval_every: Periodo de emisión de métricas
        mode: bottleneck_sgd, bottleneck_gradient_flow_euler o infinite_ntk_baseline
        seed: Semilla de oráculo y minibatches
        bottleneck_dim: d, o None para cuello infinito
        loss_scale: Escala de la pérdida
        output_anchor: 'initial' o 'moving'
        depth_g: Capas ocultas de g
        activation: 'relu' o 'linear'
        oracle_width: n de la instantánea
        eps_clamp: Margen de λ
        time_budget_s: Tope de tiempo de pared (None = sin tope)
    """
    lr: float
    batch_size: int = 20
    steps: int = 5000
    eval_every: int = 100
    mode: str = "bottleneck_sgd"
    seed: int = 0
    bottleneck_dim: Optional[int] = 10
    loss_scale: float = 1.0
    output_anchor: str = "initial"
    depth_g: int = 1
    activation: str = "relu"
    oracle_width: int = 10000
    eps_clamp: float = DEFAULT_EPS_CLAMP
    time_budget_s: Optional[float] = None

    def __post_init__(self):
        if self.lr < 0 or not math.isfinite(self.lr):
            raise ValueError(f"lr debe ser finito y ≥ 0, se recibió {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size debe ser ≥ 1, se recibió {self.batch_size}")
        if self.steps < 0:
            raise ValueError(f"steps debe ser ≥ 0, se recibió {self.steps}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every debe ser ≥ 1, se recibió {self.eval_every}")
        if self.mode not in MODES:
            raise ValueError(f"Modo desconocido: {self.mode}. Opciones: {', '.join(MODES)}")
        if self.output_anchor not in ANCHORS:
            raise ValueError(f"Anclaje desconocido: {self.output_anchor}")
        if self.bottleneck_dim is not None and self.bottleneck_dim < 1:
            raise ValueError(f"bottleneck_dim debe ser ≥ 1, se recibió {self.bottleneck_dim}")
        if self.loss_scale <= 0:
            raise ValueError(f"loss_scale debe ser positivo, se recibió {self.loss_scale}")
        if self.activation not in ("relu", "linear"):
            raise ValueError(f"Activación sin kernels analíticos: {self.activation}")

    @property
    def resolved_mode(self) -> str:
        """Un cuello infinito fuerza la línea base NTK."""
        if self.bottleneck_dim is None:
            return "infinite_ntk_baseline"
        return self.mode

    @property
    def width_label(self) -> Union[int, str]:
        return "inf" if self.bottleneck_dim is None else self.bottleneck_dim


@dataclass
class FunctionState:
    """
    Estado vivo del entrenamiento en espacio de funciones.

    En los modos con cuello finito `step` es igual a la longitud del
    historial; la línea base no acumula historial.

    Attributes:
        train_x, test_x: Entradas ξ
        train_g, test_g: g_t en las entradas rastreadas
        g0_train, g0_test: g₀ congelados
        F0_train, F0_test: F₀ congelados
        oracle: Fuente de (g₀, F₀, J₀)
        kernels: Triple (Θ, K, Ξ)
        lr: μ
        loss_scale: Escala de χ
        output_anchor: 'initial' o 'moving'
        mode: Modo de entrenamiento
        step: t
        buffer: Historial (única copia); `history` expone sus entradas por paso
        train_F, test_F: F integrada (flujo de gradiente y línea base)
        theta_train: Θ(train, train) cacheada
        theta_test: Θ(test, train) cacheada
        workers: Hilos para las sumas por consulta
    """
    train_x: np.ndarray
    test_x: np.ndarray
    train_g: Optional[np.ndarray]
    test_g: Optional[np.ndarray]
    g0_train: Optional[np.ndarray]
    g0_test: Optional[np.ndarray]
    F0_train: np.ndarray
    F0_test: np.ndarray
    oracle: Optional[InitialOracle]
    kernels: Optional[BottleneckKernels]
    lr: float
    loss_scale: float = 1.0
    output_anchor: str = "initial"
    mode: str = "bottleneck_sgd"
    step: int = 0
    train_F: Optional[np.ndarray] = None
    test_F: Optional[np.ndarray] = None
    theta_train: Optional[np.ndarray] = field(default=None, repr=False)
    theta_test: Optional[np.ndarray] = field(default=None, repr=False)
    workers: int = 1
    buffer: HistoryBuffer = field(init=False, repr=False)

    def __post_init__(self):
        d = self.train_g.shape[1] if self.train_g is not None else 0
        self.buffer = HistoryBuffer(d, self.F0_train.shape[1])

    @property
    def history(self) -> List[HistoryEntry]:
        """Entradas por paso, derivadas del buffer."""
        return self.buffer.entries()

    def record(self, entry: HistoryEntry) -> None:
        self.buffer.append(entry)


# ============================================================================
# Construcción del estado
# ============================================================================

def build_kernels(config: TrainConfig, input_dim: int) -> BottleneckKernels:
    if config.activation == "linear":
        # una matriz por capa: f tiene 2, g tiene depth_g + 1
        return BottleneckKernels.linear(input_dim, config.bottleneck_dim, 2, config.depth_g + 1)
    return BottleneckKernels.relu(input_dim, config.bottleneck_dim, config.eps_clamp, config.depth_g)


def init_function_state(dataset, oracle: InitialOracle, kernels: BottleneckKernels, lr: float,
                        loss_scale: float = 1.0, output_anchor: str = "initial",
                        mode: str = "bottleneck_sgd", workers: int = 1) -> FunctionState:
    """
    Estado inicial a partir de un oráculo compartido por train y test.

    Raises:
        ValueError: Dimensiones incompatibles entre datos, oráculo y kernels
    """
    if mode not in MODES[:2]:
        raise ValueError(f"init_function_state no admite el modo {mode}")
    if output_anchor not in ANCHORS:
        raise ValueError(f"Anclaje desconocido: {output_anchor}")
    if oracle.input_dim != dataset.input_dim or oracle.output_dim != dataset.output_dim:
        raise ValueError(
            f"Oráculo (d₀={oracle.input_dim}, d_r={oracle.output_dim}) incompatible con "
            f"los datos (d₀={dataset.input_dim}, d_r={dataset.output_dim})"
        )
    if kernels.bottleneck_dim != oracle.bottleneck_dim or kernels.input_dim != oracle.input_dim:
        raise ValueError("Kernels y oráculo con dimensiones distintas")

    g0_train, F0_train = oracle.evaluate(dataset.train_x)
    if len(dataset.test_x):
        g0_test, F0_test = oracle.evaluate(dataset.test_x)
    else:
        g0_test = np.zeros((0, oracle.bottleneck_dim))
        F0_test = np.zeros((0, oracle.output_dim))

    state = FunctionState(
        train_x=dataset.train_x,
        test_x=dataset.test_x,
        train_g=g0_train.copy(),
        test_g=g0_test.copy(),
        g0_train=g0_train,
        g0_test=g0_test,
        F0_train=F0_train,
        F0_test=F0_test,
        oracle=oracle,
        kernels=kernels,
        lr=lr,
        loss_scale=loss_scale,
        output_anchor=output_anchor,
        mode=mode,
        theta_train=kernels.theta(dataset.train_x, dataset.train_x),
        theta_test=kernels.theta(dataset.test_x, dataset.train_x),
        workers=workers,
    )
    if mode == "bottleneck_gradient_flow_euler":
        state.train_F = F0_train.copy()
        state.test_F = F0_test.copy()
    return state


@dataclass(frozen=True)
class BaselineKernels:
    """NTK y NNGP profundos de la red con cuello infinito."""
    activation: str
    input_dim: int
    depth: int

    def ntk(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        if self.activation == "linear":
            return linear_ntk_matrix(A, B, self.input_dim, self.depth)
        return relu_ntk_deep_matrix(A, B, self.input_dim, self.depth)

    def nngp(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        if self.activation == "linear":
            return linear_ntk_matrix(A, B, self.input_dim, 1)
        return relu_nngp_deep_matrix(A, B, self.input_dim, self.depth)


def init_baseline_state(dataset, config: TrainConfig) -> FunctionState:
    """
    Estado de la línea base: F₀ muestreada conjuntamente en train y test del
    NNGP profundo; Θ_deep de profundidad L_g + L_f.
    """
    baseline = BaselineKernels(config.activation, dataset.input_dim, config.depth_g + 1)
    points = np.vstack([dataset.train_x, dataset.test_x])
    seed = np.random.SeedSequence([config.seed, 0xBA5E])
    F0 = gp_sample(baseline.nngp, points, dataset.output_dim, seed).values
    N = len(dataset.train_x)

    return FunctionState(
        train_x=dataset.train_x,
        test_x=dataset.test_x,
        train_g=None,
        test_g=None,
        g0_train=None,
        g0_test=None,
        F0_train=F0[:N],
        F0_test=F0[N:],
        oracle=None,
        kernels=None,
        lr=config.lr,
        loss_scale=config.loss_scale,
        mode="infinite_ntk_baseline",
        train_F=F0[:N].copy(),
        test_F=F0[N:].copy(),
        theta_train=baseline.ntk(dataset.train_x, dataset.train_x),
        theta_test=baseline.ntk(dataset.test_x, dataset.train_x),
    )


def build_state(config: TrainConfig, dataset, oracle: Optional[InitialOracle] = None,
                workers: int = 1) -> FunctionState:
    """Crea el estado inicial correspondiente al modo resuelto de `config`."""
    mode = config.resolved_mode
    if mode == "infinite_ntk_baseline":
        return init_baseline_state(dataset, config)
    if oracle is None:
        dims = (dataset.input_dim, config.bottleneck_dim, dataset.output_dim)
        oracle = init_wide_net(dims, config.depth_g, config.activation,
                               config.oracle_width, config.seed)
    kernels = build_kernels(config, dataset.input_dim)
    return init_function_state(dataset, oracle, kernels, config.lr, config.loss_scale,
                               config.output_anchor, mode, workers)


# ============================================================================
# Sumas sobre el historial
# ============================================================================

def _map_queries(state: FunctionState, fn: Callable[[int], np.ndarray], count: int) -> List[np.ndarray]:
    if state.workers > 1 and count > 1:
        with ThreadPoolExecutor(max_workers=state.workers) as pool:
            return list(pool.map(fn, range(count)))
    return [fn(index) for index in range(count)]


def _kernel_history_sum(state: FunctionState, G: np.ndarray) -> np.ndarray:
    """Σ_s K(g, g_s) χ_s para cada fila de G."""
    out = np.zeros((len(G), state.F0_train.shape[1]))
    if state.buffer.size == 0 or len(G) == 0:
        return out
    for start in range(0, len(G), _QUERY_CHUNK):
        stop = start + _QUERY_CHUNK
        out[start:stop] = state.kernels.k(G[start:stop], state.buffer.g) @ state.buffer.chi
    return out


def _jacobian_rows(state: FunctionState, G: np.ndarray) -> np.ndarray:
    """J_t en cada fila de G (Q × d_r × d)."""
    J = np.array(state.oracle.jacobian(G), dtype=np.float64).reshape(
        len(G), state.F0_train.shape[1], G.shape[1])
    if state.buffer.size == 0 or state.lr == 0.0:
        return J
    chi_t = state.buffer.chi.T

    def correction(index: int) -> np.ndarray:
        return chi_t @ state.kernels.xi_rows(G[index], state.buffer.g)

    try:
        corrections = _map_queries(state, correction, len(G))
    except DegenerateEmbeddingError as e:
        raise DegenerateEmbeddingError(f"Paso {state.step}: {e}")
    for index, term in enumerate(corrections):
        J[index] -= state.lr * term
    return J


def _anchor(state: FunctionState, G: np.ndarray, F0: np.ndarray) -> np.ndarray:
    if state.output_anchor == "moving":
        return np.asarray(state.oracle.evaluate_f(G), dtype=np.float64).reshape(F0.shape)
    return F0


def replay_embeddings(state: FunctionState, xi: np.ndarray) -> np.ndarray:
    """g_t en entradas nuevas: g₀ del oráculo más la suma del historial."""
    xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
    g0, _ = state.oracle.evaluate(xi)
    g0 = np.atleast_2d(g0)
    if state.buffer.size == 0:
        return g0
    theta = state.kernels.theta(xi, state.train_x[state.buffer.indices])
    return g0 - state.lr * theta @ state.buffer.p


# ============================================================================
# Operaciones
# ============================================================================

def mse_loss_derivative(F: np.ndarray, y: np.ndarray) -> np.ndarray:
    """
    χ = F − y para L = ½‖F − y‖² por muestra.

    Raises:
        ValueError: Dimensiones distintas
    """
    F = np.asarray(F, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if F.shape != y.shape:
        raise ValueError(f"Dimensiones distintas: F {F.shape} vs y {y.shape}")
    return F - y


def _check_chi(state: FunctionState, chi: np.ndarray) -> None:
    if not np.all(np.isfinite(chi)):
        raise NumericalAbort(f"χ no finito en el paso {state.step} (modo {state.mode})")


def sgd_step(state: FunctionState, batch: Sequence[int], targets: np.ndarray) -> FunctionState:
    """
    Un paso de SGD en espacio de funciones.

    1. Reconstruye g, J y F del lote con el historial (J en el embedding móvil).
    2. Agrega la entrada del historial.
    3. Propaga −μΘ(ξ, ξ_i)p_i a todos los g rastreados de train y test.

    Raises:
        DegenerateEmbeddingError: Embedding de norma cero al evaluar Ξ
    """
    if state.mode == "infinite_ntk_baseline":
        return ntk_baseline_step(state, batch, targets)
    if state.mode != "bottleneck_sgd":
        raise ValueError(f"sgd_step no admite el modo {state.mode}")

    batch = np.asarray(batch, dtype=np.int64)
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if batch.size == 0 or batch.min() < 0 or batch.max() >= len(state.train_x):
        raise ValueError(f"Índices de lote inválidos para N={len(state.train_x)}")

    g_batch = state.train_g[batch].copy()
    J = _jacobian_rows(state, g_batch)
    F = _anchor(state, g_batch, state.F0_train[batch]) - state.lr * _kernel_history_sum(state, g_batch)
    chi = state.loss_scale * mse_loss_derivative(F, targets)
    _check_chi(state, chi)
    p = np.einsum('bij,bi->bj', J, chi)

    state.record(HistoryEntry(batch, g_batch, chi, p))
    state.train_g -= state.lr * (state.theta_train[:, batch] @ p)
    if len(state.test_g):
        state.test_g -= state.lr * (state.theta_test[:, batch] @ p)
    state.step += 1
    logger.debug(f"paso {state.step}: ‖χ‖={np.linalg.norm(chi):.4g}")
    return state


def gradient_flow_step(state: FunctionState, targets: np.ndarray) -> FunctionState:
    """
    Paso de Euler explícito del flujo de gradiente con lote completo.

    ġ = −Θ Jᵀχ, J̇(x) = −Σ χ_i Ξ(x, g_i)ᵀ, Ḟ = −(Kχ + Θ J Jᵀχ); F se integra
    de forma incremental.
    """
    if state.mode != "bottleneck_gradient_flow_euler":
        raise ValueError(f"gradient_flow_step no admite el modo {state.mode}")
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    mu = state.lr

    G = state.train_g.copy()
    J = _jacobian_rows(state, G)
    chi = state.loss_scale * mse_loss_derivative(state.train_F, targets)
    _check_chi(state, chi)
    p = np.einsum('bij,bi->bj', J, chi)

    q_train = state.theta_train @ p
    dF_train = -mu * (state.kernels.k(G, G) @ chi) - mu * np.einsum('bij,bj->bi', J, q_train)

    if len(state.test_g):
        G_test = state.test_g.copy()
        J_test = _jacobian_rows(state, G_test)
        q_test = state.theta_test @ p
        dF_test = -mu * (state.kernels.k(G_test, G) @ chi) - mu * np.einsum('bij,bj->bi', J_test, q_test)
        state.test_g = G_test - mu * q_test
        state.test_F = state.test_F + dF_test

    state.record(HistoryEntry(np.arange(len(G), dtype=np.int64), G, chi, p))
    state.train_g = G - mu * q_train
    state.train_F = state.train_F + dF_train
    state.step += 1
    return state


def ntk_baseline_step(state: FunctionState, batch: Sequence[int], targets: np.ndarray) -> FunctionState:
    """F_{t+1} = F_t − μ Θ_deep(ξ, ξ_batch) χ con kernel congelado."""
    if state.mode != "infinite_ntk_baseline":
        raise ValueError(f"ntk_baseline_step no admite el modo {state.mode}")
    batch = np.asarray(batch, dtype=np.int64)
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))

    chi = state.loss_scale * mse_loss_derivative(state.train_F[batch], targets)
    _check_chi(state, chi)
    state.train_F = state.train_F - state.lr * (state.theta_train[:, batch] @ chi)
    if len(state.test_F):
        state.test_F = state.test_F - state.lr * (state.theta_test[:, batch] @ chi)
    state.step += 1
    return state


def eval_F(state: FunctionState, which: Union[str, np.ndarray] = "train") -> np.ndarray:
    """
    Predicciones actuales.

    Args:
        which: 'train', 'test' o una matriz de entradas ξ nuevas (sólo SGD)

    Returns:
        Matriz de predicciones; recalcula la suma completa del historial con
        el g actual de cada entrada consultada
    """
    if state.mode != "bottleneck_sgd":
        if isinstance(which, str):
            if which not in ("train", "test"):
                raise ValueError(f"Partición desconocida: {which}")
            F = state.train_F if which == "train" else state.test_F
            return F.copy()
        raise ValueError(f"El modo {state.mode} sólo evalúa las entradas rastreadas")

    if isinstance(which, str):
        if which == "train":
            G, F0 = state.train_g, state.F0_train
        elif which == "test":
            G, F0 = state.test_g, state.F0_test
        else:
            raise ValueError(f"Partición desconocida: {which}")
    else:
        xi = np.atleast_2d(np.asarray(which, dtype=np.float64))
        G = replay_embeddings(state, xi)
        _, F0 = state.oracle.evaluate(xi)
        F0 = np.atleast_2d(F0)

    if len(G) == 0:
        return np.zeros((0, state.F0_train.shape[1]))
    return _anchor(state, G, F0) - state.lr * _kernel_history_sum(state, G)


def eval_J(state: FunctionState, x: np.ndarray) -> np.ndarray:
    """
    J_t(x) = J₀(x) − μ Σ_s χ_s Ξ(x, g_s)ᵀ (matriz d_r × d).

    Raises:
        DegenerateEmbeddingError: Si ‖x‖ = 0 con historial no vacío (ReLU)
    """
    if state.oracle is None:
        raise ValueError("La línea base no tiene Jacobiano de cuello de botella")
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return _jacobian_rows(state, x)[0]


def history_consistency(state: FunctionState, max_inputs: int = 8) -> float:
    """
    Máxima desviación relativa entre los g mantenidos incrementalmente y los
    recalculados desde cero sobre todo el historial (≤ max_inputs entradas).
    """
    if state.train_g is None:
        raise ValueError("La línea base no rastrea embeddings")
    count = min(max_inputs, len(state.train_x))
    recomputed = state.g0_train[:count].copy()
    if state.buffer.size:
        theta = state.kernels.theta(state.train_x[:count], state.train_x[state.buffer.indices])
        recomputed -= state.lr * theta @ state.buffer.p
    scale = max(float(np.max(np.abs(recomputed))), 1e-300)
    return float(np.max(np.abs(recomputed - state.train_g[:count]))) / scale


# ============================================================================
# Bucle de entrenamiento
# ============================================================================

def run_training(config: TrainConfig, dataset, oracle: Optional[InitialOracle] = None,
                 state: Optional[FunctionState] = None,
                 on_metrics: Optional[Callable[[MetricRow], None]] = None,
                 checkpoint_path: Optional[str] = None, checkpoint_every: Optional[int] = None,
                 workers: int = 1) -> List[MetricRow]:
    """
    Entrena en espacio de funciones y emite métricas cada eval_every pasos.

    Args:
        config: Hiperparámetros
        dataset: Datos
        oracle: Oráculo compartido (se crea desde la semilla si falta)
        state: Estado a reanudar (opcional)
        on_metrics: Callback por fila
        checkpoint_path: Ruta FSD1 para guardar el estado al final (y cada
            checkpoint_every pasos si se indica)

    Returns:
        Filas de métricas en orden de paso

    Raises:
        NumericalAbort: Pérdida o χ no finitos, embedding degenerado
    """
    mode = config.resolved_mode
    if state is None:
        state = build_state(config, dataset, oracle, workers)
    run_logger = logging.getLogger(f"Trainer-d{config.width_label}")
    started = time.perf_counter()
    rows: List[MetricRow] = []

    def emit() -> None:
        train_loss, train_acc = prediction_metrics(eval_F(state, "train"), dataset.train_y, dataset.task)
        if not math.isfinite(train_loss):
            raise NumericalAbort(f"Pérdida de entrenamiento no finita en el paso {state.step}")
        if len(dataset.test_x):
            test_loss, test_acc = prediction_metrics(eval_F(state, "test"), dataset.test_y, dataset.task)
        else:
            test_loss, test_acc = math.nan, math.nan
        row = MetricRow(state.step, round((time.perf_counter() - started) * 1000.0, 3),
                        train_loss, test_loss, train_acc, test_acc,
                        config.width_label, mode, config.seed)
        rows.append(row)
        if on_metrics is not None:
            on_metrics(row)
        run_logger.info(f"paso {state.step}: train_loss={train_loss:.6g} test_loss={test_loss:.6g}")

    emit()
    batches = iterate_batches(len(dataset.train_x), config.batch_size, config.seed)
    for _ in range(state.step):
        next(batches)

    while state.step < config.steps:
        if config.time_budget_s is not None and time.perf_counter() - started > config.time_budget_s:
            run_logger.warning(f"Presupuesto de tiempo agotado en el paso {state.step}")
            break
        if mode == "bottleneck_gradient_flow_euler":
            gradient_flow_step(state, dataset.train_y)
        else:
            batch = next(batches)
            sgd_step(state, batch, dataset.train_y[batch])
        if state.step % config.eval_every == 0 or state.step == config.steps:
            emit()
        if checkpoint_path and checkpoint_every and state.step % checkpoint_every == 0:
            save_checkpoint(state, checkpoint_path)

    if rows[-1].step != state.step:
        emit()
    if checkpoint_path:
        save_checkpoint(state, checkpoint_path)
    return rows


def train_vs_test_curve(curves: Dict[Union[int, str], List[MetricRow]], points: int = 50,
                        window: int = 5) -> List[List]:
    """
    Pérdida de test en función de la de entrenamiento sobre el rango común.

    Las pérdidas de entrenamiento se remuestrean en una grilla del rango
    común a todos los anchos, la de test se interpola linealmente y ambas se
    suavizan con una media móvil de longitud `window`.

    Returns:
        Filas [bottleneck_width, train_loss, test_loss]
    """
    usable = {}
    for width, rows in curves.items():
        train = np.array([row.train_loss for row in rows])
        test = np.array([row.test_loss for row in rows])
        keep = np.isfinite(train) & np.isfinite(test)
        if keep.sum() >= 2:
            usable[width] = (train[keep], test[keep])
    if not usable:
        return []

    low = max(float(train.min()) for train, _ in usable.values())
    high = min(float(train.max()) for train, _ in usable.values())
    if not low < high:
        return []
    grid = np.linspace(low, high, points)
    kernel = np.ones(window) / window

    output = []
    for width, (train, test) in usable.items():
        order = np.argsort(train)
        test_on_grid = np.interp(grid, train[order], test[order])
        smooth_train = np.convolve(grid, kernel, mode="valid")
        smooth_test = np.convolve(test_on_grid, kernel, mode="valid")
        output.extend([width, float(a), float(b)] for a, b in zip(smooth_train, smooth_test))
    return output


# ============================================================================
# Checkpoints FSD1
# ============================================================================

def save_checkpoint(state: FunctionState, path: str) -> None:
    """Guarda el estado (sin oráculo ni kernels) en formato FSD1."""
    sizes = np.array(state.buffer.step_sizes, dtype=np.int64)
    arrays = {
        "meta": np.array([state.step, MODES.index(state.mode), ANCHORS.index(state.output_anchor),
                          len(state.train_x), len(state.test_x)], dtype=np.int64),
        "scalars": np.array([state.lr, state.loss_scale]),
        "F0_train": state.F0_train,
        "F0_test": state.F0_test,
        "hist_sizes": sizes,
    }
    if state.train_g is not None:
        arrays.update({
            "train_g": state.train_g,
            "test_g": state.test_g,
            "g0_train": state.g0_train,
            "g0_test": state.g0_test,
            "hist_indices": state.buffer.indices,
            "hist_g": state.buffer.g,
            "hist_chi": state.buffer.chi,
            "hist_p": state.buffer.p,
        })
    if state.train_F is not None:
        arrays["train_F"] = state.train_F
        arrays["test_F"] = state.test_F
    write_named_arrays(path, arrays)
    logger.info(f"Checkpoint guardado en {path} (paso {state.step})")


def load_checkpoint(path: str, config: TrainConfig, dataset,
                    oracle: Optional[InitialOracle] = None, workers: int = 1) -> FunctionState:
    """
    Reconstruye un estado a partir de un checkpoint FSD1.

    Los kernels y el oráculo se recrean desde `config` (o se reciben); los
    arreglos guardados reemplazan a los recalculados.

    Raises:
        ValueError: Si el checkpoint no corresponde al modo o a los datos
    """
    arrays = read_named_arrays(path)
    step, mode_code, anchor_code, n_train, n_test = (int(v) for v in arrays["meta"])
    if MODES[mode_code] != config.resolved_mode:
        raise ValueError(f"{path}: checkpoint del modo {MODES[mode_code]}, se pidió {config.resolved_mode}")
    if (n_train, n_test) != (len(dataset.train_x), len(dataset.test_x)):
        raise ValueError(f"{path}: checkpoint con N={n_train}/{n_test}, datos con "
                         f"{len(dataset.train_x)}/{len(dataset.test_x)}")

    state = build_state(config, dataset, oracle, workers)
    if state.g0_train is not None and not np.array_equal(state.F0_train, arrays["F0_train"]):
        logger.warning("F₀ del checkpoint difiere del oráculo actual; se usa el guardado")

    state.step = step
    state.output_anchor = ANCHORS[anchor_code]
    state.lr, state.loss_scale = (float(v) for v in arrays["scalars"])
    state.F0_train = arrays["F0_train"]
    state.F0_test = arrays["F0_test"]
    if "train_F" in arrays:
        state.train_F = arrays["train_F"]
        state.test_F = arrays["test_F"]

    if "train_g" in arrays:
        state.train_g = arrays["train_g"]
        state.test_g = arrays["test_g"]
        state.g0_train = arrays["g0_train"]
        state.g0_test = arrays["g0_test"]
        state.buffer = HistoryBuffer(state.train_g.shape[1], state.F0_train.shape[1])
        offset = 0
        for size in arrays["hist_sizes"]:
            stop = offset + int(size)
            state.record(HistoryEntry(
                arrays["hist_indices"][offset:stop],
                arrays["hist_g"][offset:stop],
                arrays["hist_chi"][offset:stop],
                arrays["hist_p"][offset:stop],
            ))
            offset = stop
    logger.info(f"Checkpoint cargado desde {path} (paso {step})")
    return state
