"""
finite_net.py
=============
Red de referencia de ancho finito F_n = f_n ∘ g_n.

Este módulo se encarga de:
- Activaciones relu, linear y softplus(m) con sus derivadas
- Forward y backward manuales de MLPs con escalado φ(Wx/√fan_in)
- Jacobianos exactos entrada-salida de f
- NTK empírico de cualquier MLP (Θ_n de g, K_n de f)
- Actualizaciones SGD/GD en espacio de parámetros
- Barrido del ancho del cuello de botella con redes de cuatro capas

Todo el cómputo es float64. La derivada de ReLU en 0 vale 0.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from src.containers import SnapshotHeader, read_weight_snapshot, write_weight_snapshot
from src.errors import NumericalAbort
from src.run_manifest import MetricRow, prediction_metrics


logger = logging.getLogger("FiniteNet")


# ============================================================================
# Activaciones
# ============================================================================

@dataclass(frozen=True)
class Activation:
    """
    Activación elemento a elemento.

    Attributes:
        name: 'relu', 'linear' o 'softplus'
        softplus_m: m en φ(a) = log(1 + e^{ma})/m
    """
    name: str = "relu"
    softplus_m: float = 1.0

    def __post_init__(self):
        if self.name not in ("relu", "linear", "softplus"):
            raise ValueError(f"Activación desconocida: {self.name}")
        if self.softplus_m <= 0:
            raise ValueError(f"softplus_m debe ser positivo, se recibió {self.softplus_m}")

    def __call__(self, a: np.ndarray) -> np.ndarray:
        if self.name == "relu":
            return np.maximum(a, 0.0)
        if self.name == "linear":
            return a
        return np.logaddexp(0.0, self.softplus_m * a) / self.softplus_m

    def derivative(self, a: np.ndarray) -> np.ndarray:
        if self.name == "relu":
            return (a > 0.0).astype(a.dtype)
        if self.name == "linear":
            return np.ones_like(a)
        return expit(self.softplus_m * a)

    def describe(self) -> str:
        if self.name == "softplus":
            return f"softplus({self.softplus_m:g})"
        return self.name


def parse_activation(text: str) -> Activation:
    """
    Interpreta 'relu', 'linear', 'softplus' o 'softplus(m)'.

    Example:
        >>> parse_activation("softplus(50)").softplus_m
        50.0
    """
    text = text.strip().lower()
    if text.startswith("softplus"):
        rest = text[len("softplus"):].strip()
        if not rest:
            return Activation("softplus", 1.0)
        if rest.startswith("(") and rest.endswith(")"):
            try:
                return Activation("softplus", float(rest[1:-1]))
            except ValueError:
                pass
        raise ValueError(f"Activación mal formada: '{text}' (use softplus(m))")
    return Activation(text)


# ============================================================================
# MLP genérico
# ============================================================================

@dataclass
class LayerCache:
    """Entrada de la capa y su preactivación (filas = muestras)."""
    inputs: np.ndarray
    pre: np.ndarray


def mlp_forward(layers: Sequence[np.ndarray], x: np.ndarray,
                activation: Activation) -> Tuple[np.ndarray, List[LayerCache]]:
    """
    Forward de un MLP con capa de salida lineal.

    Cada capa calcula pre = h Wᵀ/√fan_in; las capas ocultas aplican φ.

    Args:
        layers: Matrices W_l de forma (salida, entrada)
        x: Matriz B × entrada
        activation: φ de las capas ocultas

    Returns:
        (salida B × out, caches por capa)
    """
    h = x
    caches = []
    last = len(layers) - 1
    for index, weight in enumerate(layers):
        if h.shape[1] != weight.shape[1]:
            raise ValueError(
                f"Capa {index}: entrada de dimensión {h.shape[1]}, se esperaba {weight.shape[1]}"
            )
        pre = (h @ weight.T) / math.sqrt(weight.shape[1])
        caches.append(LayerCache(h, pre))
        h = pre if index == last else activation(pre)
    return h, caches


def mlp_backward(layers: Sequence[np.ndarray], caches: Sequence[LayerCache],
                 grad_out: np.ndarray, activation: Activation) -> Tuple[List[np.ndarray], np.ndarray]:
    """
    Backprop manual a partir de ∂L/∂salida.

    Returns:
        (gradientes por capa, ∂L/∂entrada)
    """
    grads: List[Optional[np.ndarray]] = [None] * len(layers)
    delta = grad_out
    for index in range(len(layers) - 1, -1, -1):
        weight = layers[index]
        scale = math.sqrt(weight.shape[1])
        grads[index] = delta.T @ caches[index].inputs / scale
        grad_inputs = delta @ weight / scale
        if index > 0:
            delta = grad_inputs * activation.derivative(caches[index - 1].pre)
        else:
            delta = grad_inputs
    return grads, delta


def mlp_output_sensitivities(layers: Sequence[np.ndarray], caches: Sequence[LayerCache],
                             activation: Activation) -> List[np.ndarray]:
    """
    B_l = ∂salida/∂pre_l para cada capa (forma B × out_L × out_l).

    El último elemento de la lista corresponde a ∂salida/∂entrada.
    """
    batch = caches[0].inputs.shape[0]
    out_dim = layers[-1].shape[0]
    sensitivity = np.broadcast_to(np.eye(out_dim), (batch, out_dim, out_dim)).copy()
    sensitivities = [None] * len(layers)
    for index in range(len(layers) - 1, -1, -1):
        sensitivities[index] = sensitivity
        weight = layers[index]
        sensitivity = sensitivity @ weight / math.sqrt(weight.shape[1])
        if index > 0:
            sensitivity = sensitivity * activation.derivative(caches[index - 1].pre)[:, None, :]
    return sensitivities + [sensitivity]


def mlp_jacobian_rows(layers: Sequence[np.ndarray], x: np.ndarray,
                      activation: Activation) -> np.ndarray:
    """Jacobianos ∂salida/∂x para cada fila de x (B × out × in)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _, caches = mlp_forward(layers, x, activation)
    return mlp_output_sensitivities(layers, caches, activation)[-1]


def empirical_ntk(layers: Sequence[np.ndarray], a: np.ndarray, b: np.ndarray,
                  activation: Activation) -> np.ndarray:
    """
    NTK empírico de un MLP entre dos entradas.

    Θ_n(a, b) = Σ_l (h_{l−1}(a)·h_{l−1}(b)/fan_in) · B_l(a) B_l(b)ᵀ

    Returns:
        Matriz out × out
    """
    a = np.asarray(a, dtype=np.float64).reshape(1, -1)
    b = np.asarray(b, dtype=np.float64).reshape(1, -1)
    _, caches_a = mlp_forward(layers, a, activation)
    _, caches_b = mlp_forward(layers, b, activation)
    sens_a = mlp_output_sensitivities(layers, caches_a, activation)
    sens_b = mlp_output_sensitivities(layers, caches_b, activation)

    out_dim = layers[-1].shape[0]
    kernel = np.zeros((out_dim, out_dim))
    for index, weight in enumerate(layers):
        overlap = float(caches_a[index].inputs[0] @ caches_b[index].inputs[0]) / weight.shape[1]
        kernel += overlap * (sens_a[index][0] @ sens_b[index][0].T)
    return kernel


# ============================================================================
# Red con cuello de botella
# ============================================================================

@dataclass(frozen=True)
class MlpSpec:
    """
    Arquitectura de F_n = f_n ∘ g_n.

    Attributes:
        g_dims: (d₀, n, …, d)
        f_dims: (d, n, …, d_r)
        activation: 'relu', 'linear', 'softplus' o 'softplus(m)'
        seed: Semilla de inicialización
        init_scale: Multiplicador de la normal estándar
    """
    g_dims: Tuple[int, ...]
    f_dims: Tuple[int, ...]
    activation: str = "relu"
    seed: int = 0
    init_scale: float = 1.0

    def __post_init__(self):
        if len(self.g_dims) < 2 or len(self.f_dims) < 2:
            raise ValueError("g_dims y f_dims necesitan al menos entrada y salida")
        if any(dim < 1 for dim in tuple(self.g_dims) + tuple(self.f_dims)):
            raise ValueError("Todas las dimensiones deben ser positivas")
        if self.g_dims[-1] != self.f_dims[0]:
            raise ValueError(
                f"La salida de g ({self.g_dims[-1]}) no coincide con la entrada de f ({self.f_dims[0]})"
            )
        parse_activation(self.activation)

    @classmethod
    def four_layer(cls, input_dim: int, width: int, bottleneck_dim: int, output_dim: int,
                   activation: str = "relu", seed: int = 0) -> 'MlpSpec':
        """g y f con una capa oculta de ancho n cada una."""
        return cls((input_dim, width, bottleneck_dim),
                   (bottleneck_dim, width, output_dim), activation, seed)

    @property
    def input_dim(self) -> int:
        return self.g_dims[0]

    @property
    def bottleneck_dim(self) -> int:
        return self.g_dims[-1]

    @property
    def output_dim(self) -> int:
        return self.f_dims[-1]


@dataclass
class ForwardCache:
    g_caches: List[LayerCache]
    f_caches: List[LayerCache]


@dataclass
class TrainCheckpoint:
    """
    Valores registrados antes de la actualización del paso `step`.

    Attributes:
        step: Paso
        f_values: f sobre las entradas de entrenamiento (N × d_r)
        g_values: Embeddings g (N × d)
        J_probe: Jacobiano de f en el embedding de sonda fijo (d_r × d)
        chi: ∂L/∂F sobre entrenamiento (N × d_r)
        J_train: Jacobianos de f en cada embedding de entrenamiento (N × d_r × d)
        probe: Embedding de sonda donde se evalúa J_probe
    """
    step: int
    f_values: np.ndarray
    g_values: np.ndarray
    J_probe: np.ndarray
    chi: np.ndarray
    J_train: np.ndarray = field(repr=False, default=None)
    probe: np.ndarray = field(repr=False, default=None)


class BottleneckMlp:
    """
    Red finita F_n = f_n ∘ g_n con pesos N(0, 1) y escalado 1/√fan_in.

    La red tiene un único escritor durante las actualizaciones; forward y
    jacobian son de sólo lectura.
    """

    def __init__(self, spec: MlpSpec, g_layers: Optional[List[np.ndarray]] = None,
                 f_layers: Optional[List[np.ndarray]] = None):
        """
        Args:
            spec: Arquitectura y semilla
            g_layers, f_layers: Pesos explícitos (si se omiten se muestrean)
        """
        self.spec = spec
        self.activation = parse_activation(spec.activation)

        rng = np.random.default_rng(spec.seed)
        if g_layers is None:
            g_layers = _draw_layers(rng, spec.g_dims, spec.init_scale)
        if f_layers is None:
            f_layers = _draw_layers(rng, spec.f_dims, spec.init_scale)
        self.g_layers = [np.array(w, dtype=np.float64) for w in g_layers]
        self.f_layers = [np.array(w, dtype=np.float64) for w in f_layers]
        _check_chain(self.g_layers, spec.g_dims, "g")
        _check_chain(self.f_layers, spec.f_dims, "f")

        self.logger = logging.getLogger(f"BottleneckMlp-d{spec.bottleneck_dim}")

    @property
    def layers(self) -> List[np.ndarray]:
        return self.g_layers + self.f_layers

    def copy(self) -> 'BottleneckMlp':
        return BottleneckMlp(self.spec, [w.copy() for w in self.g_layers],
                             [w.copy() for w in self.f_layers])

    # ========================================================================
    # Persistencia (WNS1)
    # ========================================================================

    def save_weights(self, path: str) -> None:
        """
        Vuelca los pesos en el contenedor WNS1 (float32).

        Requiere que todas las capas ocultas de g y f tengan el mismo ancho.
        """
        hidden = set(self.spec.g_dims[1:-1]) | set(self.spec.f_dims[1:-1])
        if len(hidden) != 1:
            raise ValueError("WNS1 requiere un único ancho oculto en g y f")
        header = SnapshotHeader(
            input_dim=self.spec.input_dim,
            bottleneck_dim=self.spec.bottleneck_dim,
            output_dim=self.spec.output_dim,
            width=hidden.pop(),
            depth_g=len(self.g_layers) - 1,
            depth_f=len(self.f_layers) - 1,
            activation=self.activation.name,
            seed=self.spec.seed,
            softplus_m=self.activation.softplus_m,
        )
        write_weight_snapshot(path, header, self.layers)
        self.logger.info(f"Pesos guardados en {path}")

    @classmethod
    def load_weights(cls, path: str) -> 'BottleneckMlp':
        header, blocks = read_weight_snapshot(path)
        activation = header.activation
        if activation == "softplus":
            activation = f"softplus({header.softplus_m!r})"
        spec = MlpSpec(
            g_dims=(header.input_dim,) + (header.width,) * header.depth_g + (header.bottleneck_dim,),
            f_dims=(header.bottleneck_dim,) + (header.width,) * header.depth_f + (header.output_dim,),
            activation=activation,
            seed=header.seed,
        )
        split = header.depth_g + 1
        return cls(spec, blocks[:split], blocks[split:])


def _draw_layers(rng: np.random.Generator, dims: Sequence[int], scale: float) -> List[np.ndarray]:
    return [scale * rng.standard_normal((dims[i + 1], dims[i])) for i in range(len(dims) - 1)]


def _check_chain(layers: List[np.ndarray], dims: Sequence[int], name: str) -> None:
    if len(layers) != len(dims) - 1:
        raise ValueError(f"{name}: se esperaban {len(dims) - 1} capas, se recibieron {len(layers)}")
    for index, weight in enumerate(layers):
        if weight.shape != (dims[index + 1], dims[index]):
            raise ValueError(
                f"{name}: capa {index} de forma {weight.shape}, se esperaba {(dims[index + 1], dims[index])}"
            )


# ============================================================================
# Operaciones
# ============================================================================

def forward(net: BottleneckMlp, xi: np.ndarray) -> Tuple[np.ndarray, np.ndarray, ForwardCache]:
    """
    Forward de la red compuesta.

    Args:
        net: Red
        xi: Vector d₀ o matriz B × d₀

    Returns:
        (g, F, caches); g y F conservan la forma de la entrada (vector o matriz)

    Example:
        >>> g, F, _ = forward(net, np.ones(net.spec.input_dim))
    """
    xi = np.asarray(xi, dtype=np.float64)
    single = xi.ndim == 1
    batch = xi[None, :] if single else xi
    if batch.shape[1] != net.spec.input_dim:
        raise ValueError(f"Dimensión de entrada {batch.shape[1]}, se esperaba {net.spec.input_dim}")

    g, g_caches = mlp_forward(net.g_layers, batch, net.activation)
    F, f_caches = mlp_forward(net.f_layers, g, net.activation)
    cache = ForwardCache(g_caches, f_caches)
    if single:
        return g[0], F[0], cache
    return g, F, cache


def evaluate_f(net: BottleneckMlp, x: np.ndarray) -> np.ndarray:
    """f aplicada a embeddings (vector d o matriz B × d)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    out, _ = mlp_forward(net.f_layers, np.atleast_2d(x), net.activation)
    return out[0] if single else out


def jacobian(net: BottleneckMlp, x: np.ndarray) -> np.ndarray:
    """
    Jacobiano exacto ∂f/∂x.

    Args:
        x: Vector d (resultado d_r × d) o matriz B × d (resultado B × d_r × d)
    """
    x = np.asarray(x, dtype=np.float64)
    rows = mlp_jacobian_rows(net.f_layers, x, net.activation)
    return rows[0] if x.ndim == 1 else rows


def empirical_ntk_f(net: BottleneckMlp, x: np.ndarray, xt: np.ndarray) -> np.ndarray:
    """
    NTK empírico K_n(x, x̃) de f (matriz d_r × d_r).

    Para f de una capa oculta coincide con
    (xᵀx̃/d)·(1/n)(∂f/∂y)(∂f̃/∂ỹ)ᵀ + zᵀz̃/n·I.
    """
    return empirical_ntk(net.f_layers, x, xt, net.activation)


def empirical_ntk_g(net: BottleneckMlp, xi: np.ndarray, xit: np.ndarray) -> np.ndarray:
    """NTK empírico Θ_n(ξ, ξ̃) de g (matriz d × d)."""
    return empirical_ntk(net.g_layers, xi, xit, net.activation)


def loss_and_gradients(net: BottleneckMlp, inputs: np.ndarray, targets: np.ndarray,
                       loss_scale: float = 1.0) -> Tuple[float, List[np.ndarray], List[np.ndarray], np.ndarray]:
    """
    Pérdida L = loss_scale·Σ_i ½‖F_i − y_i‖² y sus gradientes por backprop.

    Returns:
        (loss, gradientes de g, gradientes de f, χ = ∂L/∂F)
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    g, F, cache = forward(net, inputs)
    if F.shape != targets.shape:
        raise ValueError(f"Forma de objetivos {targets.shape}, se esperaba {F.shape}")

    residual = F - targets
    loss = loss_scale * 0.5 * float(np.sum(residual * residual))
    chi = loss_scale * residual

    f_grads, grad_g = mlp_backward(net.f_layers, cache.f_caches, chi, net.activation)
    g_grads, _ = mlp_backward(net.g_layers, cache.g_caches, grad_g, net.activation)
    return loss, g_grads, f_grads, chi


def sgd_update(net: BottleneckMlp, inputs: np.ndarray, targets: np.ndarray, lr: float,
               batch: Optional[Sequence[int]] = None, full_batch: bool = False,
               loss_scale: float = 1.0) -> BottleneckMlp:
    """
    Un paso de SGD (o GD con full_batch) sobre todos los pesos de f y g.

    Args:
        net: Red (se modifica y se retorna)
        inputs, targets: Conjunto de datos completo
        lr: Tasa de aprendizaje (≥ 0)
        batch: Índices del minibatch; ignorado con full_batch
        full_batch: Suma el gradiente sobre todo el conjunto

    Raises:
        NumericalAbort: Si algún gradiente no es finito
    """
    if lr < 0:
        raise ValueError(f"lr debe ser no negativo, se recibió {lr}")
    inputs = np.atleast_2d(inputs)
    targets = np.atleast_2d(targets)
    if not full_batch and batch is not None:
        inputs = inputs[np.asarray(batch)]
        targets = targets[np.asarray(batch)]

    _, g_grads, f_grads, _ = loss_and_gradients(net, inputs, targets, loss_scale)
    for grad in g_grads + f_grads:
        if not np.all(np.isfinite(grad)):
            raise NumericalAbort("Gradiente no finito en la red finita")

    for weight, grad in zip(net.g_layers, g_grads):
        weight -= lr * grad
    for weight, grad in zip(net.f_layers, f_grads):
        weight -= lr * grad
    return net


# ============================================================================
# Entrenamiento y barrido
# ============================================================================

def iterate_batches(num_samples: int, batch_size: int, seed: int):
    """
    Minibatches por épocas: cada época es una permutación sembrada y se
    recorre en bloques consecutivos; el resto incompleto se descarta.
    """
    if num_samples < 1:
        raise ValueError("Conjunto de entrenamiento vacío")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    batch_size = min(batch_size, num_samples)
    while True:
        order = rng.permutation(num_samples)
        for start in range(0, num_samples - batch_size + 1, batch_size):
            yield order[start:start + batch_size]


def train_finite(net: BottleneckMlp, dataset, lr: float, batch_size: int, steps: int,
                 eval_every: int, seed: int, loss_scale: float = 1.0,
                 on_metrics: Optional[Callable[[MetricRow], None]] = None) -> List[MetricRow]:
    """
    Entrena la red finita con SGD y emite filas de métricas.

    Args:
        net: Red a entrenar (se modifica)
        dataset: Dataset con train_x, train_y, test_x, test_y y task
        on_metrics: Callback opcional por fila (escritura incremental de CSV)

    Raises:
        NumericalAbort: Pérdida o gradiente no finito
    """
    started = time.perf_counter()
    rows: List[MetricRow] = []
    width = net.spec.bottleneck_dim

    def emit(step: int) -> None:
        _, F_train, _ = forward(net, dataset.train_x)
        train_loss, train_acc = prediction_metrics(F_train, dataset.train_y, dataset.task)
        if not math.isfinite(train_loss):
            raise NumericalAbort(f"Pérdida no finita en el paso {step} (d={width})")
        if len(dataset.test_x):
            _, F_test, _ = forward(net, dataset.test_x)
            test_loss, test_acc = prediction_metrics(F_test, dataset.test_y, dataset.task)
        else:
            test_loss, test_acc = math.nan, math.nan
        row = MetricRow(step, round((time.perf_counter() - started) * 1000.0, 3),
                        train_loss, test_loss, train_acc, test_acc, width, "finite_sgd", seed)
        rows.append(row)
        if on_metrics is not None:
            on_metrics(row)
        net.logger.info(f"paso {step}: train_loss={train_loss:.6g} test_loss={test_loss:.6g}")

    emit(0)
    batches = iterate_batches(len(dataset.train_x), batch_size, seed)
    for step in range(1, steps + 1):
        sgd_update(net, dataset.train_x, dataset.train_y, lr, batch=next(batches),
                   loss_scale=loss_scale)
        if step % eval_every == 0 or step == steps:
            emit(step)
    return rows


def sweep_bottleneck(widths: Sequence[int], n: int, dataset, lr: float, batch: int, steps: int,
                     seed: int = 0, eval_every: int = 100, activation: str = "relu",
                     loss_scale: float = 1.0, workers: int = 1,
                     on_metrics: Optional[Callable[[MetricRow], None]] = None
                     ) -> Tuple[Dict[int, List[MetricRow]], List[List]]:
    """
    Barrido del ancho del cuello de botella con redes de cuatro capas.

    Cada ancho usa una semilla derivada de (seed, d) y corre en su propio hilo.

    Returns:
        (métricas por ancho, filas resumen
         [d, final_train_loss, final_test_loss, final_train_error, final_test_error])
    """
    if not widths:
        raise ValueError("La lista de anchos está vacía")
    input_dim = dataset.train_x.shape[1]
    output_dim = dataset.train_y.shape[1]

    def run(width: int) -> List[MetricRow]:
        width_seed = int(np.random.SeedSequence([seed, width]).generate_state(1)[0])
        spec = MlpSpec.four_layer(input_dim, n, width, output_dim, activation, width_seed)
        logger.info(f"Barrido: d={width}, n={n}, semilla derivada {width_seed}")
        rows = train_finite(BottleneckMlp(spec), dataset, lr, batch, steps, eval_every,
                            seed, loss_scale, on_metrics)
        return rows

    with ThreadPoolExecutor(max_workers=max(1, min(workers, len(widths)))) as pool:
        results = dict(zip(widths, pool.map(run, widths)))

    summary = []
    for width in widths:
        last = results[width][-1]
        summary.append([width, last.train_loss, last.test_loss,
                        1.0 - last.train_acc, 1.0 - last.test_acc])
    return results, summary
