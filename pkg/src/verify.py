"""
verify.py
=========
Verificación numérica del límite de ancho infinito.

Este módulo se encarga de:
- Desviaciones Monte Carlo de las covarianzas f-f, J-f y J-J frente a
  Σ, Σ₍₁₎ y Σ₍₂₎, con errores estándar jackknife por bloques
- Trayectorias de GD de lote completo de redes finitas (y del propio
  integrador en espacio de funciones) registradas antes de cada paso
- Errores residuales de las ecuaciones de evolución de g, J y f
- Residuales de redes lineales profundas y efectivas
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.config_manager import get_config
from src.dynamics import FunctionState, eval_J, gradient_flow_step
from src.finite_net import (
    BottleneckMlp,
    MlpSpec,
    TrainCheckpoint,
    forward,
    jacobian,
    sgd_update,
)
from src.kernel_core import (
    BottleneckKernels,
    linear_ntk_matrix,
    relu_sigma_matrix,
    sigma_grad_kernels,
)


logger = logging.getLogger("Verify")

KINDS = ("ff", "Jf", "JJ")
QUANTITIES = ("f", "g", "J")
MIN_REPLICAS = 100

EmpiricalHook = Callable[[str, int, np.ndarray], np.ndarray]


# ============================================================================
# Tipos
# ============================================================================

@dataclass(frozen=True)
class DeviationReport:
    """
    Desviación relativa de Frobenius de una covarianza empírica.

    Attributes:
        kind: 'ff', 'Jf' o 'JJ'
        pair_id: Índice del par de entradas
        n: Ancho de la red muestreada
        replicas: R
        deviation: ‖C_emp − C_teo‖_F/‖C_teo‖_F
        stderr: Error estándar jackknife (0 sin Monte Carlo)
    """
    kind: str
    pair_id: int
    n: int
    replicas: int
    deviation: float
    stderr: float = 0.0

    def passes(self, threshold: float) -> bool:
        """El umbral se evalúa contra deviation − 2·SE."""
        return self.deviation - 2.0 * self.stderr <= threshold

    def as_row(self) -> List:
        return [self.kind, self.pair_id, self.n, self.replicas, self.deviation, self.stderr]


@dataclass
class ResidualSeries:
    """
    Error residual por paso de una cantidad (f, g o J).

    Los pasos con RHS nulo quedan como NaN y se excluyen de la mediana.
    """
    quantity: str
    residuals: np.ndarray
    n: Optional[int]
    lr: float
    bottleneck_dim: int

    def median(self, first: Optional[int] = None) -> float:
        values = self.residuals if first is None else self.residuals[:first]
        if values.size == 0 or np.all(np.isnan(values)):
            return math.nan
        return float(np.nanmedian(values))

    def rows(self) -> List[List]:
        return [[self.quantity, step, float(value), self.n if self.n is not None else "",
                 self.bottleneck_dim, self.lr]
                for step, value in enumerate(self.residuals)]


# ============================================================================
# Covarianzas
# ============================================================================

def random_input_pairs(count: int, dim: int = 2, seed: int = 0) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Pares (x, x̃) con componentes normales estándar."""
    if count < 1 or dim < 1:
        raise ValueError("count y dim deben ser ≥ 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9A1B]))
    points = rng.standard_normal((count, 2, dim))
    return [(points[i, 0], points[i, 1]) for i in range(count)]


def _sigma_block(points: np.ndarray, dim: int, activation: str) -> np.ndarray:
    if activation == "linear":
        return linear_ntk_matrix(points, points, dim)
    return relu_sigma_matrix(points, points, dim)


def theory_covariance(kind: str, x: np.ndarray, xt: np.ndarray,
                      activation: str = "relu") -> np.ndarray:
    """
    Covarianza límite del par.

    ff: 2×2 de Σ sobre (f(x), f(x̃)).
    Jf: conjunta de (f(x), J(x̃)), (1+d)×(1+d), con Σ₍₁₎(x, x̃) fuera de la diagonal.
    JJ: conjunta de (J(x), J(x̃)), 2d×2d, con bloques Σ₍₂₎.

    Raises:
        ValueError: Tipo desconocido o dimensiones distintas
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    xt = np.asarray(xt, dtype=np.float64).ravel()
    if x.size != xt.size:
        raise ValueError(f"Dimensiones distintas: {x.size} vs {xt.size}")
    d = x.size

    if kind == "ff":
        return _sigma_block(np.stack([x, xt]), d, activation)
    if kind == "Jf":
        sigma_xx = _sigma_block(x[None, :], d, activation)[0, 0]
        sigma1, _ = sigma_grad_kernels(x, xt, d, activation)
        _, sigma2_tt = sigma_grad_kernels(xt, xt, d, activation)
        cov = np.empty((1 + d, 1 + d))
        cov[0, 0] = sigma_xx
        cov[0, 1:] = sigma1
        cov[1:, 0] = sigma1
        cov[1:, 1:] = sigma2_tt
        return cov
    if kind == "JJ":
        blocks = [[sigma_grad_kernels(a, b, d, activation)[1] for b in (x, xt)] for a in (x, xt)]
        return np.block(blocks)
    raise ValueError(f"Tipo de covarianza desconocido: {kind}. Opciones: {', '.join(KINDS)}")


def covariance_deviation(empirical: np.ndarray, theory: np.ndarray) -> float:
    """
    ‖C_emp − C_teo‖_F/‖C_teo‖_F.

    Raises:
        ValueError: Si ‖C_teo‖_F = 0 o las formas difieren
    """
    empirical = np.asarray(empirical, dtype=np.float64)
    theory = np.asarray(theory, dtype=np.float64)
    if empirical.shape != theory.shape:
        raise ValueError(f"Formas distintas: {empirical.shape} vs {theory.shape}")
    scale = float(np.linalg.norm(theory))
    if scale == 0.0:
        raise ValueError("Covarianza teórica nula: la desviación relativa no está definida")
    return float(np.linalg.norm(empirical - theory)) / scale


def _feature_indices(kind: str, d: int) -> np.ndarray:
    # Vector de características: [f(x), f(x̃), J(x), J(x̃)]
    if kind == "ff":
        return np.array([0, 1])
    if kind == "Jf":
        return np.concatenate([[0], np.arange(2 + d, 2 + 2 * d)])
    return np.arange(2, 2 + 2 * d)


def _replica_features(x: np.ndarray, xt: np.ndarray, n: int, seed_words: List[int],
                      activation: str) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(seed_words))
    d = x.size
    u = rng.standard_normal((n, d))
    v = rng.standard_normal(n)
    pre = u @ np.stack([x, xt]).T / math.sqrt(d)
    if activation == "linear":
        hidden, slope = pre, np.ones_like(pre)
    else:
        hidden, slope = np.maximum(pre, 0.0), (pre > 0.0).astype(np.float64)
    f_values = v @ hidden / math.sqrt(n)
    jac = (u.T @ (v[:, None] * slope)).T / math.sqrt(n * d)
    return np.concatenate([f_values, jac[0], jac[1]])


def _block_moments(pair: Tuple[np.ndarray, np.ndarray], pair_id: int, n: int,
                   replicas: Sequence[int], seed: int, activation: str) -> Tuple[np.ndarray, int]:
    x, xt = pair
    size = 2 + 2 * x.size
    moment = np.zeros((size, size))
    for replica in replicas:
        z = _replica_features(x, xt, n, [seed, pair_id, int(replica)], activation)
        moment += np.outer(z, z)
    return moment, len(replicas)


def mc_covariance_deviation(kind: str, pairs: Sequence[Tuple[np.ndarray, np.ndarray]], n: int,
                            replicas: int, seed: int = 0, activation: str = "relu",
                            workers: int = 1, empirical_hook: Optional[EmpiricalHook] = None,
                            blocks: Optional[int] = None
                            ) -> List[DeviationReport]:
    """
    Desviación de las covarianzas empíricas sobre R inicializaciones.

    Cada réplica r del par p usa el flujo SeedSequence([seed, p, r]) y una
    red de una capa oculta f(x) = vᵀφ(ux/√d)/√n. Los segundos momentos (sin
    centrar, media cero en el límite) se acumulan en bloques para el
    error estándar jackknife (verificacion.bloques_jackknife si no se indica).

    Args:
        kind: 'ff', 'Jf' o 'JJ'
        pairs: Pares de entradas
        n: Ancho
        replicas: R ≥ 100
        seed: Semilla maestra
        empirical_hook: Sustituye la estimación Monte Carlo por
            hook(kind, pair_id, C_teo)
        blocks: Bloques jackknife, 2 ≤ blocks ≤ R

    Raises:
        ValueError: R < 100, bloques fuera de rango, tipo desconocido o
            covarianza teórica nula
    """
    if kind not in KINDS:
        raise ValueError(f"Tipo de covarianza desconocido: {kind}. Opciones: {', '.join(KINDS)}")
    if replicas < MIN_REPLICAS:
        raise ValueError(f"Se requieren al menos {MIN_REPLICAS} réplicas, se recibieron {replicas}")
    if n < 1:
        raise ValueError(f"n debe ser ≥ 1, se recibió {n}")
    if blocks is None:
        blocks = get_config().get_jackknife_blocks()
    if not 2 <= blocks <= replicas:
        raise ValueError(f"Bloques jackknife fuera de rango: {blocks} (R={replicas})")

    reports = []
    for pair_id, (x, xt) in enumerate(pairs):
        x = np.asarray(x, dtype=np.float64).ravel()
        xt = np.asarray(xt, dtype=np.float64).ravel()
        theory = theory_covariance(kind, x, xt, activation)

        if empirical_hook is not None:
            deviation = covariance_deviation(empirical_hook(kind, pair_id, theory), theory)
            reports.append(DeviationReport(kind, pair_id, n, replicas, deviation, 0.0))
            continue

        chunks = np.array_split(np.arange(replicas), blocks)
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                partials = list(pool.map(
                    lambda chunk: _block_moments((x, xt), pair_id, n, chunk, seed, activation), chunks))
        else:
            partials = [_block_moments((x, xt), pair_id, n, chunk, seed, activation) for chunk in chunks]

        index = _feature_indices(kind, x.size)
        moments = [moment[np.ix_(index, index)] for moment, _ in partials]
        counts = [count for _, count in partials]
        total = sum(moments)
        deviation = covariance_deviation(total / replicas, theory)

        leave_one_out = np.array([
            covariance_deviation((total - moment) / (replicas - count), theory)
            for moment, count in zip(moments, counts)
        ])
        spread = leave_one_out - leave_one_out.mean()
        stderr = math.sqrt((blocks - 1) / blocks * float(spread @ spread))

        reports.append(DeviationReport(kind, pair_id, n, replicas, deviation, stderr))
        logger.info(f"{kind} par {pair_id}: desviación {deviation:.4f} ± {stderr:.4f} (n={n}, R={replicas})")
    return reports


# ============================================================================
# Trayectorias
# ============================================================================

def _finite_checkpoint(net: BottleneckMlp, step: int, inputs: np.ndarray, targets: np.ndarray,
                       probe: np.ndarray, loss_scale: float) -> TrainCheckpoint:
    g_values, F, _ = forward(net, inputs)
    return TrainCheckpoint(
        step=step,
        f_values=F,
        g_values=g_values,
        J_probe=jacobian(net, probe),
        chi=loss_scale * (F - targets),
        J_train=jacobian(net, g_values),
        probe=probe,
    )


def record_finite_trajectory(net: BottleneckMlp, inputs: np.ndarray, targets: np.ndarray,
                             lr: float, steps: int, probe: Optional[np.ndarray] = None,
                             loss_scale: float = 1.0) -> List[TrainCheckpoint]:
    """
    GD de lote completo registrando f, g, χ y J antes de cada actualización.

    Args:
        net: Red finita (no se modifica; se entrena una copia)
        probe: Embedding de sonda fijo para J; por defecto g₀ de la primera muestra

    Returns:
        steps + 1 checkpoints (t = 0..steps)
    """
    if steps < 0:
        raise ValueError(f"steps debe ser ≥ 0, se recibió {steps}")
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    net = net.copy()
    if probe is None:
        probe, _, _ = forward(net, inputs[0])
    probe = np.asarray(probe, dtype=np.float64).copy()

    checkpoints = [_finite_checkpoint(net, 0, inputs, targets, probe, loss_scale)]
    for step in range(1, steps + 1):
        sgd_update(net, inputs, targets, lr, full_batch=True, loss_scale=loss_scale)
        checkpoints.append(_finite_checkpoint(net, step, inputs, targets, probe, loss_scale))
    return checkpoints


def function_space_trajectory(state: FunctionState, targets: np.ndarray, steps: int,
                              probe: Optional[np.ndarray] = None) -> List[TrainCheckpoint]:
    """
    Checkpoints del integrador de Euler en espacio de funciones.

    El estado debe estar en modo bottleneck_gradient_flow_euler y avanza
    `steps` pasos.
    """
    if state.mode != "bottleneck_gradient_flow_euler":
        raise ValueError(f"Se requiere el modo de flujo de gradiente, el estado está en {state.mode}")
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if probe is None:
        probe = state.g0_train[0]
    probe = np.asarray(probe, dtype=np.float64).copy()

    def snapshot() -> TrainCheckpoint:
        G = state.train_g.copy()
        return TrainCheckpoint(
            step=state.step,
            f_values=state.train_F.copy(),
            g_values=G,
            J_probe=eval_J(state, probe),
            chi=state.loss_scale * (state.train_F - targets),
            J_train=np.stack([eval_J(state, g) for g in G]),
            probe=probe,
        )

    checkpoints = [snapshot()]
    for _ in range(steps):
        gradient_flow_step(state, targets)
        checkpoints.append(snapshot())
    return checkpoints


# ============================================================================
# Residuales
# ============================================================================

def _relative_residual(delta: np.ndarray, rhs: np.ndarray) -> float:
    scale = float(np.linalg.norm(rhs))
    if scale == 0.0:
        return math.nan
    return float(np.linalg.norm(delta - rhs)) / scale


def residual_errors(checkpoints: Sequence[TrainCheckpoint], kernels: BottleneckKernels,
                    inputs: np.ndarray, lr: float, n: Optional[int] = None
                    ) -> Dict[str, ResidualSeries]:
    """
    Residuales de las ecuaciones límite por diferencias hacia adelante.

        ġ = −Θ(X, X) p,              p_i = J_iᵀχ_i
        J̇(x) = −χᵀ Ξ(x, G)           (x = embedding de sonda)
        ḟ = −K(G, G) χ − J_i (Θp)_i

    Returns:
        {'f', 'g', 'J'} → ResidualSeries de longitud len(checkpoints) − 1

    Raises:
        ValueError: Menos de 2 checkpoints o lr = 0
    """
    if len(checkpoints) < 2:
        raise ValueError("Se requieren al menos 2 checkpoints")
    if lr <= 0:
        raise ValueError(f"lr debe ser positivo para diferenciar, se recibió {lr}")
    if any(checkpoint.probe is None or checkpoint.J_train is None for checkpoint in checkpoints):
        raise ValueError("Los checkpoints deben incluir la sonda y los Jacobianos de entrenamiento")
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    theta = kernels.theta(inputs, inputs)
    d = checkpoints[0].g_values.shape[1]

    values = {quantity: [] for quantity in QUANTITIES}
    for current, following in zip(checkpoints[:-1], checkpoints[1:]):
        G, chi = current.g_values, current.chi
        p = np.einsum('bij,bi->bj', current.J_train, chi)
        theta_p = theta @ p

        rhs_g = -theta_p
        rhs_J = -chi.T @ kernels.xi_rows(current.probe, G)
        rhs_f = -kernels.k(G, G) @ chi - np.einsum('bij,bj->bi', current.J_train, theta_p)

        values["g"].append(_relative_residual((following.g_values - G) / lr, rhs_g))
        values["f"].append(_relative_residual((following.f_values - current.f_values) / lr, rhs_f))
        values["J"].append(_relative_residual((following.J_probe - current.J_probe) / lr, rhs_J))

    return {quantity: ResidualSeries(quantity, np.array(series), n, lr, d)
            for quantity, series in values.items()}


def finite_residuals(inputs: np.ndarray, targets: np.ndarray, n: int, bottleneck_dim: int,
                     lr: float, steps: int, seed: int = 0, activation: str = "relu",
                     eps_clamp: Optional[float] = None) -> Dict[str, ResidualSeries]:
    """
    Residuales de una red de 4 capas (g y f con una capa oculta de ancho n).
    """
    inputs = np.atleast_2d(inputs)
    targets = np.atleast_2d(targets)
    spec = MlpSpec.four_layer(inputs.shape[1], n, bottleneck_dim, targets.shape[1], activation, seed)
    if activation == "linear":
        kernels = BottleneckKernels.linear(inputs.shape[1], bottleneck_dim, depth_f=2, depth_g=2)
    elif eps_clamp is None:
        kernels = BottleneckKernels.relu(inputs.shape[1], bottleneck_dim)
    else:
        kernels = BottleneckKernels.relu(inputs.shape[1], bottleneck_dim, eps_clamp)
    checkpoints = record_finite_trajectory(BottleneckMlp(spec), inputs, targets, lr, steps)
    series = residual_errors(checkpoints, kernels, inputs, lr, n)
    for quantity, values in series.items():
        logger.info(f"Residual {quantity} (n={n}, d={bottleneck_dim}): mediana {values.median():.4g}")
    return series


def linear_residuals(mode: str, inputs: np.ndarray, targets: np.ndarray, n: int,
                     bottleneck_dim: int, lr: float = 1e-4, steps: int = 100,
                     seed: int = 0) -> Dict[str, ResidualSeries]:
    """
    Residuales de redes lineales con kernels Θ = L_g ξᵀξ̃/d₀, K = L_f xᵀx̃/d.

    Args:
        mode: 'deep4' (L_f = L_g = 2, ancho n) o 'effective2' (L_f = L_g = 1,
            exacta para cualquier n)

    Raises:
        ValueError: Modo desconocido
    """
    inputs = np.atleast_2d(inputs)
    targets = np.atleast_2d(targets)
    input_dim, output_dim = inputs.shape[1], targets.shape[1]
    if mode == "deep4":
        spec = MlpSpec((input_dim, n, bottleneck_dim), (bottleneck_dim, n, output_dim), "linear", seed)
        kernels = BottleneckKernels.linear(input_dim, bottleneck_dim, depth_f=2, depth_g=2)
    elif mode == "effective2":
        spec = MlpSpec((input_dim, bottleneck_dim), (bottleneck_dim, output_dim), "linear", seed)
        kernels = BottleneckKernels.linear(input_dim, bottleneck_dim, depth_f=1, depth_g=1)
    else:
        raise ValueError(f"Modo lineal desconocido: {mode}. Opciones: deep4, effective2")

    checkpoints = record_finite_trajectory(BottleneckMlp(spec), inputs, targets, lr, steps)
    series = residual_errors(checkpoints, kernels, inputs, lr, n)
    logger.info(f"Residuales lineales {mode}: f={series['f'].median():.4g}, "
                f"g={series['g'].median():.4g}, J={series['J'].median():.4g}")
    return series
