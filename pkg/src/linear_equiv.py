"""
linear_equiv.py
===============
Redes lineales profundas con cuello de botella y su colapso efectivo.

Este módulo se encarga de:
- Pesos efectivos w_eff = wᴸ···w¹/√(nᴸ⁻¹d) y θ_eff
- Comparar el flujo de gradiente (Euler) de la red profunda con el de la
  red efectiva de dos capas entrenada con tasas L_f·ε_f y L_g·ε_g
- Sondas de aceleración implícita con inicialización pequeña
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.errors import NumericalAbort
from src.finite_net import BottleneckMlp, MlpSpec, forward, loss_and_gradients
from src.run_manifest import prediction_metrics


logger = logging.getLogger("LinearEquiv")


def effective_weight(matrices: Sequence[np.ndarray], fan_in: int, width: int) -> np.ndarray:
    """
    Producto escalado de una cadena de matrices.

    Args:
        matrices: W¹..Wᴸ en orden de aplicación
        fan_in: Dimensión de entrada de la cadena (d o d₀)
        width: Ancho oculto n

    Returns:
        Wᴸ···W¹/√(nᴸ⁻¹·fan_in)

    Raises:
        ValueError: Si las dimensiones de la cadena no encajan

    Example:
        >>> effective_weight([np.ones((4, 1)), np.ones((1, 4))], 1, 4)
        array([[2.]])
    """
    if not matrices:
        raise ValueError("La cadena de matrices está vacía")
    product = np.asarray(matrices[0], dtype=np.float64)
    if product.shape[1] != fan_in:
        raise ValueError(f"La primera matriz espera {product.shape[1]} entradas, fan_in={fan_in}")
    for index, matrix in enumerate(matrices[1:], start=1):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape[1] != product.shape[0]:
            raise ValueError(
                f"Matriz {index}: {matrix.shape[1]} columnas, se esperaban {product.shape[0]}"
            )
        product = matrix @ product
    return product / math.sqrt(width ** (len(matrices) - 1) * fan_in)


class DeepLinearNet:
    """
    Red lineal profunda F(ξ) = w_eff θ_eff ξ con tasas separadas para f y g.

    Attributes:
        net: BottleneckMlp lineal subyacente
        lr_f: ε_f
        lr_g: ε_g
    """

    def __init__(self, net: BottleneckMlp, lr_f: float, lr_g: float, width: int = 1):
        if net.activation.name != "linear":
            raise ValueError("DeepLinearNet requiere activación lineal")
        self.net = net
        self.width = width
        self.lr_f = lr_f
        self.lr_g = lr_g
        self.logger = logging.getLogger(
            f"DeepLinearNet-{self.depth_f}x{self.depth_g}"
        )

    @classmethod
    def random(cls, dims: Tuple[int, int, int, int], depth_f: int, depth_g: int,
               lr_f: float, lr_g: float, seed: int = 0, init_scale: float = 1.0) -> 'DeepLinearNet':
        """
        Red con pesos N(0, 1); init_scale multiplica la primera matriz de cada cadena.

        Args:
            dims: (d₀, d, d_r, n)
        """
        if depth_f < 1 or depth_g < 1:
            raise ValueError("Las profundidades deben ser ≥ 1")
        input_dim, bottleneck_dim, output_dim, width = dims
        spec = MlpSpec(
            g_dims=(input_dim,) + (width,) * (depth_g - 1) + (bottleneck_dim,),
            f_dims=(bottleneck_dim,) + (width,) * (depth_f - 1) + (output_dim,),
            activation="linear",
            seed=seed,
        )
        net = BottleneckMlp(spec)
        net.g_layers[0] *= init_scale
        net.f_layers[0] *= init_scale
        return cls(net, lr_f, lr_g, width)

    @classmethod
    def collapsed(cls, deep: 'DeepLinearNet') -> 'DeepLinearNet':
        """
        Red efectiva de dos capas en parametrización NTK (ŵ = √d w_eff,
        θ̂ = √d₀ θ_eff), entrenada con tasas L_f ε_f y L_g ε_g.
        """
        input_dim, bottleneck_dim, output_dim, _ = deep.dims
        spec = MlpSpec((input_dim, bottleneck_dim), (bottleneck_dim, output_dim), "linear", deep.net.spec.seed)
        theta_hat = math.sqrt(input_dim) * deep.theta_eff()
        w_hat = math.sqrt(bottleneck_dim) * deep.w_eff()
        return cls(BottleneckMlp(spec, [theta_hat], [w_hat]),
                   deep.depth_f * deep.lr_f, deep.depth_g * deep.lr_g, deep.width)

    @property
    def w_list(self) -> List[np.ndarray]:
        return self.net.f_layers

    @property
    def theta_list(self) -> List[np.ndarray]:
        return self.net.g_layers

    @property
    def depth_f(self) -> int:
        return len(self.net.f_layers)

    @property
    def depth_g(self) -> int:
        return len(self.net.g_layers)

    @property
    def dims(self) -> Tuple[int, int, int, int]:
        spec = self.net.spec
        return spec.input_dim, spec.bottleneck_dim, spec.output_dim, self.width

    def theta_eff(self) -> np.ndarray:
        return effective_weight(self.theta_list, self.net.spec.input_dim, self.width)

    def w_eff(self) -> np.ndarray:
        return effective_weight(self.w_list, self.net.spec.bottleneck_dim, self.width)

    def outputs(self, inputs: np.ndarray) -> np.ndarray:
        _, F, _ = forward(self.net, np.atleast_2d(inputs))
        return F

    def collapsed_outputs(self, inputs: np.ndarray) -> np.ndarray:
        return np.atleast_2d(inputs) @ (self.w_eff() @ self.theta_eff()).T

    def gradient_step(self, inputs: np.ndarray, targets: np.ndarray) -> float:
        """
        Paso de Euler del flujo de gradiente con lote completo.

        Returns:
            Pérdida Σ½‖F − y‖² antes del paso

        Raises:
            NumericalAbort: Si la pérdida o los gradientes no son finitos
        """
        loss, g_grads, f_grads, _ = loss_and_gradients(self.net, inputs, targets)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in g_grads + f_grads):
            self.logger.error(f"Pérdida no finita ({loss}) con ε_f={self.lr_f}, ε_g={self.lr_g}")
            raise NumericalAbort(f"Divergencia en la red lineal {self.depth_f}x{self.depth_g}")
        for weight, grad in zip(self.net.g_layers, g_grads):
            weight -= self.lr_g * grad
        for weight, grad in zip(self.net.f_layers, f_grads):
            weight -= self.lr_f * grad
        return loss


@dataclass
class LinearPairResult:
    """
    Trayectorias de la red profunda y de la efectiva.

    Attributes:
        traj_deep: F de la red profunda por paso (T+1 × N × d_r)
        traj_eff: F de la red efectiva por paso
        deviations: Desviación relativa de Frobenius por paso
        losses: Pérdida media ½‖F − y‖² de la red profunda por paso
        max_rel_dev: Máximo de `deviations`
    """
    traj_deep: np.ndarray
    traj_eff: np.ndarray
    deviations: np.ndarray
    losses: np.ndarray
    max_rel_dev: float


def simulate_linear_pair(dims: Tuple[int, int, int], depth_f: int, depth_g: int, n: int,
                         lr_f: float, lr_g: float, inputs: np.ndarray, targets: np.ndarray,
                         steps: int, seed: int = 0, init_scale: float = 1.0) -> LinearPairResult:
    """
    Flujo de gradiente de la red profunda frente a la efectiva de dos capas.

    Args:
        dims: (d₀, d, d_r)
        depth_f, depth_g: L_f y L_g
        n: Ancho oculto
        lr_f, lr_g: ε_f y ε_g de la red profunda
        inputs, targets: Datos de entrenamiento
        steps: Pasos de Euler

    Raises:
        NumericalAbort: Divergencia
    """
    deep = DeepLinearNet.random(tuple(dims) + (n,), depth_f, depth_g, lr_f, lr_g, seed, init_scale)
    effective = DeepLinearNet.collapsed(deep)

    traj_deep, traj_eff, deviations, losses = [], [], [], []
    for step in range(steps + 1):
        F_deep = deep.outputs(inputs)
        F_eff = effective.outputs(inputs)
        traj_deep.append(F_deep)
        traj_eff.append(F_eff)
        norm = np.linalg.norm(F_deep)
        deviations.append(float(np.linalg.norm(F_deep - F_eff) / norm) if norm > 0 else 0.0)
        losses.append(prediction_metrics(F_deep, targets, "regression")[0])
        if step < steps:
            deep.gradient_step(inputs, targets)
            effective.gradient_step(inputs, targets)

    deviations = np.array(deviations)
    logger.info(f"L_f={depth_f}, L_g={depth_g}, n={n}: max_rel_dev={deviations.max():.3g}")
    return LinearPairResult(np.array(traj_deep), np.array(traj_eff), deviations,
                            np.array(losses), float(deviations.max()))


def acceleration_probe(depths: Sequence[Tuple[int, int]], n: int, inputs: np.ndarray,
                       targets: np.ndarray, lr: float, steps: int, seed: int = 0,
                       init_scale: float = 0.1, bottleneck_dim: Optional[int] = None
                       ) -> Dict[Tuple[int, int], np.ndarray]:
    """
    Curvas de pérdida por profundidad (L_f, L_g) con inicialización pequeña.

    Returns:
        {(L_f, L_g): pérdidas por paso (T+1)}
    """
    inputs = np.atleast_2d(inputs)
    targets = np.atleast_2d(targets)
    input_dim, output_dim = inputs.shape[1], targets.shape[1]
    bottleneck_dim = bottleneck_dim or max(1, min(input_dim, output_dim))

    curves = {}
    for depth_f, depth_g in depths:
        net = DeepLinearNet.random((input_dim, bottleneck_dim, output_dim, n), depth_f, depth_g,
                                   lr, lr, seed, init_scale)
        losses = []
        for step in range(steps + 1):
            losses.append(prediction_metrics(net.outputs(inputs), targets, "regression")[0])
            if step < steps:
                net.gradient_step(inputs, targets)
        curves[(depth_f, depth_g)] = np.array(losses)
        logger.info(f"Sonda ({depth_f},{depth_g}): pérdida final {losses[-1]:.4g}")
    return curves


def steps_to_threshold(curve: Sequence[float], fraction: float = 0.1) -> Optional[int]:
    """Primer paso en que la pérdida baja de fraction·L₀ (None si nunca)."""
    curve = np.asarray(curve, dtype=np.float64)
    if curve.size == 0:
        return None
    hits = np.nonzero(curve <= fraction * curve[0])[0]
    return int(hits[0]) if hits.size else None
