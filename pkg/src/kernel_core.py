"""
kernel_core.py
==============
Kernels límite deterministas en forma cerrada.

Este módulo se encarga de:
- Geometría de pares (D = ‖x‖‖x̃‖, λ = xᵀx̃/D) con recorte configurable
- Kernel NNGP ReLU Σ y su derivada Σ̇ (arco-coseno de orden 1 y 0)
- NTK superficial Θ/K, kernel de Jacobiano Ξ = ∂K/∂x
- Kernels derivados Σ₍₁₎ = ∂Σ/∂b y Σ₍₂₎ = ∂²Σ/∂a∂b
- Recursión NNGP/NTK profunda (sin ganancia √2) y kernels lineales
- Constructores vectorizados de matrices de Gram para los entrenadores

Todas las funciones son puras; se pueden llamar desde varios hilos.

Convención de λ: Σ, Σ̇ y Θ/K usan λ sin recortar (limitado a [−1, 1]) para
que los valores en la diagonal sean exactos; Ξ y Σ₍₂₎ usan λ recortado a
±(1 − ε) porque dividen por √(1 − λ²).
"""

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from src.errors import DegenerateEmbeddingError


DEFAULT_EPS_CLAMP = 1e-7

ACTIVATIONS = ("relu", "linear")

TWO_PI = 2.0 * math.pi


# ============================================================================
# Tipos
# ============================================================================

@dataclass(frozen=True)
class PairGeometry:
    """
    Geometría cacheada de un par de vectores; argumento de todo kernel cerrado.

    Attributes:
        dot: xᵀx̃
        norm_a: ‖x‖
        norm_b: ‖x̃‖
        d_prod: D = ‖x‖‖x̃‖
        lam: λ recortado a [−1+ε, 1−ε] (0 si D = 0)
        lam_exact: λ limitado a [−1, 1] sin margen (0 si D = 0)
        sq_norm_a: ‖x‖²
        sq_norm_b: ‖x̃‖²
    """
    dot: float
    norm_a: float
    norm_b: float
    d_prod: float
    lam: float
    lam_exact: float
    sq_norm_a: float
    sq_norm_b: float


@dataclass(frozen=True)
class KernelConfig:
    """
    Configuración de un lado del modelo (Θ con d₀ o K/Ξ con d).

    Attributes:
        activation: 'relu' o 'linear'
        input_dim: d₀ o d
        depth: capas ocultas (relu) o número de matrices de pesos (linear)
        eps_clamp: margen de recorte de λ
    """
    activation: str = "relu"
    input_dim: int = 1
    depth: int = 1
    eps_clamp: float = DEFAULT_EPS_CLAMP

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(
                f"Activación no soportada para kernels analíticos: {self.activation}"
            )
        _check_input_dim(self.input_dim)
        if self.depth < 1:
            raise ValueError(f"depth debe ser ≥ 1, se recibió {self.depth}")
        _check_eps(self.eps_clamp)

    def ntk_matrix(self, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        """Matriz del NTK (Θ o K) entre las filas de X e Y."""
        if self.activation == "linear":
            return linear_ntk_matrix(X, Y, self.input_dim, self.depth)
        if self.depth == 1:
            return relu_ntk_matrix(X, Y, self.input_dim)
        return relu_ntk_deep_matrix(X, Y, self.input_dim, self.depth)

    def xi_rows(self, x: np.ndarray, Y: np.ndarray) -> np.ndarray:
        """Filas Ξ(x, y_j) para cada fila y_j de Y."""
        if self.activation == "linear":
            return linear_xi_rows(x, Y, self.input_dim, self.depth)
        if self.depth != 1:
            raise ValueError("Ξ solo está definido para f de una capa oculta")
        return relu_xi_rows(x, Y, self.input_dim, self.eps_clamp)


@dataclass(frozen=True)
class BottleneckKernels:
    """
    Triple (Θ, K, Ξ) de un modelo con cuello de botella.

    Attributes:
        theta_config: lado de g (entrada ξ, dimensión d₀)
        k_config: lado de f (entrada x, dimensión d)
    """
    theta_config: KernelConfig
    k_config: KernelConfig

    @classmethod
    def relu(cls, input_dim: int, bottleneck_dim: int,
             eps_clamp: float = DEFAULT_EPS_CLAMP, depth_g: int = 1) -> 'BottleneckKernels':
        """Kernels ReLU con f de una capa oculta y g de `depth_g` capas ocultas."""
        return cls(
            KernelConfig("relu", input_dim, depth_g, eps_clamp),
            KernelConfig("relu", bottleneck_dim, 1, eps_clamp),
        )

    @classmethod
    def linear(cls, input_dim: int, bottleneck_dim: int,
               depth_f: int = 1, depth_g: int = 1) -> 'BottleneckKernels':
        """Kernels lineales: Θ = L_g ξᵀξ̃/d₀, K = L_f xᵀx̃/d, Ξ = L_f x̃/d."""
        return cls(
            KernelConfig("linear", input_dim, depth_g),
            KernelConfig("linear", bottleneck_dim, depth_f),
        )

    @property
    def input_dim(self) -> int:
        return self.theta_config.input_dim

    @property
    def bottleneck_dim(self) -> int:
        return self.k_config.input_dim

    def theta(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        return self.theta_config.ntk_matrix(A, B)

    def k(self, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        return self.k_config.ntk_matrix(X, Y)

    def xi_rows(self, x: np.ndarray, Y: np.ndarray) -> np.ndarray:
        return self.k_config.xi_rows(x, Y)


# ============================================================================
# Validaciones
# ============================================================================

def _check_input_dim(input_dim: int) -> None:
    if input_dim is None or input_dim <= 0:
        raise ValueError(f"input_dim debe ser positivo, se recibió {input_dim}")


def _check_eps(eps_clamp: float) -> None:
    if not 0.0 < eps_clamp < 1e-3:
        raise ValueError(f"eps_clamp debe estar en (0, 1e-3), se recibió {eps_clamp}")


def _as_pair(x, xt) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    xt = np.asarray(xt, dtype=np.float64)
    if x.ndim != 1 or xt.ndim != 1:
        raise ValueError("Los argumentos deben ser vectores 1-D")
    if x.shape != xt.shape:
        raise ValueError(f"Dimensiones distintas: {x.shape} vs {xt.shape}")
    if x.size == 0:
        raise ValueError("Los vectores deben tener longitud ≥ 1")
    return x, xt


def _as_rows(X, name: str = "X") -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise ValueError(f"{name} debe ser una matriz 2-D")
    return X


# ============================================================================
# Funciones arco-coseno
# ============================================================================

def _kappa1(lam):
    """(λ(π − arccos λ) + √(1 − λ²)) / (2π)."""
    return (lam * (math.pi - np.arccos(lam)) + np.sqrt(1.0 - lam * lam)) / TWO_PI


def _kappa0(lam):
    """(π − arccos λ) / (2π)."""
    return (math.pi - np.arccos(lam)) / TWO_PI


# ============================================================================
# Operaciones escalares
# ============================================================================

def pair_geometry(x, xt, eps_clamp: float = DEFAULT_EPS_CLAMP) -> PairGeometry:
    """
    Calcula la geometría de un par de vectores.

    Args:
        x, xt: Vectores de la misma longitud
        eps_clamp: Margen de recorte de λ

    Returns:
        PairGeometry con λ recortado a [−1+ε, 1−ε] (λ = 0 si D = 0)

    Raises:
        ValueError: Si las dimensiones no coinciden o hay valores no finitos

    Example:
        >>> pair_geometry([1, 1], [1, 0]).lam
        0.7071067811865475
    """
    _check_eps(eps_clamp)
    x, xt = _as_pair(x, xt)

    sq_a = float(x @ x)
    sq_b = float(xt @ xt)
    dot = float(x @ xt)
    if not all(math.isfinite(v) for v in (sq_a, sq_b, dot)):
        raise ValueError("Entradas no finitas en pair_geometry")

    # sqrt(a·b) en lugar de sqrt(a)·sqrt(b): exacto en la diagonal
    d_prod = math.sqrt(sq_a * sq_b)
    if abs(dot) > d_prod * (1.0 + 1e-9) + 1e-300:
        raise ValueError(f"|xᵀx̃| = {abs(dot)} excede ‖x‖‖x̃‖ = {d_prod}")

    if d_prod == 0.0:
        lam_exact = 0.0
        lam = 0.0
    else:
        lam_exact = min(1.0, max(-1.0, dot / d_prod))
        lam = min(1.0 - eps_clamp, max(-1.0 + eps_clamp, lam_exact))

    return PairGeometry(
        dot=dot,
        norm_a=math.sqrt(sq_a),
        norm_b=math.sqrt(sq_b),
        d_prod=d_prod,
        lam=lam,
        lam_exact=lam_exact,
        sq_norm_a=sq_a,
        sq_norm_b=sq_b,
    )


def sigma_relu(geom: PairGeometry, input_dim: int) -> float:
    """
    Kernel NNGP ReLU: Σ = (D/d)·(λ(π − arccos λ) + √(1 − λ²))/(2π).

    Retorna 0 cuando D = 0.
    """
    _check_input_dim(input_dim)
    if geom.d_prod == 0.0:
        return 0.0
    return float(geom.d_prod / input_dim * _kappa1(geom.lam_exact))


def sigma_dot_relu(geom: PairGeometry) -> float:
    """Σ̇ = (π − arccos λ)/(2π) ∈ [0, 1/2]."""
    return float(_kappa0(geom.lam_exact))


def ntk_relu_shallow(x, xt, input_dim: int) -> float:
    """
    NTK de un MLP ReLU de una capa oculta: Θ = (xᵀx̃/d)·Σ̇ + Σ.

    Sirve para Θ (con d₀) y para K (con d).
    """
    _check_input_dim(input_dim)
    geom = pair_geometry(x, xt)
    return geom.dot / input_dim * sigma_dot_relu(geom) + sigma_relu(geom, input_dim)


def xi_relu(x, xt, input_dim: int, eps_clamp: float = DEFAULT_EPS_CLAMP) -> np.ndarray:
    """
    Kernel de Jacobiano Ξ(x, x̃) = ∂K(x, x̃)/∂x para ReLU.

    Ξ = (x̃/d)Σ̇ + (xᵀx̃/d)·(x̃/D − λx/‖x‖²)/(2π√(1−λ²))
        + (D/d)Σ̇·(x̃/D − λx/‖x‖²) + x‖x̃‖Σ/(‖x‖D)

    con λ recortado.

    Raises:
        DegenerateEmbeddingError: Si ‖x‖ = 0 o ‖x̃‖ = 0
    """
    _check_input_dim(input_dim)
    x, xt = _as_pair(x, xt)
    return relu_xi_rows(x, xt[None, :], input_dim, eps_clamp)[0]


def sigma_grad_kernels(x, xt, input_dim: int, activation: str = "relu",
                       eps_clamp: float = DEFAULT_EPS_CLAMP) -> Tuple[np.ndarray, np.ndarray]:
    """
    Kernels derivados del NNGP.

    Σ₍₁₎(x, x̃) = ∂Σ(x, b)/∂b en b = x̃ (vector de longitud d).
    Σ₍₂₎(x, x̃) = ∂²Σ(a, b)/∂a∂b en a = x, b = x̃ (matriz d×d, fila ↔ a).

    Para ReLU, con θ = arccos λ y s = √(1 − λ²):
        Σ₍₁₎ = [x(π − θ) + x̃ (‖x‖/‖x̃‖) s] / (2πd)
        Σ₍₂₎ = [(π − θ)I + u xᵀ/s + s x x̃ᵀ/(‖x‖‖x̃‖) − ‖x‖λ u x̃ᵀ/(s‖x̃‖)] / (2πd)
    donde u = x̃/D − λx/‖x‖². Σ₍₁₎ usa λ exacto, Σ₍₂₎ el recortado.

    Returns:
        (sigma1, sigma2)

    Raises:
        DegenerateEmbeddingError: Entrada de norma cero con ReLU
    """
    _check_input_dim(input_dim)
    x, xt = _as_pair(x, xt)
    d = x.size

    if activation == "linear":
        return x / input_dim, np.eye(d) / input_dim
    if activation != "relu":
        raise ValueError(f"Activación no soportada: {activation}")

    geom = pair_geometry(x, xt, eps_clamp)
    if geom.norm_a == 0.0 or geom.norm_b == 0.0:
        raise DegenerateEmbeddingError(
            "Σ₍₁₎/Σ₍₂₎ no están definidos para entradas de norma cero"
        )

    theta_exact = math.acos(geom.lam_exact)
    s_exact = math.sqrt(max(0.0, 1.0 - geom.lam_exact ** 2))
    sigma1 = (x * (math.pi - theta_exact)
              + xt * (geom.norm_a / geom.norm_b) * s_exact) / (TWO_PI * input_dim)

    lam = geom.lam
    theta = math.acos(lam)
    s = math.sqrt(1.0 - lam * lam)
    u = xt / geom.d_prod - lam * x / geom.sq_norm_a
    sigma2 = ((math.pi - theta) * np.eye(d)
              + np.outer(u, x) / s
              + s * np.outer(x, xt) / geom.d_prod
              - geom.norm_a * lam / (s * geom.norm_b) * np.outer(u, xt)) / (TWO_PI * input_dim)
    return sigma1, sigma2


def ntk_relu_deep(xi, xit, input_dim: int, depth: int) -> float:
    """
    NTK ReLU profundo por la recursión capa a capa (sin ganancia √2).

    Σ⁽⁰⁾ = ξᵀξ̃/d₀, Θ⁽⁰⁾ = Σ⁽⁰⁾; para h = 1..L:
        Σ⁽ʰ⁾ = √(Σ⁽ʰ⁻¹⁾(ξ,ξ)Σ⁽ʰ⁻¹⁾(ξ̃,ξ̃))·κ₁(λ⁽ʰ⁻¹⁾)
        Σ̇⁽ʰ⁾ = κ₀(λ⁽ʰ⁻¹⁾)
        Θ⁽ʰ⁾ = Θ⁽ʰ⁻¹⁾Σ̇⁽ʰ⁾ + Σ⁽ʰ⁾

    Con depth = 1 reproduce ntk_relu_shallow.
    """
    _check_input_dim(input_dim)
    if depth < 1:
        raise ValueError(f"depth debe ser ≥ 1, se recibió {depth}")
    x, xt = _as_pair(xi, xit)
    value = relu_ntk_deep_matrix(x[None, :], xt[None, :], input_dim, depth)
    return float(value[0, 0])


def kernels_linear(x, xt, input_dim: int, depth: int) -> Tuple[float, np.ndarray]:
    """
    Kernels de una red lineal profunda con `depth` matrices de pesos.

    Returns:
        (depth·xᵀx̃/d, depth·x̃/d)
    """
    _check_input_dim(input_dim)
    if depth < 1:
        raise ValueError(f"depth debe ser ≥ 1, se recibió {depth}")
    x, xt = _as_pair(x, xt)
    return depth * float(x @ xt) / input_dim, depth * xt / input_dim


# ============================================================================
# Constructores vectorizados
# ============================================================================

def _row_geometry(X: np.ndarray, Y: np.ndarray):
    """Productos, D y λ exacto para todas las parejas de filas."""
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"Dimensiones distintas: {X.shape[1]} vs {Y.shape[1]}")
    dots = X @ Y.T
    sq_x = np.einsum('ij,ij->i', X, X)
    sq_y = np.einsum('ij,ij->i', Y, Y)
    d_prod = np.sqrt(np.outer(sq_x, sq_y))
    with np.errstate(divide='ignore', invalid='ignore'):
        lam = np.where(d_prod > 0.0, dots / np.where(d_prod > 0.0, d_prod, 1.0), 0.0)
    return dots, sq_x, sq_y, d_prod, np.clip(lam, -1.0, 1.0)


def relu_sigma_matrix(X, Y, input_dim: int) -> np.ndarray:
    """Matriz Σ(x_i, y_j)."""
    _check_input_dim(input_dim)
    X, Y = _as_rows(X, "X"), _as_rows(Y, "Y")
    _, _, _, d_prod, lam = _row_geometry(X, Y)
    return d_prod / input_dim * _kappa1(lam)


def relu_ntk_matrix(X, Y, input_dim: int) -> np.ndarray:
    """Matriz del NTK superficial (xᵢᵀyⱼ/d)Σ̇ + Σ."""
    _check_input_dim(input_dim)
    X, Y = _as_rows(X, "X"), _as_rows(Y, "Y")
    dots, _, _, d_prod, lam = _row_geometry(X, Y)
    return dots / input_dim * _kappa0(lam) + d_prod / input_dim * _kappa1(lam)


def _deep_recursion(X: np.ndarray, Y: np.ndarray, input_dim: int, depth: int):
    dots, sq_x, sq_y, d_prod, lam = _row_geometry(X, Y)

    # Nivel 1 con las mismas operaciones que el kernel superficial
    sigma = d_prod / input_dim * _kappa1(lam)
    theta = dots / input_dim * _kappa0(lam) + sigma
    diag_x = sq_x / (2.0 * input_dim)
    diag_y = sq_y / (2.0 * input_dim)

    for _ in range(depth - 1):
        scale = np.sqrt(np.outer(diag_x, diag_y))
        with np.errstate(divide='ignore', invalid='ignore'):
            lam = np.where(scale > 0.0, sigma / np.where(scale > 0.0, scale, 1.0), 0.0)
        lam = np.clip(lam, -1.0, 1.0)
        sigma_dot = _kappa0(lam)
        sigma = scale * _kappa1(lam)
        theta = theta * sigma_dot + sigma
        diag_x = diag_x / 2.0
        diag_y = diag_y / 2.0
    return sigma, theta


def relu_nngp_deep_matrix(X, Y, input_dim: int, depth: int) -> np.ndarray:
    """Matriz NNGP Σ⁽ᴸ⁾ de un MLP ReLU con `depth` capas ocultas."""
    _check_input_dim(input_dim)
    if depth < 1:
        raise ValueError(f"depth debe ser ≥ 1, se recibió {depth}")
    X, Y = _as_rows(X, "X"), _as_rows(Y, "Y")
    sigma, _ = _deep_recursion(X, Y, input_dim, depth)
    return sigma


def relu_ntk_deep_matrix(X, Y, input_dim: int, depth: int) -> np.ndarray:
    """Matriz NTK Θ⁽ᴸ⁾ de un MLP ReLU con `depth` capas ocultas."""
    _check_input_dim(input_dim)
    if depth < 1:
        raise ValueError(f"depth debe ser ≥ 1, se recibió {depth}")
    X, Y = _as_rows(X, "X"), _as_rows(Y, "Y")
    _, theta = _deep_recursion(X, Y, input_dim, depth)
    return theta


def relu_xi_rows(x, Y, input_dim: int, eps_clamp: float = DEFAULT_EPS_CLAMP) -> np.ndarray:
    """
    Filas Ξ(x, y_j) para cada fila y_j de Y (resultado N×d).

    Raises:
        DegenerateEmbeddingError: Si x o alguna fila de Y tiene norma cero
    """
    _check_input_dim(input_dim)
    _check_eps(eps_clamp)
    x = np.asarray(x, dtype=np.float64).ravel()
    Y = _as_rows(Y, "Y")
    if Y.shape[1] != x.size:
        raise ValueError(f"Dimensiones distintas: {x.size} vs {Y.shape[1]}")

    sq_x = float(x @ x)
    sq_y = np.einsum('ij,ij->i', Y, Y)
    if sq_x == 0.0 or np.any(sq_y == 0.0):
        raise DegenerateEmbeddingError(
            "Ξ no está definido para embeddings de norma cero (cuello de botella degenerado)"
        )

    dots = Y @ x
    norm_x = math.sqrt(sq_x)
    norm_y = np.sqrt(sq_y)
    d_prod = np.sqrt(sq_x * sq_y)
    lam = np.clip(dots / d_prod, -1.0 + eps_clamp, 1.0 - eps_clamp)
    s = np.sqrt(1.0 - lam * lam)
    sigma_dot = _kappa0(lam)
    sigma = d_prod / input_dim * _kappa1(lam)

    v = Y / d_prod[:, None] - (lam / sq_x)[:, None] * x[None, :]
    xi = (Y * (sigma_dot / input_dim)[:, None]
          + (dots / input_dim / (TWO_PI * s))[:, None] * v
          + (d_prod / input_dim * sigma_dot)[:, None] * v
          + (norm_y * sigma / (norm_x * d_prod))[:, None] * x[None, :])
    return xi


def linear_ntk_matrix(X, Y, input_dim: int, depth: int = 1) -> np.ndarray:
    """Matriz depth·xᵢᵀyⱼ/d."""
    _check_input_dim(input_dim)
    X, Y = _as_rows(X, "X"), _as_rows(Y, "Y")
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"Dimensiones distintas: {X.shape[1]} vs {Y.shape[1]}")
    return depth * (X @ Y.T) / input_dim


def linear_xi_rows(x, Y, input_dim: int, depth: int = 1) -> np.ndarray:
    """Filas depth·y_j/d (independientes de x)."""
    _check_input_dim(input_dim)
    x = np.asarray(x, dtype=np.float64).ravel()
    Y = _as_rows(Y, "Y")
    if Y.shape[1] != x.size:
        raise ValueError(f"Dimensiones distintas: {x.size} vs {Y.shape[1]}")
    return depth * Y / input_dim


def gram_min_eigenvalue_ratio(gram: np.ndarray) -> float:
    """Cociente λ_min/λ_max de una matriz de Gram simétrica."""
    eigenvalues = np.linalg.eigvalsh(0.5 * (gram + gram.T))
    top = float(eigenvalues[-1])
    if top <= 0.0:
        return 0.0
    return float(eigenvalues[0]) / top
