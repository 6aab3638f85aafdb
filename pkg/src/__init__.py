"""
Simulador de Redes Infinitamente Anchas con Cuello de Botella (BNTK)
====================================================================

Paquete principal: entrenamiento en espacio de funciones de redes
infinitamente anchas con un cuello de botella finito, más la maquinaria
de ancho finito y Monte Carlo para verificar la teoría a escala de escritorio.

Módulos:
--------
- config_manager: Gestión de configuración
- errors: Jerarquía de excepciones (códigos de salida del CLI)
- kernel_core: Kernels límite en forma cerrada (Σ, Σ̇, Θ/K, Ξ, Σ₍₁₎, Σ₍₂₎)
- init_oracle: Oráculo de inicialización (red ancha congelada) y muestreo GP
- dynamics: Entrenador en espacio de funciones (SGD, Euler, línea base NTK)
- finite_net: Redes finitas de referencia con retropropagación manual
- linear_equiv: Redes lineales profundas y red efectiva equivalente
- verify: Desviaciones de covarianza y errores residuales
- data: Carga y generación de conjuntos de datos
- containers: Contenedores binarios "WNS1"/"FSD1" y hashes
- run_manifest: Métricas CSV y manifiesto de ejecución
- cli: Ejecutor de experimentos
"""

__version__ = "1.0.0"
