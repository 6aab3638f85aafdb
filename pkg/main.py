#!/usr/bin/env python3
"""
main.py
=======
Punto de entrada principal del simulador BNTK.

Uso:
    # Entrenamiento en espacio de funciones con los hiperparámetros sintéticos
    python3 main.py train-fs --preset synthetic

    # Línea base con cuello de botella infinito en MNIST
    python3 main.py train-fs --dataset mnist --d inf

    # Verificación Monte Carlo de las covarianzas J-J
    python3 main.py verify-cov --kind JJ --n 10000 --replicas 10000

    # Residuales de redes lineales profundas
    python3 main.py verify-linear --preset verify-linear --experiment residuals
"""

import os
import sys

# Agregar el directorio raíz al path para importaciones
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src.cli import dispatch


def main() -> int:
    """Función principal."""
    return dispatch(sys.argv[1:])


if __name__ == '__main__':
    sys.exit(main())
