"""Dense numeric primitives and the finite-difference gradient oracle.

Vectors and matrices are plain float64 numpy arrays. Public functions reject
shape mismatches with DimensionError and refuse to return NaN/Inf
(NumericError).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import expit

# denominators below this are treated as absolute error in grad checks
REL_ERROR_FLOOR = 1e-4


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def check_finite(x, what="value"):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite entries in {what}")
    return x


def matvec(M, v) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if M.ndim != 2 or v.ndim != 1 or M.shape[1] != v.shape[0]:
        raise DimensionError(f"cannot multiply {M.shape} by {v.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = M @ v
    return check_finite(out, "matvec")


def sigmoid(x) -> np.ndarray:
    return check_finite(expit(np.asarray(x, dtype=np.float64)), "sigmoid")


def tanh(x) -> np.ndarray:
    return check_finite(np.tanh(np.asarray(x, dtype=np.float64)), "tanh")


def softmax(x) -> np.ndarray:
    """Softmax over the last axis, shifted by the row max for stability."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError("softmax of an empty vector")
    check_finite(x, "softmax input")
    return _softmax(x)


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def finite_diff_grad(f: Callable[[np.ndarray], float], theta, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function at ``theta``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    theta = np.array(theta, dtype=np.float64)
    flat = theta.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(theta)
        flat[i] = orig - eps
        down = f(theta)
        flat[i] = orig
        grad[i] = (up - down) / (2.0 * eps)
    return check_finite(grad.reshape(theta.shape), "finite-difference gradient")


def relative_errors(analytic, numeric, floor: float = REL_ERROR_FLOOR) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise DimensionError(f"gradient shapes differ: {a.shape} vs {n.shape}")
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return np.abs(a - n) / scale


@dataclass(frozen=True)
class GradCheckReport:
    name: str
    max_relative_error: float
    worst_parameter_index: int
    analytic_value: float
    numeric_value: float
    n_checked: int

    def passed(self, tol: float = 1e-5) -> bool:
        return self.max_relative_error < tol


def grad_check(name: str, f: Callable[[np.ndarray], float], analytic, theta,
               eps: float = 1e-5) -> GradCheckReport:
    numeric = finite_diff_grad(f, theta, eps)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    numeric = numeric.reshape(-1)
    err = relative_errors(analytic, numeric)
    worst = int(np.argmax(err)) if err.size else -1
    return GradCheckReport(
        name=name,
        max_relative_error=float(err[worst]) if err.size else 0.0,
        worst_parameter_index=worst,
        analytic_value=float(analytic[worst]) if err.size else 0.0,
        numeric_value=float(numeric[worst]) if err.size else 0.0,
        n_checked=int(err.size),
    )
