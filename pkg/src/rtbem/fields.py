"""Scalar and vector fields on the reference square given as evaluators."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .refelem import RTFunction, TensorPolynomial, divergence


@dataclass(frozen=True)
class VectorField:
    """A vector field u(xi1, xi2) -> array (2, ...) together with its divergence."""

    value: Callable
    divergence: Callable

    def __call__(self, x1, x2):
        return np.asarray(self.value(x1, x2), dtype=float)

    @classmethod
    def from_rt(cls, v: RTFunction) -> "VectorField":
        d = divergence(v)
        return cls(v, d)

    def __sub__(self, other: "VectorField") -> "VectorField":
        return VectorField(
            lambda x1, x2: self.value(x1, x2) - other.value(x1, x2),
            lambda x1, x2: self.divergence(x1, x2) - other.divergence(x1, x2),
        )


@dataclass(frozen=True)
class ScalarField:
    """A scalar field with its gradient (array (2, ...))."""

    value: Callable
    gradient: Callable

    def __call__(self, x1, x2):
        return np.asarray(self.value(x1, x2), dtype=float)

    @classmethod
    def from_polynomial(cls, f: TensorPolynomial) -> "ScalarField":
        d1, d2 = f.derivative(0), f.derivative(1)
        return cls(f, lambda x1, x2: np.stack([d1(x1, x2), d2(x1, x2)]))

    def curl(self) -> VectorField:
        def value(x1, x2):
            g = np.asarray(self.gradient(x1, x2))
            return np.stack([g[1], -g[0]])

        return VectorField(value, lambda x1, x2: np.zeros(np.broadcast(np.asarray(x1), np.asarray(x2)).shape))


def as_vector_field(u) -> VectorField:
    if isinstance(u, VectorField):
        return u
    if isinstance(u, RTFunction):
        return VectorField.from_rt(u)
    raise TypeError(f"cannot interpret {type(u).__name__} as a vector field")


def as_scalar_field(f) -> ScalarField:
    if isinstance(f, ScalarField):
        return f
    if isinstance(f, TensorPolynomial):
        return ScalarField.from_polynomial(f)
    raise TypeError(f"cannot interpret {type(f).__name__} as a scalar field")


def random_vector_field(rng: np.random.Generator, terms: int = 3, max_frequency: float = 3.0) -> VectorField:
    """Sum of plane-wave cosines with random amplitudes, frequencies and phases."""
    amp = rng.standard_normal((2, terms))
    freq = rng.uniform(-max_frequency, max_frequency, size=(2, terms, 2))
    phase = rng.uniform(0.0, 2.0 * np.pi, size=(2, terms))

    def arg(c, k, x1, x2):
        return freq[c, k, 0] * x1 + freq[c, k, 1] * x2 + phase[c, k]

    def value(x1, x2):
        x1, x2 = np.asarray(x1, dtype=float), np.asarray(x2, dtype=float)
        return np.stack([sum(amp[c, k] * np.cos(arg(c, k, x1, x2)) for k in range(terms)) for c in range(2)])

    def div(x1, x2):
        x1, x2 = np.asarray(x1, dtype=float), np.asarray(x2, dtype=float)
        return sum(-amp[c, k] * freq[c, k, c] * np.sin(arg(c, k, x1, x2)) for c in range(2) for k in range(terms))

    return VectorField(value, div)


def random_scalar_field(rng: np.random.Generator, terms: int = 3, max_frequency: float = 3.0) -> ScalarField:
    amp = rng.standard_normal(terms)
    freq = rng.uniform(-max_frequency, max_frequency, size=(terms, 2))
    phase = rng.uniform(0.0, 2.0 * np.pi, size=terms)

    def value(x1, x2):
        x1, x2 = np.asarray(x1, dtype=float), np.asarray(x2, dtype=float)
        return sum(amp[k] * np.cos(freq[k, 0] * x1 + freq[k, 1] * x2 + phase[k]) for k in range(terms))

    def grad(x1, x2):
        x1, x2 = np.asarray(x1, dtype=float), np.asarray(x2, dtype=float)
        s = [-amp[k] * np.sin(freq[k, 0] * x1 + freq[k, 1] * x2 + phase[k]) for k in range(terms)]
        return np.stack([sum(freq[k, 0] * s[k] for k in range(terms)), sum(freq[k, 1] * s[k] for k in range(terms))])

    return ScalarField(value, grad)


def corner_gradient_field(exponent: float = 2.0 / 3.0, delta: float = 1e-2, corner=(0.0, 0.0)) -> VectorField:
    """grad(rho^a) with rho = sqrt(|xi - corner|^2 + delta^2), a regularized corner singularity."""
    c1, c2 = corner
    a = exponent

    def value(x1, x2):
        d1, d2 = np.asarray(x1) - c1, np.asarray(x2) - c2
        r2 = d1**2 + d2**2 + delta**2
        f = a * r2 ** (a / 2.0 - 1.0)
        return np.stack([f * d1, f * d2])

    def div(x1, x2):
        d1, d2 = np.asarray(x1) - c1, np.asarray(x2) - c2
        r2 = d1**2 + d2**2 + delta**2
        # Laplacian of (r2)^(a/2) in 2D
        return a * r2 ** (a / 2.0 - 1.0) * 2.0 + a * (a - 2.0) * r2 ** (a / 2.0 - 2.0) * (d1**2 + d2**2)

    return VectorField(value, div)


def corner_curl_field(exponent: float = 2.0 / 3.0, delta: float = 1e-2, corner=(0.0, 0.0)) -> VectorField:
    """curl(rho^a) for the same regularized corner function; divergence free."""
    g = corner_gradient_field(exponent, delta, corner)

    def value(x1, x2):
        v = g.value(x1, x2)
        return np.stack([v[1], -v[0]])

    return VectorField(value, lambda x1, x2: np.zeros(np.broadcast(np.asarray(x1), np.asarray(x2)).shape))
