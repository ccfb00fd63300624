"""Dual numbers for forward-mode differentiation.

A :class:`Dual` carries a value and its directional derivative along one
probe direction. ``real`` and ``prime`` may be Python floats or numpy arrays
of the same shape, in which case every operation acts elementwise; the
renderer relies on this to push a whole tangent vector through one pass.
"""

from __future__ import annotations

import numpy as np


class Dual:
    """Value/tangent pair with overloaded arithmetic (a + b*eps, eps^2 = 0)."""

    __slots__ = ("real", "prime")
    # ndarray (op) Dual must defer to the reflected Dual operator
    __array_ufunc__ = None

    def __init__(self, real, prime=0.0):
        self.real = real
        self.prime = prime

    @classmethod
    def seed(cls, real, direction):
        return cls(np.asarray(real, dtype=np.float64), np.asarray(direction, dtype=np.float64))

    def __repr__(self) -> str:
        return f"Dual({self.real!r}, {self.prime!r})"

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.real + other.real, self.prime + other.prime)
        return Dual(self.real + other, self.prime)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.real - other.real, self.prime - other.prime)
        return Dual(self.real - other, self.prime)

    def __rsub__(self, other):
        return Dual(other - self.real, -self.prime)

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(self.real * other.real, self.real * other.prime + self.prime * other.real)
        return Dual(self.real * other, self.prime * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            real = self.real / other.real
            return Dual(real, (self.prime - real * other.prime) / other.real)
        return Dual(self.real / other, self.prime / other)

    def __rtruediv__(self, other):
        real = other / self.real
        return Dual(real, -real * self.prime / self.real)

    def __neg__(self):
        return Dual(-self.real, -self.prime)

    def __pow__(self, exponent):
        if isinstance(exponent, Dual):
            raise TypeError("dual exponents are not supported")
        if exponent == 2:
            return Dual(self.real * self.real, 2.0 * self.real * self.prime)
        return Dual(self.real**exponent, exponent * self.real ** (exponent - 1) * self.prime)

    def __getitem__(self, index):
        return Dual(self.real[index], _take(self.prime, index))

    def exp(self):
        e = np.exp(self.real)
        return Dual(e, e * self.prime)

    def log(self):
        return Dual(np.log(self.real), self.prime / self.real)

    def sqrt(self):
        s = np.sqrt(self.real)
        return Dual(s, 0.5 * self.prime / s)

    @property
    def shape(self):
        return np.shape(self.real)


DualScalar = Dual


def _take(prime, index):
    if np.ndim(prime) == 0:
        return prime
    return prime[index]


def real(x):
    """Value part of ``x`` whether or not it is dual."""
    return x.real if isinstance(x, Dual) else x


def tangent(x):
    """Derivative part of ``x``; zero for plain values."""
    if isinstance(x, Dual):
        return np.broadcast_to(x.prime, np.shape(x.real))
    return np.zeros_like(np.asarray(x, dtype=np.float64))


def exp(x):
    return x.exp() if isinstance(x, Dual) else np.exp(x)


def sqrt(x):
    return x.sqrt() if isinstance(x, Dual) else np.sqrt(x)


def log(x):
    return x.log() if isinstance(x, Dual) else np.log(x)


def where(mask, a, b):
    """Elementwise select; the mask is a fixed (non-differentiated) gate."""
    if isinstance(a, Dual) or isinstance(b, Dual):
        return Dual(np.where(mask, real(a), real(b)), np.where(mask, tangent(a), tangent(b)))
    return np.where(mask, a, b)


def stack(items, axis=-1):
    if any(isinstance(it, Dual) for it in items):
        shape = np.broadcast_shapes(*(np.shape(real(it)) for it in items))
        reals = [np.broadcast_to(real(it), shape) for it in items]
        primes = [np.broadcast_to(tangent(it), shape) for it in items]
        return Dual(np.stack(reals, axis=axis), np.stack(primes, axis=axis))
    return np.stack(items, axis=axis)


def zeros_like(x):
    if isinstance(x, Dual):
        z = np.zeros_like(x.real)
        return Dual(z, z.copy())
    return np.zeros_like(x)
