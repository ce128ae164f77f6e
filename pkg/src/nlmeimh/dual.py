"""Forward-mode automatic differentiation with vector-valued dual numbers.

A :class:`Dual` carries a primal array ``val`` of shape ``S`` and a tangent
array ``der`` of shape ``S + (k,)`` holding the derivatives with respect to
``k`` seed directions at once, so a single sweep through a structural model
yields its full Jacobian.

Model code stays generic by calling the module-level functions (``exp``,
``log``, ...) which dispatch on plain floats/arrays and on duals alike.
"""

from __future__ import annotations

import numpy as np
from scipy import special


class Dual:
    __slots__ = ("val", "der")
    # make numpy hand mixed operations back to us instead of building object arrays
    __array_ufunc__ = None

    def __init__(self, val, der):
        self.val = np.asarray(val, dtype=float)
        self.der = np.asarray(der, dtype=float)

    @classmethod
    def variables(cls, x) -> "Dual":
        """Seed a vector of independent variables (tangent = identity)."""
        x = np.asarray(x, dtype=float)
        return cls(x, np.eye(x.size).reshape(x.shape + (x.size,)))

    @property
    def shape(self):
        return self.val.shape

    @property
    def nvar(self) -> int:
        return self.der.shape[-1]

    def __len__(self):
        return len(self.val)

    def __getitem__(self, idx):
        return Dual(self.val[idx], self.der[idx])

    def __repr__(self):
        return f"Dual(val={self.val!r}, der={self.der!r})"

    # ---- arithmetic -------------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val + other.val, self.der + other.der)
        other = np.asarray(other, dtype=float)
        return Dual(self.val + other, np.broadcast_to(self.der, np.broadcast_shapes(
            self.der.shape, other.shape + (self.nvar,))))

    __radd__ = __add__

    def __neg__(self):
        return Dual(-self.val, -self.der)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val * other.val,
                        self.der * other.val[..., None] + other.der * self.val[..., None])
        other = np.asarray(other, dtype=float)
        return Dual(self.val * other, self.der * other[..., None])

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            inv = 1.0 / other.val
            val = self.val * inv
            return Dual(val, (self.der - other.der * val[..., None]) * inv[..., None])
        other = np.asarray(other, dtype=float)
        return Dual(self.val / other, self.der / other[..., None])

    def __rtruediv__(self, other):
        other = np.asarray(other, dtype=float)
        inv = 1.0 / self.val
        val = other * inv
        return Dual(val, -self.der * (val * inv)[..., None])

    def __pow__(self, power):
        if isinstance(power, Dual):
            return exp(power * log(self))
        power = float(power)
        val = self.val ** power
        return Dual(val, self.der * (power * self.val ** (power - 1.0))[..., None])

    def __rpow__(self, base):
        return exp(self * np.log(base))

    def __matmul__(self, other):
        # only (vector dual) @ matrix is needed
        other = np.asarray(other, dtype=float)
        return Dual(self.val @ other, np.einsum("...ik,ij->...jk", self.der, other))

    def __rmatmul__(self, other):
        other = np.asarray(other, dtype=float)
        return Dual(other @ self.val, np.einsum("ij,...jk->...ik", other, self.der))


def value(x):
    """Primal part of ``x`` (identity for non-duals)."""
    return x.val if isinstance(x, Dual) else x


def _unary(x, f, df):
    if isinstance(x, Dual):
        v = f(x.val)
        return Dual(v, x.der * df(x.val, v)[..., None])
    return f(x)


def exp(x):
    return _unary(x, np.exp, lambda a, v: v)


def expm1(x):
    return _unary(x, np.expm1, lambda a, v: v + 1.0)


def log(x):
    return _unary(x, np.log, lambda a, v: 1.0 / a)


def sqrt(x):
    return _unary(x, np.sqrt, lambda a, v: 0.5 / v)


def square(x):
    return _unary(x, np.square, lambda a, v: 2.0 * a)


def sinh(x):
    return _unary(x, np.sinh, lambda a, v: np.cosh(a))


def norm_cdf(x):
    return _unary(x, special.ndtr, lambda a, v: np.exp(-0.5 * a * a) / np.sqrt(2 * np.pi))


def sum(x, axis=None):
    if isinstance(x, Dual):
        if axis is None:
            axes = tuple(range(x.val.ndim))
            return Dual(x.val.sum(), x.der.sum(axis=axes))
        axis = axis % x.val.ndim
        return Dual(x.val.sum(axis=axis), x.der.sum(axis=axis))
    return np.sum(x, axis=axis)


def stack(items):
    """Stack scalars/duals into a 1-D vector (dual if any item is dual)."""
    duals = [it for it in items if isinstance(it, Dual)]
    if not duals:
        return np.array([float(it) for it in items])
    k = duals[0].nvar
    vals = np.array([float(value(it)) for it in items])
    ders = np.zeros((len(items), k))
    for i, it in enumerate(items):
        if isinstance(it, Dual):
            ders[i] = it.der
    return Dual(vals, ders)


def jacobian(x):
    """Tangent block of a dual (zeros are not inferred for plain arrays)."""
    if not isinstance(x, Dual):
        raise TypeError("jacobian() needs a Dual result")
    return x.der
