"""Radial Bessel and spherical Fourier-Bessel bases with a smooth cutoff envelope.

The numpy-facing functions (:func:`radial_basis`, :func:`spherical_basis`, ...)
evaluate single points or arrays.  The ``*_t`` variants take
:class:`~dimekit.diffcore.Tensor` inputs so the model can differentiate the
features with respect to atomic positions.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import diffcore as dc
from .errors import DegenerateGeometryError, InputError

__all__ = [
    "BasisConfig",
    "envelope",
    "radial_basis",
    "bessel_roots",
    "spherical_bessel",
    "spherical_basis",
    "sbf_normalizers",
    "envelope_t",
    "radial_basis_t",
    "bessel_radial_t",
    "angular_t",
    "spherical_basis_t",
]


@dataclass(frozen=True)
class BasisConfig:
    num_radial: int = 6
    num_spherical: int = 7
    cutoff: float = 5.0
    envelope_exponent: int = 6

    def __post_init__(self):
        if self.num_radial < 1 or self.num_spherical < 1:
            raise InputError("basis sizes must be >= 1")
        if not self.cutoff > 0:
            raise InputError("cutoff must be positive")
        if self.envelope_exponent < 1:
            raise InputError("envelope exponent must be >= 1")

    @property
    def sbf_dim(self) -> int:
        return self.num_radial * self.num_spherical


# ---------------------------------------------------------------------------
# spherical Bessel functions of the first kind

_SERIES_BELOW = 1.0


def _jl_series(l: np.ndarray, x: np.ndarray, terms: int = 24) -> np.ndarray:
    l = np.broadcast_to(l, x.shape).astype(np.float64)
    dfact = np.ones_like(x)
    for m in range(1, int(l.max()) + 1 if l.size else 1):
        dfact = np.where(l >= m, dfact * (2 * m + 1), dfact)
    term = np.ones_like(x)
    total = np.ones_like(x)
    half_x2 = -0.5 * x * x
    for k in range(1, terms):
        term = term * half_x2 / (k * (2 * l + 2 * k + 1))
        total = total + term
    return x**l / dfact * total


def _jl_upward(lmax: int, x: np.ndarray) -> list[np.ndarray]:
    s, c = np.sin(x), np.cos(x)
    out = [s / x]
    if lmax >= 1:
        out.append(s / (x * x) - c / x)
    for m in range(1, lmax):
        out.append((2 * m + 1) / x * out[m] - out[m - 1])
    return out


def spherical_bessel(l, x) -> np.ndarray:
    """``j_l(x)`` for integer ``l >= 0`` (broadcast against ``x``).

    Upward recurrence from ``j_0, j_1``; for ``x < max(1, l)`` the power
    series is used instead because the recurrence loses digits there.
    """
    x = np.asarray(x, dtype=np.float64)
    l = np.asarray(l, dtype=np.int64)
    x, l = np.broadcast_arrays(x, l)
    out = np.empty(x.shape)
    small = np.abs(x) < np.maximum(_SERIES_BELOW, l)
    if np.any(small):
        out[small] = _jl_series(l[small], x[small])
    big = ~small
    if np.any(big):
        xs, ls = x[big], l[big]
        table = _jl_upward(int(ls.max()), xs)
        out[big] = np.choose(ls, table) if len(table) > 1 else table[0]
    return out


def _jl_deriv(l: np.ndarray, x: np.ndarray) -> np.ndarray:
    jl = spherical_bessel(l, x)
    j1 = -spherical_bessel(1, x)
    lower = spherical_bessel(np.maximum(l - 1, 0), x)
    return np.where(l == 0, j1, lower - (l + 1) / x * jl)


def _jl_deriv2(l, x):
    # from the spherical Bessel ODE
    return -2.0 / x * _jl_deriv(l, x) - (1.0 - l * (l + 1) / (x * x)) * spherical_bessel(l, x)


def _jl_deriv3(l, x):
    j, d1, d2 = spherical_bessel(l, x), _jl_deriv(l, x), _jl_deriv2(l, x)
    ll = l * (l + 1)
    return -2.0 / x * d2 + 2.0 / (x * x) * d1 - (1.0 - ll / (x * x)) * d1 - 2.0 * ll / x**3 * j


def bessel_roots(l: int, count: int) -> np.ndarray:
    """First ``count`` positive zeros of ``j_l``, by bisection."""
    if l < 0 or count < 1:
        raise InputError("need l >= 0 and count >= 1")
    return _root_table(l + 1, count)[l].copy()


@lru_cache(maxsize=None)
def _root_table(num_l: int, count: int) -> np.ndarray:
    # zeros of j_l interlace those of j_{l-1}, so each row brackets the next
    n0 = count + num_l
    prev = np.pi * np.arange(1, n0 + 1, dtype=np.float64)
    rows = [prev[:count]]
    for l in range(1, num_l):
        lo, hi = prev[:-1].copy(), prev[1:].copy()
        flo = spherical_bessel(l, lo)
        while np.any(hi - lo > 1e-13):
            mid = 0.5 * (lo + hi)
            fm = spherical_bessel(l, mid)
            same = np.sign(fm) == np.sign(flo)
            lo = np.where(same, mid, lo)
            flo = np.where(same, fm, flo)
            hi = np.where(same, hi, mid)
            if np.all(mid == lo) and np.all(mid == hi):
                break
        prev = 0.5 * (lo + hi)
        rows.append(prev[:count])
    table = np.array(rows)
    table.setflags(write=False)
    return table


@lru_cache(maxsize=None)
def sbf_normalizers(num_spherical: int, num_radial: int, cutoff: float) -> np.ndarray:
    """Per-(l, n) factors giving each radial mode unit L2 norm on the ball of radius ``cutoff``."""
    z = _root_table(num_spherical, num_radial)
    l = np.arange(num_spherical)[:, None]
    norm = np.sqrt(2.0 / cutoff**3) / np.abs(spherical_bessel(l + 1, z))
    norm.setflags(write=False)
    return norm


# ---------------------------------------------------------------------------
# differentiable building blocks


def envelope_t(t: dc.Tensor, p: int) -> dc.Tensor:
    """Polynomial cutoff ``u(t)``; ``u(1) = u'(1) = 0`` and zero beyond."""
    a = -(p + 1) * (p + 2) / 2.0
    b = float(p * (p + 2))
    c = -p * (p + 1) / 2.0
    tp = dc.power(t, p)
    poly = 1.0 + tp * (a + t * (b + c * t))
    inside = dc.Tensor((t.data < 1.0).astype(t.dtype))
    return poly * inside


def radial_basis_t(d: dc.Tensor, cfg: BasisConfig, use_envelope: bool = True) -> dc.Tensor:
    """Sine-Bessel radial features, shape ``(n_edges, num_radial)``."""
    c = cfg.cutoff
    freq = dc.Tensor(np.arange(1, cfg.num_radial + 1, dtype=np.float64) * np.pi / c)
    d2 = dc.reshape(d, (-1, 1))
    raw = dc.sin(d2 * freq) / d2 * np.sqrt(2.0 / c)
    if not use_envelope:
        return raw
    return raw * envelope_t(d2 * (1.0 / c), cfg.envelope_exponent)


def bessel_radial_t(d: dc.Tensor, cfg: BasisConfig) -> dc.Tensor:
    """Normalised ``j_l(z_ln d / c) * u(d / c)``, shape ``(n, num_spherical, num_radial)``."""
    c = cfg.cutoff
    z = _root_table(cfg.num_spherical, cfg.num_radial)
    lgrid = np.arange(cfg.num_spherical)[None, :, None]
    tower = [
        lambda x: spherical_bessel(lgrid, x),
        lambda x: _jl_deriv(lgrid, x),
        lambda x: _jl_deriv2(lgrid, x),
        lambda x: _jl_deriv3(lgrid, x),
    ]
    d3 = dc.reshape(d, (-1, 1, 1))
    x = d3 * dc.Tensor(z[None] / c)
    jl = dc.elementwise(x, tower)
    env = envelope_t(d3 * (1.0 / c), cfg.envelope_exponent)
    norm = sbf_normalizers(cfg.num_spherical, cfg.num_radial, c)
    return jl * dc.Tensor(norm[None]) * env


def angular_t(cos_angle: dc.Tensor, num_spherical: int) -> dc.Tensor:
    """Order-zero spherical harmonics ``Y_l0`` as functions of ``cos(angle)``, shape ``(n, L)``."""
    x = dc.reshape(cos_angle, (-1, 1))
    cols = [x * 0.0 + 1.0]
    if num_spherical > 1:
        cols.append(x)
    for l in range(1, num_spherical - 1):
        cols.append((x * cols[l] * (2 * l + 1) - cols[l - 1] * l) * (1.0 / (l + 1)))
    pl = dc.concat(cols, axis=1)
    scale = np.sqrt((2 * np.arange(num_spherical) + 1) / (4 * np.pi))
    return pl * dc.Tensor(scale)


def spherical_basis_t(
    radial: dc.Tensor, angular: dc.Tensor, idx_kj, cfg: BasisConfig
) -> dc.Tensor:
    """Combine per-edge radial parts with per-triplet angular parts.

    ``radial`` comes from :func:`bessel_radial_t` evaluated on every edge;
    the triplet uses the radial part of its ``k -> j`` edge.  The result has
    shape ``(n_triplets, num_spherical * num_radial)`` with ``l`` major.
    """
    per_trip = dc.gather(radial, idx_kj)
    ang = dc.reshape(angular, (-1, cfg.num_spherical, 1))
    return dc.reshape(per_trip * ang, (-1, cfg.sbf_dim))


# ---------------------------------------------------------------------------
# numpy front ends


def _check_distance(d: np.ndarray) -> None:
    if np.any(~np.isfinite(d)) or np.any(d <= 0):
        raise DegenerateGeometryError("distances must be positive and finite")


def envelope(t, p: int = 6):
    """Evaluate the cutoff envelope at ``t = d / cutoff`` (scalar or array)."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise InputError("envelope argument must be >= 0")
    with dc.no_grad():
        out = envelope_t(dc.Tensor(t), p).data
    return float(out) if out.ndim == 0 else out


def radial_basis(d, cfg: BasisConfig = BasisConfig(), use_envelope: bool = True) -> np.ndarray:
    """Radial features for distance(s) ``d``; shape ``(num_radial,)`` or ``(n, num_radial)``.

    ``use_envelope=False`` returns the bare sine modes, which are orthonormal
    on ``[0, cutoff]`` under the weight ``d^2``.
    """
    arr = np.asarray(d, dtype=np.float64)
    _check_distance(arr)
    with dc.no_grad():
        out = radial_basis_t(dc.Tensor(arr.reshape(-1)), cfg, use_envelope).data
    return out[0] if arr.ndim == 0 else out


def spherical_basis(d, alpha, cfg: BasisConfig = BasisConfig()) -> np.ndarray:
    """Spherical Fourier-Bessel features for distance ``d`` and angle ``alpha``.

    Entry ``l * num_radial + n`` holds mode ``(l, n)``.
    """
    d_arr = np.asarray(d, dtype=np.float64)
    a_arr = np.asarray(alpha, dtype=np.float64)
    _check_distance(d_arr)
    if np.any(a_arr < 0) or np.any(a_arr > np.pi):
        raise InputError("angle must lie in [0, pi]")
    d_flat, a_flat = np.broadcast_arrays(d_arr.reshape(-1), a_arr.reshape(-1))
    with dc.no_grad():
        rad = bessel_radial_t(dc.Tensor(d_flat), cfg)
        ang = angular_t(dc.Tensor(np.cos(a_flat)), cfg.num_spherical)
        out = spherical_basis_t(rad, ang, np.arange(len(d_flat)), cfg).data
    return out[0] if d_arr.ndim == 0 and a_arr.ndim == 0 else out
