"""Spread-out step kernel D on Z^d: construction, moments, Fourier data,
convolution powers and return-probability sums of the associated walk."""

import itertools
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import signal

from ._validation import CapExceeded, InvariantViolation, ValidationError, check_int, check_real

SUPPORT_CAP = 10**7


class DivergenceError(ArithmeticError):
    """Requested an infinite Green sum for a recurrent walk (d <= 2)."""


@dataclass(frozen=True)
class KernelD:
    """Finitely supported symmetric step distribution.

    ``mass`` is a dense array of shape (2L+1,)*d; index L along every axis
    is the origin.
    """

    d: int
    L: int
    mass: np.ndarray = field(repr=False)
    sup_constant: float = 0.0
    uniform: bool = False

    def __post_init__(self):
        self.mass.setflags(write=False)

    @property
    def beta(self):
        return float(self.L) ** (-self.d)

    @property
    def shape(self):
        return self.mass.shape

    @property
    def weights(self):
        """Offset -> mass for every offset with nonzero mass."""
        return {tuple(int(v) for v in x): float(self.mass[tuple(np.add(x, self.L))])
                for x in self.offsets()}

    def offsets(self):
        idx = np.argwhere(self.mass != 0)
        return [tuple(int(v) - self.L for v in row) for row in idx]

    def __call__(self, x):
        x = tuple(int(v) for v in np.atleast_1d(x))
        if len(x) != self.d or max(abs(v) for v in x) > self.L:
            return 0.0
        return float(self.mass[tuple(v + self.L for v in x)])

    def to_json(self):
        entries = [[list(x), m] for x, m in sorted(self.weights.items())]
        return json.dumps({"d": self.d, "L": self.L, "entries": entries})

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        d, L = int(obj["d"]), int(obj["L"])
        mass = np.zeros((2 * L + 1,) * d)
        for offset, m in obj["entries"]:
            if len(offset) != d:
                raise ValidationError("entries", f"offset {offset} has wrong dimension")
            mass[tuple(int(v) + L for v in offset)] = float(m)
        return kernel_from_array(mass)


def _symmetry_images(arr):
    d = arr.ndim
    for perm in itertools.permutations(range(d)):
        permuted = np.transpose(arr, perm)
        for flips in itertools.product((False, True), repeat=d):
            axes = tuple(i for i, f in enumerate(flips) if f)
            yield np.flip(permuted, axis=axes) if axes else permuted


def validate_kernel(mass, atol=1e-12):
    """Raise InvariantViolation unless ``mass`` is a valid kernel array."""
    d = mass.ndim
    if any(s != mass.shape[0] or s % 2 == 0 for s in mass.shape):
        raise InvariantViolation("kernel array must be a centred cube")
    L = mass.shape[0] // 2
    if np.any(mass < 0):
        raise InvariantViolation("negative kernel mass")
    if abs(mass[(L,) * d]) > atol:
        raise InvariantViolation("D(o) must vanish")
    if abs(mass.sum() - 1.0) > atol:
        raise InvariantViolation(f"kernel sums to {mass.sum()!r}")
    for img in _symmetry_images(mass):
        if np.max(np.abs(img - mass)) > atol:
            raise InvariantViolation("kernel is not invariant under lattice symmetries")


def kernel_from_array(mass, check=True):
    mass = np.array(mass, dtype=float)
    if check:
        validate_kernel(mass)
    d = mass.ndim
    L = mass.shape[0] // 2
    sup_c = float(mass.max()) * L**d
    return KernelD(d=d, L=L, mass=mass, sup_constant=sup_c)


def make_uniform_kernel(d, L, cap=SUPPORT_CAP):
    """Uniform distribution over the cube 0 < |x|_inf <= L."""
    d = check_int(d, "d", 1)
    L = check_int(L, "L", 1)
    size = (2 * L + 1) ** d
    if size > cap:
        raise CapExceeded(f"support size {size} exceeds cap {cap}")
    mass = np.full((2 * L + 1,) * d, 1.0 / (size - 1))
    mass[(L,) * d] = 0.0
    validate_kernel(mass)
    return KernelD(d=d, L=L, mass=mass, sup_constant=size / (size - 1), uniform=True)


def _offset_grids(d, R):
    ax = np.arange(-R, R + 1)
    return np.meshgrid(*([ax] * d), indexing="ij")


def squared_norm_array(d, R):
    """|x|^2 on the cube [-R, R]^d."""
    return sum(g.astype(float) ** 2 for g in _offset_grids(d, R))


@dataclass(frozen=True)
class KernelMoments:
    sigma2: float
    moment_2p2Delta: float
    Delta: float
    C1: float
    C2: float
    C_Delta: float


def kernel_moments(k, Delta=1.0):
    """sigma^2 = sum |x|^2 D(x) and sum |x|^(2+2 Delta) D(x)."""
    Delta = check_real(Delta, "Delta", low=0.0, low_open=True)
    r2 = squared_norm_array(k.d, k.L)
    sigma2 = float(np.sum(r2 * k.mass))
    mom = float(np.sum(r2 ** (1.0 + Delta) * k.mass))
    ratio = math.sqrt(sigma2) / k.L
    # a single kernel only pins sigma/L, so both measured constants coincide
    return KernelMoments(sigma2=sigma2, moment_2p2Delta=mom, Delta=Delta,
                         C1=ratio, C2=ratio, C_Delta=mom / k.L ** (2 + 2 * Delta))


def dual_axis(M):
    """Centred dual-torus axis 2 pi m / M, m = -M/2 .. M/2 - 1."""
    return 2.0 * np.pi * np.arange(-M // 2, M // 2) / M


def fourier_of_array(arr, ks_axis):
    """f_hat(k) = sum_x f(x) e^{i k.x} for a centred cube array, on the tensor
    grid ks_axis^d. Separable direct DFT, exact up to rounding."""
    d = arr.ndim
    R = arr.shape[0] // 2
    x = np.arange(-R, R + 1)
    phase = np.exp(1j * np.outer(ks_axis, x))  # (M, 2R+1)
    out = arr.astype(complex)
    for axis in range(d):
        out = np.tensordot(phase, out, axes=([1], [axis]))
        out = np.moveaxis(out, 0, axis)
    return out


def fourier_at(arr, kvecs):
    """f_hat at an explicit list of wave vectors, shape (n, d)."""
    kvecs = np.atleast_2d(np.asarray(kvecs, dtype=float))
    d = arr.ndim
    R = arr.shape[0] // 2
    grids = _offset_grids(d, R)
    flat = arr.reshape(-1)
    xs = np.stack([g.reshape(-1) for g in grids], axis=1).astype(float)
    nz = flat != 0
    phase = np.exp(1j * kvecs @ xs[nz].T)
    return phase @ flat[nz]


@dataclass(frozen=True)
class FourierGrid:
    d: int
    M: int
    values: np.ndarray = field(repr=False)
    a: np.ndarray = field(repr=False)
    a_ratio_min: float = float("nan")
    a_ratio_max: float = float("nan")
    eta: float = float("nan")

    @property
    def axis(self):
        return dual_axis(self.M)

    def k_squared(self):
        ax = self.axis
        return sum(g**2 for g in np.meshgrid(*([ax] * self.d), indexing="ij"))


def default_grid_side(d):
    return 64 if d <= 3 else 16


def fourier_transform(k, M=None):
    """D_hat on the M^d dual grid together with a(k) = 1 - D_hat(k)."""
    M = default_grid_side(k.d) if M is None else check_int(M, "M", 2)
    if M % 2:
        raise ValidationError("M", "grid side must be even")
    if M < 2 * (2 * k.L + 1):
        raise ValidationError("M", f"grid side {M} aliases a support of range {k.L}")
    vals = fourier_of_array(k.mass, dual_axis(M))
    a = 1.0 - vals.real
    ax = dual_axis(M)
    kk = sum(g**2 for g in np.meshgrid(*([ax] * k.d), indexing="ij"))
    kinf = np.max(np.abs(np.stack(np.meshgrid(*([ax] * k.d), indexing="ij"))), axis=0)
    sel = (kinf > 0) & (kinf <= 1.0 / k.L)
    if np.any(sel):
        ratio = a[sel] / (k.L**2 * kk[sel])
        rmin, rmax = float(ratio.min()), float(ratio.max())
    else:
        rmin = rmax = float("nan")
    eta = float(2.0 - a.max())
    return FourierGrid(d=k.d, M=M, values=vals, a=a, a_ratio_min=rmin, a_ratio_max=rmax, eta=eta)


def inverse_fourier(grid, R):
    """Recover a centred cube array of radius R from its values on the grid.
    Exact when 2R < M."""
    if 2 * R >= grid.M:
        raise ValidationError("R", "radius too large for the grid")
    ax = grid.axis
    x = np.arange(-R, R + 1)
    phase = np.exp(-1j * np.outer(x, ax))  # (2R+1, M)
    out = grid.values.astype(complex)
    for axis in range(grid.d):
        out = np.tensordot(phase, out, axes=([1], [axis]))
        out = np.moveaxis(out, 0, axis)
    return (out / grid.M**grid.d).real


def convolution_power(k, m, method="fft"):
    """D^{*m} as a centred cube array of radius mL."""
    m = check_int(m, "m", 0)
    R = m * k.L
    side = 2 * R + 1
    if side**k.d > SUPPORT_CAP:
        raise CapExceeded(f"convolution power needs {side**k.d} sites")
    if m == 0:
        out = np.zeros((side,) * k.d)
        out[(R,) * k.d] = 1.0
        return out
    if method == "direct":
        out = k.mass
        for _ in range(m - 1):
            out = signal.convolve(out, k.mass, mode="full", method="direct")
        return out
    if method != "fft":
        raise ValidationError("method", f"unknown method {method!r}")
    padded = np.zeros((side,) * k.d)
    sl = tuple(slice(0, 2 * k.L + 1) for _ in range(k.d))
    padded[sl] = k.mass
    spec = np.fft.rfftn(padded)
    out = np.fft.irfftn(spec**m, s=padded.shape, axes=tuple(range(k.d)))
    return out


@dataclass(frozen=True)
class GreensSum:
    value: float
    error: float
    mode: str
    partial_sum: float
    n_max: int
    tail_estimate: float
    quadrature: float = float("nan")
    quadrature_coarse: float = float("nan")
    extrapolated: float = float("nan")
    over_beta: float = float("nan")


def _uniform_return_probabilities(k, n_max):
    """Exact D^{*n}(o), n = 0..n_max, for the uniform cube kernel (rational arithmetic)."""
    L, d = k.L, k.d
    size = (2 * L + 1) ** d
    box = [1] * (2 * L + 1)
    poly = [1]
    c = [1]
    for _ in range(n_max):
        new = [0] * (len(poly) + 2 * L)
        for i, coef in enumerate(poly):
            for j in range(2 * L + 1):
                new[i + j] += coef * box[j]
        poly = new
        c.append(poly[len(poly) // 2])
    out = []
    for n in range(n_max + 1):
        acc = 0
        for j in range(n + 1):
            term = math.comb(n, j) * c[j] ** d
            acc += term if (n - j) % 2 == 0 else -term
        out.append(Fraction(acc, (size - 1) ** n))
    return out


def return_probabilities(k, n_max):
    """D^{*n}(o) for n = 0..n_max."""
    if k.uniform:
        return np.array([float(v) for v in _uniform_return_probabilities(k, n_max)])
    out = [1.0]
    cur = k.mass
    for n in range(1, n_max + 1):
        R = n * k.L
        out.append(float(cur[(R,) * k.d]))
        if n < n_max:
            if (2 * R + 2 * k.L + 1) ** k.d > SUPPORT_CAP:
                raise CapExceeded("direct convolution powers exceed the support cap")
            cur = signal.convolve(cur, k.mass, mode="full")
    return np.array(out)


def _power_tail(terms, n_max, d):
    """Tail sum beyond n_max assuming terms ~ c n^{-d/2}."""
    if d <= 2 or n_max < 4:
        return float("inf")
    c = terms[n_max] * n_max ** (d / 2.0)
    return float(c * (n_max + 0.5) ** (1.0 - d / 2.0) / (d / 2.0 - 1.0))


def _greens_quadrature(k, M):
    vals = fourier_of_array(k.mass, dual_axis(M)).real
    zero = (M // 2,) * k.d
    num = vals**2
    den = 1.0 - vals
    den[zero] = 1.0
    integrand = num / den
    integrand[zero] = 0.0
    return float(integrand.sum() / M**k.d)


def rw_greens_sum(k, n_max=64, tail_mode="fourier-integral", M=None):
    """sum_{n >= 2} D^{*n}(o): grid quadrature of D_hat^2/(1 - D_hat), or the
    partial sum up to n_max."""
    n_max = check_int(n_max, "n_max", 2)
    if tail_mode not in ("fourier-integral", "truncate"):
        raise ValidationError("tail_mode", f"unknown mode {tail_mode!r}")
    terms = return_probabilities(k, n_max)
    partial = float(np.sum(terms[2:]))
    tail = _power_tail(terms, n_max, k.d)
    if tail_mode == "truncate":
        err = tail if np.isfinite(tail) else float("nan")
        return GreensSum(value=partial, error=err, mode=tail_mode, partial_sum=partial,
                         n_max=n_max, tail_estimate=tail, over_beta=partial / k.beta)
    if k.d <= 2:
        raise DivergenceError(f"the walk is recurrent in d={k.d}; the infinite sum diverges")
    M = default_grid_side(k.d) if M is None else check_int(M, "M", 4)
    q = _greens_quadrature(k, M)
    qc = _greens_quadrature(k, M // 2)
    err = abs(q - qc)
    # the k = 0 cell costs O(M^{2-d}); one Richardson step removes it
    extra = q + (q - qc) / (2.0 ** (k.d - 2) - 1.0)
    return GreensSum(value=q, error=err, mode=tail_mode, partial_sum=partial, n_max=n_max,
                     tail_estimate=tail, quadrature=q, quadrature_coarse=qc, extrapolated=extra,
                     over_beta=q / k.beta)
