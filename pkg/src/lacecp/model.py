"""Model parameters and the space-time field carrier shared by every module."""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import signal

from ._validation import InvariantViolation, ValidationError, check_int, check_real
from .kernel import KernelD, fourier_at, fourier_of_array, squared_norm_array


@dataclass(frozen=True)
class ModelParams:
    """(kernel, eps, lambda) plus the horizon n_max and window half-width R.

    R defaults to L * n_max, the smallest window that no cluster can leave.
    """

    kernel: KernelD
    eps: float
    lam: float
    n_max: int
    R: int = -1

    def __post_init__(self):
        check_real(self.eps, "eps", low=0.0, high=1.0, low_open=True)
        check_real(self.lam, "lambda", low=0.0)
        check_int(self.n_max, "n_max", 0)
        if self.R < 0:
            object.__setattr__(self, "R", self.kernel.L * self.n_max)
        if self.lam * self.eps * float(self.kernel.mass.max()) > 1.0 + 1e-15:
            raise ValidationError("lambda", "lambda*eps*max D exceeds 1, bond probabilities invalid")

    @property
    def d(self):
        return self.kernel.d

    @property
    def L(self):
        return self.kernel.L

    @property
    def window_ok(self):
        return self.R >= self.kernel.L * self.n_max

    def require_window(self):
        if not self.window_ok:
            raise InvariantViolation(
                f"window R={self.R} < L*n_max={self.kernel.L * self.n_max}")

    def with_(self, **kw):
        return replace(self, **kw)

    def p_array(self):
        """p_eps on [-L, L]^d: 1 - eps at the origin, lambda eps D elsewhere."""
        p = self.lam * self.eps * np.array(self.kernel.mass)
        p[(self.kernel.L,) * self.d] = 1.0 - self.eps
        return p

    def p_hat0(self):
        return 1.0 - self.eps + self.lam * self.eps

    def p_hat(self, kvecs):
        return fourier_at(self.p_array(), kvecs).real

    def lam_eps_D(self):
        return self.lam * self.eps * np.array(self.kernel.mass)


def bond_probability(params, offset):
    """Occupation probability of the bond from (x, t) to (x + offset, t + eps)."""
    offset = tuple(int(v) for v in np.atleast_1d(offset))
    if len(offset) != params.d:
        raise ValidationError("offset", f"expected {params.d} coordinates")
    if all(v == 0 for v in offset):
        return 1.0 - params.eps
    return params.lam * params.eps * params.kernel(offset)


def crop_center(arr, R):
    """Central cube of radius R from a centred cube array (zero padded if smaller)."""
    r = arr.shape[0] // 2
    d = arr.ndim
    if r >= R:
        sl = tuple(slice(r - R, r + R + 1) for _ in range(d))
        return arr[sl]
    out = np.zeros((2 * R + 1,) * d, dtype=arr.dtype)
    sl = tuple(slice(R - r, R + r + 1) for _ in range(d))
    out[sl] = arr
    return out


def wconv(f, g, R=None):
    """(f * g)(x) = sum_y f(y) g(x - y) restricted to the radius-R cube.

    Both inputs are centred cubes; R defaults to f's radius.
    """
    if R is None:
        R = f.shape[0] // 2
    if not f.any() or not g.any():
        return np.zeros((2 * R + 1,) * f.ndim)
    full = signal.convolve(f, g, mode="full")
    return crop_center(full, R)


@dataclass
class SpaceTimeField:
    """Real function of (time slice n, offset x), n = 0..n_max, |x|_inf <= R."""

    d: int
    eps: float
    n_max: int
    R: int
    values: np.ndarray = field(repr=False)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        want = (self.n_max + 1,) + (2 * self.R + 1,) * self.d
        if self.values.shape != want:
            raise ValidationError("values", f"shape {self.values.shape} != {want}")

    @classmethod
    def zeros(cls, d, eps, n_max, R, **meta):
        return cls(d, eps, n_max, R, np.zeros((n_max + 1,) + (2 * R + 1,) * d), dict(meta))

    @classmethod
    def like(cls, other, values=None, **meta):
        vals = np.zeros_like(other.values) if values is None else values
        return cls(other.d, other.eps, other.n_max, other.R, vals, dict(meta))

    @classmethod
    def delta(cls, d, eps, n_max, R, **meta):
        f = cls.zeros(d, eps, n_max, R, **meta)
        f.values[(0,) + (R,) * d] = 1.0
        return f

    @property
    def origin(self):
        return (self.R,) * self.d

    def at(self, n, x):
        x = tuple(int(v) for v in np.atleast_1d(x))
        if any(abs(v) > self.R for v in x) or not 0 <= n <= self.n_max:
            return 0.0
        return float(self.values[(n,) + tuple(v + self.R for v in x)])

    def offsets(self):
        ax = np.arange(-self.R, self.R + 1)
        grids = np.meshgrid(*([ax] * self.d), indexing="ij")
        return np.stack([g.reshape(-1) for g in grids], axis=1)

    def totals(self):
        """f_hat_n(0) for every slice."""
        return self.values.reshape(self.n_max + 1, -1).sum(axis=1)

    def second_moments(self):
        """sum_x |x|^2 f_n(x) for every slice."""
        r2 = squared_norm_array(self.d, self.R)
        return (self.values * r2).reshape(self.n_max + 1, -1).sum(axis=1)

    def sup(self):
        return np.abs(self.values).reshape(self.n_max + 1, -1).max(axis=1)

    def hat(self, kvecs, slices=None):
        """f_hat_n(k) at explicit wave vectors; array (n_slices, n_k)."""
        slices = range(self.n_max + 1) if slices is None else slices
        return np.array([fourier_at(self.values[n], kvecs) for n in slices])

    def hat_grid(self, ks_axis):
        """f_hat_n on the tensor grid ks_axis^d, shape (n_max+1, M, ..., M)."""
        return np.array([fourier_of_array(self.values[n], ks_axis) for n in range(self.n_max + 1)])

    def truncated(self, n_max):
        return SpaceTimeField(self.d, self.eps, n_max, self.R, self.values[: n_max + 1].copy(),
                              dict(self.meta))

    def check_finite(self):
        if not np.all(np.isfinite(self.values)):
            raise InvariantViolation("field has non-finite entries")
