"""Small argument checks shared by the public entry points."""

import numbers

import numpy as np


class ValidationError(ValueError):
    """Bad user input. ``key`` names the offending argument or config key."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


class CapExceeded(RuntimeError):
    """A configured size cap (states, bonds, support) would be exceeded."""


class InvariantViolation(RuntimeError):
    """A computed object failed one of its structural invariants."""


def check_int(value, key, minimum=None):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise ValidationError(key, f"expected an integer, got {value!r}")
    value = int(value)
    if minimum is not None and value < minimum:
        raise ValidationError(key, f"must be >= {minimum}, got {value}")
    return value


def check_real(value, key, low=None, high=None, low_open=False):
    if isinstance(value, bool) or not isinstance(value, numbers.Real):
        raise ValidationError(key, f"expected a real number, got {value!r}")
    value = float(value)
    if not np.isfinite(value):
        raise ValidationError(key, "must be finite")
    if low is not None:
        if low_open and value <= low:
            raise ValidationError(key, f"must be > {low}, got {value}")
        if not low_open and value < low:
            raise ValidationError(key, f"must be >= {low}, got {value}")
    if high is not None and value > high:
        raise ValidationError(key, f"must be <= {high}, got {value}")
    return value


def check_finite_array(arr, key):
    arr = np.asarray(arr, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(key, "array contains non-finite entries")
    return arr
