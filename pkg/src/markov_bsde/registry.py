"""Named drivers, delay forms and terminal forms for configuration files."""

from __future__ import annotations

import math

import numpy as np

from .abse import AnticipatedDriver, DelaySpec, TerminalSegment
from .chain import RateMatrix
from .compare import family_driver, shifted_driver
from .errors import ValidationError
from .sdde import SDDECoefficients, row_lipschitz


def _per_state(value, n: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(n, float(arr))
    if arr.shape != (n,):
        raise ValidationError(f"{name} must be a scalar or a length-{n} list")
    return arr


def _rows(value, n: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.shape == (n,):
        return np.tile(arr, (n, 1))
    if arr.shape != (n, n):
        raise ValidationError(f"{name} must be a length-{n} row or an {n}x{n} array of rows")
    return arr


def _params(block: dict, allowed: set, name: str) -> dict:
    params = dict(block.get("params", {}))
    extra = set(params) - allowed
    if extra:
        raise ValidationError(f"driver '{name}' does not take parameters {sorted(extra)}")
    return params


# --------------------------------------------------------------------------
# drivers


def linear_coefficients(params: dict, n: int, theta: float) -> SDDECoefficients:
    """``a, mu, b, sigma, phi`` of the linear driver as SDDE coefficients."""
    return SDDECoefficients.constant(
        _per_state(params.get("a", 0.0), n, "a"), _per_state(params.get("mu", 0.0), n, "mu"),
        _rows(params.get("b", np.zeros(n)), n, "b"), _rows(params.get("sigma", np.zeros(n)), n, "sigma"),
        _per_state(params.get("phi", 0.0), n, "phi"), theta)


def _linear(params: dict, A: RateMatrix) -> AnticipatedDriver:
    n = A.n_states
    a = _per_state(params.get("a", 0.0), n, "a")
    mu = _per_state(params.get("mu", 0.0), n, "mu")
    b = _rows(params.get("b", np.zeros(n)), n, "b")
    sg = _rows(params.get("sigma", np.zeros(n)), n, "sigma")
    phi = _per_state(params.get("phi", 0.0), n, "phi")
    c1 = float(max(np.abs(a).max(), np.abs(mu).max()))
    c2 = max(row_lipschitz(b[None], A), row_lipschitz(sg[None], A))

    def f(t, y, z, ya, za, i):
        return a[i] * y + mu[i] * ya + float(b[i] @ z) + float(sg[i] @ za) + phi[i]

    return AnticipatedDriver(f, c1, c2)


def _zero(params: dict, A: RateMatrix) -> AnticipatedDriver:
    return AnticipatedDriver(lambda t, y, z, ya, za, i: 0.0, 0.0, 0.0)


def _nonlinear(params: dict, A: RateMatrix) -> AnticipatedDriver:
    n = A.n_states
    return family_driver(A, float(params.get("k", 0.0)), float(params.get("kappa", 0.0)),
                         float(params.get("mu", 0.0)), _per_state(params.get("amp", 0.0), n, "amp"),
                         float(params.get("freq", 1.0)))


def _shifted(params: dict, A: RateMatrix) -> AnticipatedDriver:
    if "base" not in params:
        raise ValidationError("driver 'shifted' needs a 'base' driver block")
    lift = float(params.get("lift", 0.0))
    if lift < 0:
        raise ValidationError("driver 'shifted' needs lift >= 0")
    return shifted_driver(build_driver(params["base"], A), lift, float(params.get("freq", 1.0)))


DRIVERS = {
    "zero": (_zero, set()),
    "linear": (_linear, {"a", "mu", "b", "sigma", "phi"}),
    "nonlinear": (_nonlinear, {"k", "kappa", "mu", "amp", "freq"}),
    "shifted": (_shifted, {"base", "lift", "freq"}),
}


def build_driver(block: dict, A: RateMatrix) -> AnticipatedDriver:
    name = block.get("name")
    if name not in DRIVERS:
        raise ValidationError(f"unknown driver '{name}'; known: {sorted(DRIVERS)}")
    make, allowed = DRIVERS[name]
    return make(_params(block, allowed, name), A)


# --------------------------------------------------------------------------
# delays


def _delay_form(block: dict, label: str):
    form = block.get("form")
    if form == "constant":
        d = float(block.get("value", 0.0))
        if d < 0 or not math.isfinite(d):
            raise ValidationError(f"{label}: constant delay must be finite and >= 0")
        return (lambda t: d), d, 1.0
    if form == "affine-capped":
        spec = DelaySpec.affine_capped(float(block.get("intercept", 0.0)), float(block.get("slope", 0.0)),
                                       float(block["cap"]))
        return spec.delta, spec.K, spec.L
    raise ValidationError(f"{label}: unknown delay form '{form}' (constant, affine-capped)")


def build_delays(block: dict) -> DelaySpec:
    if "delta" not in block:
        raise ValidationError("delays block needs 'delta'")
    fd, kd, ld = _delay_form(block["delta"], "delta")
    fz, kz, lz = _delay_form(block.get("zeta", block["delta"]), "zeta")
    return DelaySpec(fd, fz, max(kd, kz), max(ld, lz))


# --------------------------------------------------------------------------
# terminal data


def _xi_form(block: dict, n: int):
    form = block.get("form")
    if form == "constant":
        v = _per_state(block["values"], n, "xi values")
        return lambda t, i: v[i]
    if form == "affine":
        lv = _per_state(block["level"], n, "xi level")
        sl = _per_state(block.get("slope", 0.0), n, "xi slope")
        return lambda t, i: lv[i] + sl[i] * t
    raise ValidationError(f"unknown xi form '{form}' (constant, affine)")


def _eta_form(block: dict, n: int):
    form = block.get("form", "zero")
    if form == "zero":
        zeros = np.zeros(n)
        return lambda t, i: zeros
    if form == "constant":
        v = _rows(block["values"], n, "eta values")
        return lambda t, i: v[i]
    if form == "affine":
        lv = _rows(block["level"], n, "eta level")
        sl = _rows(block.get("slope", np.zeros(n)), n, "eta slope")
        return lambda t, i: lv[i] + sl[i] * t
    raise ValidationError(f"unknown eta form '{form}' (zero, constant, affine)")


def build_terminal(block: dict, n: int) -> TerminalSegment:
    if "xi" not in block:
        raise ValidationError("terminal block needs 'xi'")
    return TerminalSegment(_xi_form(block["xi"], n), _eta_form(block.get("eta", {"form": "zero"}), n))
