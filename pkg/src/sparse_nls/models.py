"""Nonlinear models, datasets and residual/Jacobian evaluation.

A model maps ``(Dataset, physical parameter vector) -> prediction``.  The
solver works in normalized-deviation coordinates, so `evaluate` applies the
chain rule through the min-max map: ``J = -df/dtheta_phys * diag(max - min)``.
"""

from __future__ import annotations

import csv
import functools
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from .params import (
    ParamEntry,
    ParameterSpec,
    denormalize,
    headneck_spec,
    recompose,
)

FD_STEP = 1e-6
DEG4 = np.deg2rad(4.0)


class ModelEvaluationError(RuntimeError):
    """The model could not be evaluated (non-finite or diverging output)."""

    def __init__(self, msg, params=None):
        super().__init__(msg)
        self.params = None if params is None else np.array(params)


class DataError(ValueError):
    """Malformed dataset file or inconsistent series."""


@dataclass(frozen=True)
class Dataset:
    """Uniformly sampled input series ``x`` and observations ``y``.

    ``x`` may be 2-D (n x q) for models with several regressors; ``y`` is
    ``None`` for input-only datasets such as generated references.
    """

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray | None = None
    sample_rate: float = 60.0

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        x = np.asarray(self.x, dtype=float)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "x", x)
        if self.y is not None:
            y = np.asarray(self.y, dtype=float)
            object.__setattr__(self, "y", y)
            if len(y) != len(t):
                raise DataError(f"y has {len(y)} samples, t has {len(t)}")
        if len(x) != len(t):
            raise DataError(f"x has {len(x)} samples, t has {len(t)}")
        if self.sample_rate <= 0:
            raise DataError("sample_rate must be positive")
        if len(t) > 1:
            dt = np.diff(t)
            if np.any(dt <= 0):
                raise DataError("t must be strictly increasing")
            if not np.allclose(dt, 1.0 / self.sample_rate, rtol=1e-6, atol=1e-9):
                raise DataError("t must be uniformly spaced at 1/sample_rate")

    def __len__(self):
        return len(self.t)

    def with_y(self, y) -> "Dataset":
        return Dataset(self.t, self.x, np.asarray(y, dtype=float), self.sample_rate)


@dataclass(frozen=True)
class ModelEval:
    residuals: np.ndarray
    jacobian: np.ndarray
    params: np.ndarray  # physical frame

    @property
    def sse(self) -> float:
        return float(self.residuals @ self.residuals)


class NonlinearModel:
    """Base class.  Subclasses implement `predict` and optionally `prediction_jacobian`.

    ``prediction_jacobian`` returns ``df/dtheta`` in the physical frame
    (n x p) or ``None`` to request central finite differences.
    """

    name = "model"

    def __init__(self, spec: ParameterSpec):
        self.spec = spec

    def predict(self, data: Dataset, theta) -> np.ndarray:
        raise NotImplementedError

    def prediction_jacobian(self, data: Dataset, theta) -> np.ndarray | None:
        return None

    @property
    def has_jacobian(self) -> bool:
        return type(self).prediction_jacobian is not NonlinearModel.prediction_jacobian

    def __repr__(self):
        return f"{type(self).__name__}({self.spec.name!r}, p={self.spec.size})"


def _checked(pred, theta):
    pred = np.asarray(pred)
    if not np.all(np.isfinite(pred)):
        raise ModelEvaluationError("non-finite model prediction", theta)
    return pred


def predict_deviation(model: NonlinearModel, data: Dataset, d) -> np.ndarray:
    theta = denormalize(model.spec, recompose(model.spec, d), warn=False)
    return _checked(model.predict(data, theta), theta)


def residuals(model: NonlinearModel, data: Dataset, d) -> np.ndarray:
    if data.y is None:
        raise DataError("dataset has no observations")
    return data.y - predict_deviation(model, data, d)


def fd_jacobian(model: NonlinearModel, data: Dataset, d, h: float = FD_STEP) -> np.ndarray:
    """Central differences of the residual in normalized-deviation coordinates."""
    d = np.asarray(d, dtype=float)
    cols = []
    for k in range(len(d)):
        e = np.zeros_like(d)
        e[k] = h
        fp = predict_deviation(model, data, d + e)
        fm = predict_deviation(model, data, d - e)
        cols.append(-(fp - fm) / (2.0 * h))
    return np.column_stack(cols)


def evaluate(model: NonlinearModel, data: Dataset, d, fd_step: float = FD_STEP) -> ModelEval:
    """Residuals ``y - f`` and Jacobian ``dr/dd`` at deviation vector ``d``."""
    spec = model.spec
    d = np.asarray(d, dtype=float)
    theta = denormalize(spec, recompose(spec, d), warn=False)
    r = data.y - _checked(model.predict(data, theta), theta)
    dfdtheta = model.prediction_jacobian(data, theta)
    if dfdtheta is None:
        jac = fd_jacobian(model, data, d, fd_step)
    else:
        jac = -np.asarray(dfdtheta, dtype=float) * spec.span
    if not np.all(np.isfinite(jac)):
        raise ModelEvaluationError("non-finite Jacobian", theta)
    return ModelEval(r, jac, theta)


# ---------------------------------------------------------------- linear

class LinearModel(NonlinearModel):
    """``f = X theta`` with ``X = data.x`` (n x p).  Used as an exact oracle case."""

    name = "linear"

    def predict(self, data, theta):
        X = np.asarray(data.x, dtype=float).reshape(len(data), -1)
        return X @ theta

    def prediction_jacobian(self, data, theta):
        return np.asarray(data.x, dtype=float).reshape(len(data), -1)


def linear_model(p: int, lower: float = -1.0, upper: float = 1.0) -> LinearModel:
    entries = tuple(ParamEntry(f"w{k + 1}", lower, upper) for k in range(p))
    return LinearModel(ParameterSpec(entries, name=f"linear{p}"))


# ---------------------------------------------------------------- exp-sum

class ExpSumModel(NonlinearModel):
    """``f(x) = sum_j a_j exp(-b_j x)`` with parameters ordered ``(a1, b1, a2, b2, ...)``."""

    name = "expsum"

    def predict(self, data, theta):
        x = np.asarray(data.x).reshape(-1)
        a, b = theta[0::2], theta[1::2]
        return np.exp(-np.outer(x, b)) @ a

    def prediction_jacobian(self, data, theta):
        x = np.asarray(data.x, dtype=float).reshape(-1)
        a, b = theta[0::2], theta[1::2]
        E = np.exp(-np.outer(x, b))
        jac = np.empty((len(x), len(theta)))
        jac[:, 0::2] = E
        jac[:, 1::2] = -x[:, None] * E * a
        return jac


def expsum_model(p: int = 6, typical=None) -> ExpSumModel:
    """Sum of ``p/2`` decaying exponentials, bounds ``[0.1, 5]`` for every parameter.

    Default typical values: amplitudes 1, decay rates spread geometrically over
    [0.5, 4] so the terms are distinguishable at the typical point.
    """
    if p < 2 or p % 2:
        raise ValueError("p must be an even integer >= 2")
    m = p // 2
    if typical is None:
        rates = np.geomspace(0.5, 4.0, m) if m > 1 else np.array([1.0])
        typical = np.ravel(np.column_stack([np.ones(m), rates]))
    entries = []
    for j in range(m):
        entries.append(ParamEntry(f"a{j + 1}", 0.1, 5.0, typical=float(typical[2 * j])))
        entries.append(ParamEntry(f"b{j + 1}", 0.1, 5.0, typical=float(typical[2 * j + 1])))
    return ExpSumModel(ParameterSpec(tuple(entries), name=f"expsum{p}"))


def expsum_design(n: int, x_max: float = 5.0, sample_rate: float = 60.0) -> Dataset:
    """Equispaced abscissae on ``[0, x_max]`` for the exp-sum benchmark."""
    return Dataset(np.arange(n) / sample_rate, np.linspace(0.0, x_max, n), None, sample_rate)


# ---------------------------------------------------------------- head-neck surrogate

@functools.lru_cache(maxsize=None)
def _bilinear_basis(order: int) -> np.ndarray:
    # row k: coefficients (in z^-1) of (1 - z^-1)^k (1 + z^-1)^(order - k)
    rows = []
    for k in range(order + 1):
        c = np.array([1.0])
        for _ in range(k):
            c = np.convolve(c, [1.0, -1.0])
        for _ in range(order - k):
            c = np.convolve(c, [1.0, 1.0])
        rows.append(c)
    return np.array(rows)


def bilinear(num, den, fs):
    """Tustin map of ``num(s)/den(s)`` (descending powers of s) to z^-1 polynomials.

    Works for complex coefficients so the surrogate can be complex-step
    differentiated.  Output is normalized so ``a[0] == 1``.
    """
    num = np.atleast_1d(num)
    den = np.atleast_1d(den)
    order = max(len(num), len(den)) - 1
    num = np.concatenate([np.zeros(order + 1 - len(num)), num])[::-1]
    den = np.concatenate([np.zeros(order + 1 - len(den)), den])[::-1]
    scale = (2.0 * fs) ** np.arange(order + 1)
    basis = _bilinear_basis(order)
    b = (num * scale) @ basis
    a = (den * scale) @ basis
    return b / a[0], a / a[0]


def _padd(p, q):
    if len(p) < len(q):
        p, q = q, p
    out = p.copy()
    out[:len(q)] += q
    return out


def fractional_delay(delay_s, fs):
    """FIR of a delay realized by linear interpolation between neighbouring samples."""
    d = delay_s * fs
    whole = int(np.floor(np.real(d)))
    frac = d - whole
    return np.concatenate([np.zeros(whole, dtype=np.result_type(frac, float)), [1.0 - frac, frac]])


@njit(cache=True)
def _closed_loop(x, B, A, delay_whole, delay_frac):
    """Step the block diagram one sample at a time.

    Rows of ``B``/``A`` are second-order sections (a[0] == 1) in transposed
    direct form II: 0 converter, 1 plant, 2 visual lead-lag, 3-5 vestibular
    chain, 6 proprioceptive.  The feedthrough terms make ``y[k]`` appear on
    both sides of the loop equation; it is affine in ``y[k]`` so it is solved
    exactly each step.
    """
    n = x.shape[0]
    y = np.zeros(n, dtype=B.dtype)
    err = np.zeros(n, dtype=B.dtype)  # delay line of the visual error r - y
    z = np.zeros((B.shape[0], 2), dtype=B.dtype)
    for k in range(n):
        # visual input = known (past samples) + w_now * err[k]
        known = 0.0 * B[0, 0]
        w_now = 0.0 * B[0, 0]
        i0 = k - delay_whole
        if delay_whole == 0:
            w_now = 1.0 - delay_frac
        elif i0 >= 0:
            known += (1.0 - delay_frac) * err[i0]
        if i0 - 1 >= 0:
            known += delay_frac * err[i0 - 1]
        # each signal is c0 + c1 * y[k]
        v0 = B[2, 0] * (known + w_now * x[k]) + z[2, 0]
        v1 = -B[2, 0] * w_now
        s0 = 0.0 * B[0, 0]
        s1 = 1.0 + 0.0 * B[0, 0]
        for j in range(3, 6):
            s0 = B[j, 0] * s0 + z[j, 0]
            s1 = B[j, 0] * s1
        p0 = z[6, 0]
        p1 = B[6, 0]
        u0 = v0 - s0 - p0
        u1 = v1 - s1 - p1
        c0 = B[0, 0] * u0 + z[0, 0]
        c1 = B[0, 0] * u1
        y0 = B[1, 0] * c0 + z[1, 0]
        y1 = B[1, 0] * c1
        yk = y0 / (1.0 - y1)
        y[k] = yk
        err[k] = x[k] - yk
        # state updates with the now-known block inputs
        vin = known + w_now * err[k]
        _sos_update(B, A, z, 2, vin, v0 + v1 * yk)
        sig = yk
        for j in range(3, 6):
            out = B[j, 0] * sig + z[j, 0]
            _sos_update(B, A, z, j, sig, out)
            sig = out
        _sos_update(B, A, z, 6, yk, p0 + p1 * yk)
        _sos_update(B, A, z, 0, u0 + u1 * yk, c0 + c1 * yk)
        _sos_update(B, A, z, 1, c0 + c1 * yk, yk)
    return y


@njit(cache=True, inline="always")
def _sos_update(B, A, z, j, inp, out):
    z[j, 0] = B[j, 1] * inp - A[j, 1] * out + z[j, 1]
    z[j, 1] = B[j, 2] * inp - A[j, 2] * out


def _sections(blocks, dtype):
    """Pack per-block ``(b, a)`` pairs of length <= 3 into zero-padded arrays."""
    Bm = np.zeros((len(blocks), 3), dtype=dtype)
    Am = np.zeros((len(blocks), 3), dtype=dtype)
    for j, (b, a) in enumerate(blocks):
        Bm[j, :len(b)] = b
        Am[j, :len(a)] = a
    return Bm, Am


class HeadNeckSurrogate(NonlinearModel):
    """Closed-loop head position tracking surrogate with 12 free parameters.

    Blocks (continuous form, each discretized by the bilinear map at the data
    sample rate)::

        plant      1 / (J s^2 + B s + K)                      J = 0.0148
        converter  1 / (T_c s + 1)                            T_c = 0.1
        visual     g_vis K_vis e^{-tau s} (tau_CNS1 s + 1)/(tau_CNS2 s + 1)   on r - y
        vestib.    g_vcr K_vcr D^2 (tau_1A s + 1)/(tau_C s + 1) / (s/100 + 1)  on -y
        propr.     g_ccr K_ccr (tau_MS1 s + 1)(tau_MS2 s + 1)/(0.001 s + 1)^2  on -y

    ``D^2`` is the discrete double difference ``fs^2 (1 - z^-1)^2`` and the
    delay linearly interpolates between neighbouring samples of the error
    history.  The pathway scales ``g = (1, 1e-3, 1e-2)`` keep the loop stable
    over most of the box; with unit scales it is unstable at the typical
    values.

    `transfer_function` collapses the same diagram into one rational filter.
    It is used for the stability test and as a cross-check; simulation steps
    the low-order blocks directly because the collapsed high-order polynomial
    loses several digits to rounding.
    """

    name = "headneck"
    pathway_scale = (1.0, 1e-3, 1e-2)
    smoothing_rad_s = 100.0
    spindle_lag_s = 0.001
    max_output = 1e6

    def __init__(self, spec: ParameterSpec | None = None):
        super().__init__(headneck_spec() if spec is None else spec)
        fixed = self.spec.fixed_values
        self.J = fixed.get("J", 0.0148)
        self.T_c = fixed.get("T_c", 0.1)

    def blocks(self, theta, fs):
        """Per-block ``(b, a)`` z^-1 polynomials, gains folded into the numerators."""
        (K_vis, K_vcr, K_ccr, tau, tau_1A, tau_CNS1,
         tau_C, tau_CNS2, tau_MS1, tau_MS2, B, K) = theta
        g_vis, g_vcr, g_ccr = self.pathway_scale
        lag = self.spindle_lag_s
        conv = bilinear([1.0], [self.T_c, 1.0], fs)
        plant = bilinear([1.0], [self.J, B, K], fs)
        vb, va = bilinear([tau_CNS1, 1.0], [tau_CNS2, 1.0], fs)
        dd = (g_vcr * K_vcr * fs ** 2 * np.array([1.0, -2.0, 1.0]), np.array([1.0]))
        vest = bilinear([tau_1A, 1.0], [tau_C, 1.0], fs)
        smooth = bilinear([1.0], [1.0 / self.smoothing_rad_s, 1.0], fs)
        qb, qa = bilinear(np.convolve([tau_MS1, 1.0], [tau_MS2, 1.0]),
                          [lag * lag, 2.0 * lag, 1.0], fs)
        return [conv, plant, (g_vis * K_vis * vb, va), dd, vest, smooth,
                (g_ccr * K_ccr * qb, qa)]

    def transfer_function(self, theta, fs):
        """``(b, a)`` polynomials in z^-1 of the closed loop from reference to head angle."""
        (cn, cd), (pn, pd), (ln, vd), (dn, _), (an, ad), (sn, sd), (qn, qd) = self.blocks(theta, fs)
        gn, gd = np.convolve(pn, cn), np.convolve(pd, cd)
        vn = np.convolve(ln, fractional_delay(theta[3], fs))
        en = np.convolve(np.convolve(an, sn), dn)
        ed = np.convolve(ad, sd)
        # inner feedback W = vestibular + proprioceptive, both acting on -y
        wn = _padd(np.convolve(en, qd), np.convolve(qn, ed))
        wd = np.convolve(ed, qd)
        num = np.convolve(np.convolve(gn, vn), wd)
        den = _padd(_padd(np.convolve(np.convolve(gd, vd), wd), num),
                    np.convolve(np.convolve(gn, wn), vd))
        return num / den[0], den / den[0]

    def is_stable(self, theta, fs) -> bool:
        _, a = self.transfer_function(np.real(theta), fs)
        return bool(np.max(np.abs(np.roots(a))) < 1.0)

    def predict(self, data, theta):
        fs = data.sample_rate
        if np.real(theta[3]) < 0:
            raise ModelEvaluationError("negative visual delay", np.real(theta))
        if not np.iscomplexobj(theta) and not self.is_stable(theta, fs):
            raise ModelEvaluationError("unstable surrogate closed loop", theta)
        dtype = complex if np.iscomplexobj(theta) else float
        Bm, Am = _sections(self.blocks(theta, fs), dtype)
        d = theta[3] * fs
        whole = int(np.floor(np.real(d)))
        frac = d - whole
        x = np.asarray(data.x, dtype=dtype).reshape(-1)
        y = _closed_loop(x, Bm, Am, whole, dtype(frac))
        if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > self.max_output:
            raise ModelEvaluationError("unstable surrogate simulation", np.real(theta))
        return y

    def prediction_jacobian(self, data, theta):
        # complex-step derivatives: exact to rounding, no subtractive cancellation
        theta = np.asarray(theta, dtype=float)
        h = 1e-30 * np.maximum(np.abs(theta), 1.0)
        cols = []
        for k in range(len(theta)):
            tc = theta.astype(complex)
            tc[k] += 1j * h[k]
            cols.append(np.imag(self.predict(data, tc)) / h[k])
        return np.column_stack(cols)


def headneck_surrogate() -> HeadNeckSurrogate:
    return HeadNeckSurrogate()


# ---------------------------------------------------------------- data generation

def generate_reference(duration_s: float, sample_rate: float = 60.0, seed: int = 0,
                       step_range=(0.5, 3.0), amplitude: float = DEG4) -> Dataset:
    """Pseudorandom sequence of steps: uniform durations and uniform amplitudes in +-4 deg."""
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    n = int(round(duration_s * sample_rate))
    rng = np.random.default_rng(seed)
    x = np.empty(n)
    i = 0
    while i < n:
        length = max(1, int(round(rng.uniform(*step_range) * sample_rate)))
        x[i:i + length] = rng.uniform(-amplitude, amplitude)
        i += length
    return Dataset(np.arange(n) / sample_rate, x, None, sample_rate)


def simulate(model: NonlinearModel, inputs: Dataset, d, sigma: float = 0.0, rng=None) -> Dataset:
    """Observations at deviation ``d`` plus Gaussian noise of std ``sigma * RMS(clean)``."""
    clean = predict_deviation(model, inputs, d)
    y = clean
    if sigma > 0:
        rng = np.random.default_rng(rng)
        y = clean + rng.normal(0.0, sigma * np.sqrt(np.mean(clean ** 2)), size=clean.shape)
    return inputs.with_y(y)


# ---------------------------------------------------------------- CSV I/O

def read_csv(path) -> Dataset:
    """Read a ``t,x,y`` CSV.  Errors name the file, line and column."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"data file not found: {path}")
    rows = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["t", "x", "y"]:
            raise DataError(f"{path}:1: expected header 't,x,y', got {header!r}")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"{path}:{line}: expected 3 columns, got {len(row)}")
            vals = []
            for col, cell in enumerate(row, start=1):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DataError(f"{path}:{line}:{col}: not a number: {cell!r}") from None
            rows.append(vals)
    if len(rows) < 2:
        raise DataError(f"{path}: need at least two samples")
    arr = np.array(rows)
    t = arr[:, 0]
    dt = np.diff(t)
    if np.any(dt <= 0):
        raise DataError(f"{path}: t must be strictly increasing")
    fs = 1.0 / np.median(dt)
    return Dataset(t, arr[:, 1], arr[:, 2], sample_rate=float(np.round(fs, 9)))


def write_csv(data: Dataset, path) -> None:
    if data.y is None:
        raise DataError("dataset has no observations")
    x = np.asarray(data.x).reshape(-1)
    with Path(path).open("w", newline="") as fh:
        fh.write("t,x,y\n")
        for t, xi, yi in zip(data.t.tolist(), x.tolist(), np.asarray(data.y).tolist()):
            fh.write(f"{t!r},{xi!r},{yi!r}\n")


MODELS = {
    "expsum": expsum_model,
    "headneck": headneck_surrogate,
}
