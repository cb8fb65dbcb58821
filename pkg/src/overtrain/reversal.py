"""Mean-field dynamics of a wide two-layer linear network on a reversal task.

Phase 1 trains on labels y from f_y(0) = 0 for time T. The label-aligned
kernel K_y = sqrt(1 + gamma0^2 f_y^2) grows with f_y. Phase 2 trains a fresh
readout on the flipped labels with K_y frozen at its phase-1 value, so a
longer phase 1 gives a faster phase 2. An empirical finite-width network is
provided for comparison with the theory.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetError, DivergenceError, InvalidParameterError, ValidationError
from .nets import Linear2Params, hidden_kernel, init_linear2, linear2_hidden
from .popanalysis import pca_project
from .tables import write_csv

DEFAULT_DT = 1e-3
DEFAULT_EPS = 0.1
DEFAULT_HORIZON = 20.0
MAX_STEPS = 100_000_000
DIVERGENCE_F = 1e6


@dataclass(frozen=True)
class MeanFieldState:
    t: float
    f_y: float
    K_y: float
    gamma0: float


def phase1_rate(f, gamma0, y=1.0):
    return 2.0 * math.sqrt(1.0 + gamma0 ** 2 * f ** 2) * (y - f)


def phase2_rate(f, K_yT, gamma0, y=1.0):
    return math.sqrt((K_yT + 1.0) ** 2 + 4.0 * gamma0 ** 2 * f ** 2) * (-y - f)


def _grid(horizon, dt):
    if not dt > 0:
        raise InvalidParameterError("dt must be positive")
    if not horizon > 0:
        raise InvalidParameterError("integration time must be positive")
    n = max(1, math.ceil(horizon / dt - 1e-9))
    if n > MAX_STEPS:
        raise BudgetError(f"{n} integration steps exceed the budget of {MAX_STEPS}")
    return n, horizon / n


def _rk4(rate, f0, n, h):
    f = np.empty(n + 1)
    f[0] = x = f0
    for i in range(n):
        k1 = rate(x)
        k2 = rate(x + 0.5 * h * k1)
        k3 = rate(x + 0.5 * h * k2)
        k4 = rate(x + h * k3)
        x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        f[i + 1] = x
    return f


@dataclass
class Phase1Trajectory:
    times: np.ndarray
    f_y: np.ndarray
    K_y: np.ndarray
    gamma0: float

    @property
    def K_yT(self) -> float:
        return float(self.K_y[-1])

    def states(self):
        for t, f, k in zip(self.times, self.f_y, self.K_y):
            yield MeanFieldState(float(t), float(f), float(k), self.gamma0)

    def lazy_limit(self, y=1.0) -> np.ndarray:
        return y * (1.0 - np.exp(-2.0 * self.times))

    def to_csv(self, path, with_lazy=False) -> None:
        header = ["t", "f_y", "K_y"] + (["f_y_lazy"] if with_lazy else [])
        cols = [self.times, self.f_y, self.K_y] + ([self.lazy_limit()] if with_lazy else [])
        write_csv(path, header, zip(*cols))


def integrate_phase1(gamma0: float, T: float, dt: float = DEFAULT_DT, y: float = 1.0) -> Phase1Trajectory:
    """RK4 on f_y from f_y(0) = 0; K_y is derived from f_y at every step.

    The step is shrunk slightly if needed so the grid lands exactly on T.
    """
    if not gamma0 > 0:
        raise InvalidParameterError("gamma0 must be positive")
    n, h = _grid(T, dt)
    f = _rk4(lambda x: phase1_rate(x, gamma0, y), 0.0, n, h)
    times = np.arange(n + 1) * h
    times[-1] = T
    return Phase1Trajectory(times, f, np.sqrt(1.0 + gamma0 ** 2 * f ** 2), gamma0)


@dataclass
class ReversalTrajectory:
    times: np.ndarray
    f_rev_values: np.ndarray
    K_yT: float
    time_to_threshold: float | None
    gamma0: float = 1.0
    eps: float = DEFAULT_EPS

    def lazy_limit(self, y=1.0) -> np.ndarray:
        return -y * (1.0 - np.exp(-(self.K_yT + 1.0) * self.times))

    def to_csv(self, path, with_lazy=False) -> None:
        header = ["t", "f_rev"] + (["f_rev_lazy"] if with_lazy else [])
        cols = [self.times, self.f_rev_values] + ([self.lazy_limit()] if with_lazy else [])
        write_csv(path, header, zip(*cols))


def _first_crossing(times, values, level):
    """First time ``values`` drops to ``level``, linearly interpolated."""
    below = np.flatnonzero(values <= level)
    if below.size == 0:
        return None
    i = int(below[0])
    if i == 0:
        return float(times[0])
    v0, v1 = values[i - 1], values[i]
    frac = (v0 - level) / (v0 - v1)
    return float(times[i - 1] + frac * (times[i] - times[i - 1]))


def integrate_phase2(K_yT: float, gamma0: float, dt: float = DEFAULT_DT, y: float = 1.0,
                     horizon: float = DEFAULT_HORIZON, eps: float = DEFAULT_EPS) -> ReversalTrajectory:
    """RK4 on the reversed-task prediction with the kernel alignment frozen at K_yT.

    ``time_to_threshold`` is the first time y * f_rev <= -(1 - eps), or None
    if that does not happen before ``horizon``.
    """
    if not K_yT >= 1:
        raise InvalidParameterError(f"K_yT must be >= 1, got {K_yT}")
    if not gamma0 > 0:
        raise InvalidParameterError("gamma0 must be positive")
    if not 0 < eps < 1:
        raise InvalidParameterError("eps must lie in (0, 1)")
    n, h = _grid(horizon, dt)
    f = _rk4(lambda x: phase2_rate(x, K_yT, gamma0, y), 0.0, n, h)
    times = np.arange(n + 1) * h
    times[-1] = horizon
    crossing = _first_crossing(times, y * f, -(1.0 - eps))
    return ReversalTrajectory(times, f, float(K_yT), crossing, gamma0, eps)


@dataclass
class ReversalSweep:
    T: list[float]
    K_yT: list[float]
    reversal_time: list[float | None]

    def rows(self):
        return list(zip(self.T, self.K_yT, self.reversal_time))

    def to_csv(self, path) -> None:
        write_csv(path, ["T", "K_yT", "reversal_time"], self.rows())


def sweep_pretraining(gamma0: float, T_list, dt: float = DEFAULT_DT, eps: float = DEFAULT_EPS,
                      horizon: float = DEFAULT_HORIZON) -> ReversalSweep:
    T_list = [float(T) for T in T_list]
    if any(b < a for a, b in zip(T_list, T_list[1:])):
        raise InvalidParameterError("T_list must be sorted increasing")
    Ks, times = [], []
    for T in T_list:
        K = integrate_phase1(gamma0, T, dt).K_yT
        Ks.append(K)
        times.append(integrate_phase2(K, gamma0, dt, horizon=horizon, eps=eps).time_to_threshold)
    return ReversalSweep(T_list, Ks, times)


# --------------------------------------------------------------------------
# empirical finite-width network

def whitened_dataset(d: int = 4, seed: int = 0):
    """Four orthonormal inputs in R^d with labels (+1, +1, -1, -1)."""
    if d < 4:
        raise InvalidParameterError("need d >= 4 for four orthonormal inputs")
    Q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((d, 4)))
    return Q.T.copy(), np.array([1.0, 1.0, -1.0, -1.0])


@dataclass
class EmpiricalReversal:
    """Per-step label-projected predictions for both phases.

    Time is ``lr * step``. ``kernels`` maps phase-1 step to the hidden
    kernel; ``pcs`` maps phase-1 step to the 4 x 2 PC coordinates.
    """
    lr: float
    f_y: np.ndarray
    loss1: np.ndarray
    f_rev: np.ndarray
    loss2: np.ndarray
    y_hat: np.ndarray
    kernels: dict[int, np.ndarray] = field(default_factory=dict)
    pcs: dict[int, np.ndarray] = field(default_factory=dict)
    eps: float = DEFAULT_EPS

    @property
    def times1(self) -> np.ndarray:
        return self.lr * np.arange(len(self.f_y))

    @property
    def times2(self) -> np.ndarray:
        return self.lr * np.arange(len(self.f_rev))

    @property
    def steps_to_threshold(self) -> int | None:
        hit = np.flatnonzero(self.f_rev <= -(1.0 - self.eps))
        return int(hit[0]) if hit.size else None

    def comparison_rows(self, theory: Phase1Trajectory):
        th = np.interp(self.times1, theory.times, theory.f_y)
        return list(zip(range(len(self.f_y)), self.times1, self.f_y, th))

    def pc_rows(self):
        rows = []
        for step in sorted(self.pcs):
            for i, (a, b) in enumerate(self.pcs[step]):
                rows.append((step, i, int(self.y_hat[i] > 0), a, b))
        return rows


def _readout_grads(params, X, readout, targets):
    """Squared-error residual and gradients for f = readout . W1 x / (N gamma0)."""
    N, g = params.width, params.gamma0
    H = linear2_hidden(params, X)
    f = H @ readout / (N * g)
    resid = f - targets
    d_read = H.T @ resid / (N * g)
    d_W1 = np.outer(readout, resid @ X) / (N * g)
    return f, resid, d_read, d_W1


def empirical_reversal(width: int, gamma0: float, dataset=None, T_steps: int = 3000,
                       lr: float = DEFAULT_DT, seed: int = 0, horizon_steps: int = 3000,
                       update_W1: bool = True, pc_steps=(), eps: float = DEFAULT_EPS,
                       kernel_steps=None) -> EmpiricalReversal:
    """Full-batch GD on the two-layer linear net, then on the reversed task.

    Labels are normalized to unit length so the label projection of the
    prediction starts at 0 and converges to 1. Parameters move by
    ``lr * gamma0**2 * width`` times the gradient, which makes one step
    advance the mean-field time by ``lr``. Phase 2 draws a fresh readout
    and trains it on the flipped labels; W1 keeps learning unless
    ``update_W1`` is off.
    """
    if width < 1 or T_steps < 0 or horizon_steps < 0 or not lr > 0:
        raise InvalidParameterError("need width >= 1, nonnegative step counts, lr > 0")
    X, y = whitened_dataset() if dataset is None else (np.asarray(dataset[0], float),
                                                         np.asarray(dataset[1], float))
    if not np.allclose(X @ X.T, np.eye(len(X)), atol=1e-8):
        raise ValidationError("inputs must be orthonormal (whitened)")
    y_hat = y / np.linalg.norm(y)
    rng = np.random.default_rng(seed)
    params = init_linear2(X.shape[1], width, gamma0, rng)
    step_size = lr * gamma0 ** 2 * width
    pc_steps = set(int(s) for s in pc_steps)
    kernel_steps = set(range(T_steps + 1)) if kernel_steps is None else set(kernel_steps)

    W1, w2 = params.W1.copy(), params.w2.copy()
    f_y, loss1, kernels, pcs = [], [], {}, {}
    for step in range(T_steps + 1):
        cur = Linear2Params(W1, w2, params.v, gamma0)
        f, resid, d_w2, d_W1 = _readout_grads(cur, X, w2, y_hat)
        if not np.all(np.isfinite(f)) or np.abs(f).max() > DIVERGENCE_F:
            raise DivergenceError(step, float(np.abs(f).max()))
        f_y.append(float(y_hat @ f))
        loss1.append(float(0.5 * resid @ resid))
        if step in kernel_steps:
            kernels[step] = hidden_kernel(cur, X)
        if step in pc_steps:
            pcs[step], _ = pca_project(linear2_hidden(cur, X), 2)
        if step == T_steps:
            break
        W1 = W1 - step_size * d_W1
        w2 = w2 - step_size * d_w2

    v = params.v.copy()
    f_rev, loss2 = [], []
    for step in range(horizon_steps + 1):
        cur = Linear2Params(W1, w2, v, gamma0)
        f, resid, d_v, d_W1 = _readout_grads(cur, X, v, -y_hat)
        if not np.all(np.isfinite(f)) or np.abs(f).max() > DIVERGENCE_F:
            raise DivergenceError(step, float(np.abs(f).max()))
        f_rev.append(float(y_hat @ f))
        loss2.append(float(0.5 * resid @ resid))
        if step == horizon_steps:
            break
        v = v - step_size * d_v
        if update_W1:
            W1 = W1 - step_size * d_W1

    return EmpiricalReversal(lr, np.array(f_y), np.array(loss1), np.array(f_rev),
                             np.array(loss2), y_hat, kernels, pcs, eps)


def kernel_direction_check(kernels, y) -> dict[int, float]:
    """Fraction of the squared Frobenius kernel change along y y^T / |y|^2.

    ``kernels`` maps checkpoint to kernel; the smallest key is the reference.
    A zero change counts as fully aligned (fraction 1).
    """
    y = np.asarray(y, dtype=float)
    u = y / np.linalg.norm(y)
    keys = sorted(kernels)
    K0 = kernels[keys[0]]
    out = {}
    for key in keys:
        dK = kernels[key] - K0
        total = float(np.sum(dK * dK))
        out[key] = 1.0 if total == 0 else float((u @ dK @ u) ** 2 / total)
    return out


def relative_rmse(a, b) -> float:
    """RMSE of a - b relative to the RMS of b."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.sqrt(np.mean((a - b) ** 2)) / np.sqrt(np.mean(b ** 2)))
