"""Network models and losses with hand-written gradients.

Three models live here:

* a one-hidden-layer ReLU MLP producing a single logit,
* a piriform-inspired network with dropout, a feedback branch and forward noise,
* a two-layer linear network in mean-field parametrization used for the
  reversal experiments.

Everything is float64 numpy. Parameter containers are plain dataclasses; the
forward and gradient functions never mutate them.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .errors import InvalidParameterError, NumericOverflowError

DEFAULT_HIDDEN = 32
BIO_DROPOUT_1 = 0.2
BIO_DROPOUT_3 = 0.3
LEAKY_SLOPE = 0.01


class _Params:
    """Shared helpers for the parameter dataclasses (array fields only)."""

    _scalar_fields: tuple[str, ...] = ()

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: np.asarray(getattr(self, f.name)) for f in fields(self)
                if f.name not in self._scalar_fields}

    def with_arrays(self, arrays):
        return replace(self, **arrays)

    def step(self, grads, lr: float):
        """Return ``self - lr * grads`` as a new container."""
        mine, g = self.arrays(), grads.arrays()
        return self.with_arrays({k: mine[k] - lr * g[k] for k in mine})

    def copy(self):
        return self.with_arrays({k: v.copy() for k, v in self.arrays().items()})

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays().values())

    def equals(self, other) -> bool:
        a, b = self.arrays(), other.arrays()
        return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def _check_finite(arr, layer):
    if not np.all(np.isfinite(arr)):
        raise NumericOverflowError(layer)


def _as_batch(x):
    x = np.asarray(x, dtype=float)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


# --------------------------------------------------------------------------
# losses

@dataclass(frozen=True)
class LossSpec:
    variant: str = "cross_entropy"
    C: float = 1.0

    def __post_init__(self):
        if self.variant not in ("cross_entropy", "hinge"):
            raise InvalidParameterError(f"unknown loss variant {self.variant!r}")
        if not self.C > 0:
            raise InvalidParameterError("hinge margin C must be positive")


def ce_loss(logit, label):
    """Binary cross-entropy on a logit with labels in {0, 1}.

    Written as ``log(1 + e^-|z|) + max(z, 0) - y z`` so large |logit|
    neither overflows nor rounds a small loss to exactly zero. Returns
    ``(loss, dloss/dlogit)``.
    """
    z = np.asarray(logit, dtype=float)
    y = np.asarray(label, dtype=float)
    loss = (np.maximum(z, 0.0) - y * z) + np.log1p(np.exp(-np.abs(z)))
    # sigmoid(z) - y, arranged to keep precision when the fit is very good
    return loss, (1.0 - y) * sigmoid(z) - y * sigmoid(-z)


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def hinge_loss(f, label, C: float = 1.0):
    """``max(0, C - y f)`` with labels in {-1, +1}; subgradient 0 at the kink."""
    if not C > 0:
        raise InvalidParameterError("hinge margin C must be positive")
    f = np.asarray(f, dtype=float)
    y = np.asarray(label, dtype=float)
    slack = C - y * f
    loss = np.maximum(0.0, slack)
    grad = np.where(slack > 0, -y, 0.0)
    return loss, grad


# --------------------------------------------------------------------------
# one-hidden-layer MLP

@dataclass
class MlpParams(_Params):
    W1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def hidden_size(self) -> int:
        return self.W1.shape[0]


def init_mlp(d_embed: int, hidden: int = DEFAULT_HIDDEN, rng=None,
             init_scale: float = 1.0) -> MlpParams:
    """Gaussian(0, 1/fan_in) weights times ``init_scale``; zero biases."""
    rng = np.random.default_rng(rng)
    return MlpParams(
        W1=rng.normal(0.0, math.sqrt(1.0 / d_embed), (hidden, d_embed)) * init_scale,
        b1=np.zeros(hidden),
        w2=rng.normal(0.0, math.sqrt(1.0 / hidden), hidden) * init_scale,
        b2=np.zeros(()),
    )


def mlp_forward(params: MlpParams, x):
    """Return ``(hidden, logit)``; accepts one input vector or a batch."""
    X, single = _as_batch(x)
    if X.shape[1] != params.W1.shape[1]:
        raise InvalidParameterError(
            f"input has {X.shape[1]} features, expected {params.W1.shape[1]}")
    hidden = np.maximum(X @ params.W1.T + params.b1, 0.0)
    _check_finite(hidden, "hidden")
    logit = hidden @ params.w2 + params.b2
    _check_finite(logit, "output")
    if single:
        return hidden[0], logit[0]
    return hidden, logit


def mlp_grad(params: MlpParams, x, hidden, dlogit) -> MlpParams:
    """Backpropagate per-example ``dlogit`` and sum over the batch."""
    X, single = _as_batch(x)
    H = hidden[None, :] if single else hidden
    g = np.atleast_1d(np.asarray(dlogit, dtype=float))
    dz = np.outer(g, params.w2) * (H > 0)
    return MlpParams(W1=dz.T @ X, b1=dz.sum(0), w2=H.T @ g, b2=np.asarray(g.sum()))


# --------------------------------------------------------------------------
# piriform-inspired network

@dataclass
class BioNetParams(_Params):
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    Wf: np.ndarray
    bf: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    w4: np.ndarray
    b4: np.ndarray
    noise_std: float = 0.1

    _scalar_fields = ("noise_std",)

    def __post_init__(self):
        if self.W3.shape[0] >= self.W1.shape[0]:
            raise InvalidParameterError("modulatory layer must be narrower than layer 1")
        if self.noise_std < 0:
            raise InvalidParameterError("noise_std must be nonnegative")

    @property
    def hidden_size(self) -> int:
        return self.W3.shape[0]


def init_bio(d_embed: int, h1: int = 256, h3: int = 64, rng=None,
             init_scale: float = 1.0, noise_std: float = 0.1) -> BioNetParams:
    rng = np.random.default_rng(rng)

    def w(rows, cols):
        return rng.normal(0.0, math.sqrt(1.0 / cols), (rows, cols)) * init_scale

    return BioNetParams(
        W1=w(h1, d_embed), b1=np.zeros(h1),
        W2=w(h1, h1), b2=np.zeros(h1),
        Wf=w(h1, h1), bf=np.zeros(h1),
        W3=w(h3, h1), b3=np.zeros(h3),
        w4=w(1, h3)[0], b4=np.zeros(()),
        noise_std=noise_std,
    )


@dataclass
class BioActivations:
    layer1: np.ndarray
    layer2: np.ndarray
    layer3: np.ndarray
    # backward-pass cache
    x: np.ndarray
    z1: np.ndarray
    zm: np.ndarray
    zf: np.ndarray
    z3: np.ndarray
    mask1: np.ndarray
    mask3: np.ndarray


def bio_forward(params: BioNetParams, x, mode: str = "eval", rng=None, keep_all=False):
    """Forward pass; returns ``(BioActivations, logit)``.

    Layer 1 expands with ReLU and dropout(0.2). Layer 2 sums a main ReLU
    branch and a parallel feedback ReLU branch, both fed from layer 1.
    Layer 3 narrows with LeakyReLU and dropout(0.3). In train mode Gaussian
    noise is added to every hidden pre-activation; ``keep_all`` disables
    the dropout masks.
    """
    if mode not in ("train", "eval"):
        raise InvalidParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    X, single = _as_batch(x)
    train = mode == "train"
    if train and rng is None:
        raise InvalidParameterError("train mode needs an rng")

    def noisy(z):
        if train and params.noise_std > 0:
            return z + rng.normal(0.0, params.noise_std, z.shape)
        return z

    def dropout_mask(shape, p):
        if not train or keep_all:
            return np.ones(shape)
        return (rng.random(shape) >= p) / (1.0 - p)

    z1 = noisy(X @ params.W1.T + params.b1)
    mask1 = dropout_mask(z1.shape, BIO_DROPOUT_1)
    a1 = np.maximum(z1, 0.0) * mask1
    _check_finite(a1, "layer1")

    zm = noisy(a1 @ params.W2.T + params.b2)
    zf = noisy(a1 @ params.Wf.T + params.bf)
    a2 = np.maximum(zm, 0.0) + np.maximum(zf, 0.0)
    _check_finite(a2, "layer2")

    z3 = noisy(a2 @ params.W3.T + params.b3)
    mask3 = dropout_mask(z3.shape, BIO_DROPOUT_3)
    a3 = np.where(z3 > 0, z3, LEAKY_SLOPE * z3) * mask3
    _check_finite(a3, "layer3")

    logit = a3 @ params.w4 + params.b4
    _check_finite(logit, "output")
    acts = BioActivations(a1, a2, a3, X, z1, zm, zf, z3, mask1, mask3)
    if single:
        return acts, logit[0]
    return acts, logit


def bio_grad(params: BioNetParams, acts: BioActivations, dlogit) -> BioNetParams:
    g = np.atleast_1d(np.asarray(dlogit, dtype=float))
    dw4 = acts.layer3.T @ g
    da3 = np.outer(g, params.w4)
    dz3 = da3 * acts.mask3 * np.where(acts.z3 > 0, 1.0, LEAKY_SLOPE)
    dW3 = dz3.T @ acts.layer2
    da2 = dz3 @ params.W3
    dzm = da2 * (acts.zm > 0)
    dzf = da2 * (acts.zf > 0)
    da1 = dzm @ params.W2 + dzf @ params.Wf
    dz1 = da1 * acts.mask1 * (acts.z1 > 0)
    return BioNetParams(
        W1=dz1.T @ acts.x, b1=dz1.sum(0),
        W2=dzm.T @ acts.layer1, b2=dzm.sum(0),
        Wf=dzf.T @ acts.layer1, bf=dzf.sum(0),
        W3=dW3, b3=dz3.sum(0),
        w4=dw4, b4=np.asarray(g.sum()),
        noise_std=params.noise_std,
    )


# --------------------------------------------------------------------------
# two-layer linear network, mean-field parametrization

@dataclass
class Linear2Params(_Params):
    W1: np.ndarray
    w2: np.ndarray
    v: np.ndarray
    gamma0: float = 1.0

    _scalar_fields = ("gamma0",)

    def __post_init__(self):
        if not self.gamma0 > 0:
            raise InvalidParameterError("gamma0 must be positive")

    @property
    def width(self) -> int:
        return self.W1.shape[0]


def init_linear2(d: int, width: int, gamma0: float, rng=None) -> Linear2Params:
    """Standard-normal weights; the 1/(N gamma0) factor lives in the forward pass."""
    rng = np.random.default_rng(rng)
    return Linear2Params(
        W1=rng.standard_normal((width, d)),
        w2=rng.standard_normal(width),
        v=rng.standard_normal(width),
        gamma0=gamma0,
    )


def linear2_hidden(params: Linear2Params, X) -> np.ndarray:
    return np.asarray(X, dtype=float) @ params.W1.T


def linear2_forward(params: Linear2Params, x, phase: str = "original"):
    if phase == "original":
        readout = params.w2
    elif phase == "reversal":
        readout = params.v
    else:
        raise InvalidParameterError(f"phase must be 'original' or 'reversal', got {phase!r}")
    X, single = _as_batch(x)
    f = linear2_hidden(params, X) @ readout / (params.width * params.gamma0)
    return f[0] if single else f


def hidden_kernel(params: Linear2Params, X) -> np.ndarray:
    H = linear2_hidden(params, np.atleast_2d(X))
    K = H @ H.T / params.width
    return 0.5 * (K + K.T)


# --------------------------------------------------------------------------
# checkpoints

_KINDS = {"mlp": MlpParams, "bio": BioNetParams, "linear2": Linear2Params}


def params_to_json(params) -> dict:
    kind = next(k for k, cls in _KINDS.items() if isinstance(params, cls))
    arrays = {name: {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}
              for name, a in params.arrays().items()}
    scalars = {name: float(getattr(params, name)) for name in params._scalar_fields}
    return {"kind": kind, "arrays": arrays, "scalars": scalars}


def params_from_json(doc: dict):
    cls = _KINDS[doc["kind"]]
    kwargs = {name: np.array(spec["data"], dtype=float).reshape(spec["shape"])
              for name, spec in doc["arrays"].items()}
    kwargs.update(doc.get("scalars", {}))
    return cls(**kwargs)


def save_checkpoint(path, params) -> None:
    # json writes floats via repr, which round-trips float64 exactly
    Path(path).write_text(json.dumps(params_to_json(params)) + "\n")


def load_checkpoint(path):
    return params_from_json(json.loads(Path(path).read_text()))
