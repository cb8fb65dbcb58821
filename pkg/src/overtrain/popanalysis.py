"""Population analyses on a trials x units matrix.

Works the same on recorded rate matrices and on model hidden-layer
snapshots: z-scoring, trial-by-trial correlation structure, PCA, LDA
decoding with cross-validation, the two-class Fisher discriminant, the
max-margin linear SVM and its percentile margins, and a mean-matched
random baseline for the cross-class correlation.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.model_selection import StratifiedKFold

from .errors import (ClassSizeError, ConvergenceError, EmptyMatrixError, FoldInfeasibleError,
                     InvalidParameterError, SingularityError)

SHRINKAGE = 0.1
SHRINK_BELOW_RATIO = 5
CLASSES = ("target", "nontarget")


@dataclass
class PopulationMatrix:
    X: np.ndarray
    labels: np.ndarray
    zscored: bool = False
    dropped_columns: list[int] = field(default_factory=list)
    unit_ids: list[str] | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.labels = np.asarray(self.labels)
        if self.X.ndim != 2 or self.X.shape[0] != len(self.labels):
            raise InvalidParameterError("X must be trials x units with one label per trial")

    @property
    def n_trials(self) -> int:
        return self.X.shape[0]

    @property
    def n_units(self) -> int:
        return self.X.shape[1]

    def subset(self, mask) -> PopulationMatrix:
        return PopulationMatrix(self.X[mask], self.labels[mask], self.zscored,
                                list(self.dropped_columns), self.unit_ids)

    def two_class(self, classes=CLASSES):
        """Rows of the two named classes with signed labels (+1 for classes[0])."""
        pos, neg = classes
        keep = np.isin(self.labels, [pos, neg])
        y = np.where(self.labels[keep] == pos, 1.0, -1.0)
        return self.X[keep], y


def zscore(X, labels) -> PopulationMatrix:
    """Standardize each unit across trials (population sd).

    Constant units are dropped and listed in ``dropped_columns``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise InvalidParameterError("zscore needs a 2-D matrix with at least 2 trials")
    constant = np.all(X == X[0], axis=0)
    dropped = [int(i) for i in np.flatnonzero(constant)]
    if constant.all():
        raise EmptyMatrixError("every unit is constant across trials")
    kept = X[:, ~constant]
    Z = (kept - kept.mean(0)) / kept.std(0)
    return PopulationMatrix(Z, labels, True, dropped)


def from_snapshot(snapshot, zscored=True, include_probes=False) -> PopulationMatrix:
    """Population view of a training snapshot (probe rows dropped by default)."""
    labels = np.array(snapshot.labels)
    mask = np.ones(len(labels), bool) if include_probes else snapshot.train_mask
    if zscored:
        return zscore(snapshot.activations[mask], labels[mask])
    return PopulationMatrix(snapshot.activations[mask], labels[mask])


# --------------------------------------------------------------------------
# representational similarity

@dataclass
class SimilaritySummary:
    mean_within_target: float
    mean_within_nontarget: float
    mean_cross: float
    matrix: np.ndarray | None = None

    def to_json(self) -> dict:
        return {"mean_within_target": _nan_to_none(self.mean_within_target),
                "mean_within_nontarget": _nan_to_none(self.mean_within_nontarget),
                "mean_cross": _nan_to_none(self.mean_cross)}


def _row_standardize(X):
    Xc = X - X.mean(1, keepdims=True)
    norms = np.linalg.norm(Xc, axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return Xc / norms


def _block_mean(A, B=None):
    if B is None:
        n = A.shape[0]
        if n < 2:
            return math.nan
        C = A @ A.T
        return float((C.sum() - np.trace(C)) / (n * (n - 1)))
    return float((A.sum(0) @ B.sum(0)) / (A.shape[0] * B.shape[0]))


def rsa(pop: PopulationMatrix, classes=CLASSES, min_class_size: int = 2,
        full_matrix: bool = False) -> SimilaritySummary:
    """Pearson correlation between trial vectors, summarized by class block.

    ``min_class_size=1`` allows a single-trial class; its within-class mean
    is then reported as NaN.
    """
    pos, neg = classes
    A = pop.X[pop.labels == pos]
    B = pop.X[pop.labels == neg]
    for name, block in ((pos, A), (neg, B)):
        if block.shape[0] < max(min_class_size, 1):
            raise ClassSizeError(f"class {name!r} has {block.shape[0]} trials; "
                                 f"need at least {max(min_class_size, 1)}")
    As, Bs = _row_standardize(A), _row_standardize(B)
    matrix = None
    if full_matrix:
        keep = np.isin(pop.labels, [pos, neg])
        Z = _row_standardize(pop.X[keep])
        matrix = Z @ Z.T
    return SimilaritySummary(_block_mean(As), _block_mean(Bs), _block_mean(As, Bs), matrix)


def correlation_matrix(pop: PopulationMatrix) -> np.ndarray:
    Z = _row_standardize(pop.X)
    return Z @ Z.T


# --------------------------------------------------------------------------
# PCA

def pca_project(pop: PopulationMatrix | np.ndarray, dims: int = 2):
    """Project trials onto the top ``dims`` principal components.

    Returns ``(projection, explained_variance_fraction)``. Each component is
    signed so that its largest-magnitude loading is positive.
    """
    X = pop.X if isinstance(pop, PopulationMatrix) else np.asarray(pop, dtype=float)
    n = X.shape[0]
    if n <= dims:
        raise InvalidParameterError(f"need more trials ({n}) than dims ({dims})")
    Xc = X - X.mean(0)
    _, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    var = s ** 2
    total = var.sum()
    tol = max(Xc.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > tol))
    proj = np.zeros((n, dims))
    explained = np.zeros(dims)
    if rank < dims:
        warnings.warn(f"data rank {rank} < {dims}; remaining components zero-filled",
                      RuntimeWarning, stacklevel=2)
    for c in range(min(rank, dims)):
        v = Vt[c]
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        proj[:, c] = Xc @ v
        explained[c] = var[c] / total
    return proj, explained


# --------------------------------------------------------------------------
# LDA

def _shrink(S, n_trials):
    D = S.shape[0]
    if n_trials < SHRINK_BELOW_RATIO * D:
        return (1 - SHRINKAGE) * S + SHRINKAGE * np.trace(S) / D * np.eye(D)
    return S


def _solve(S, B):
    try:
        cond = np.linalg.cond(S)
    except np.linalg.LinAlgError as exc:
        raise SingularityError(str(exc)) from exc
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularityError(f"covariance is singular (condition number {cond:.3g})")
    return np.linalg.solve(S, B)


@dataclass
class LdaModel:
    classes: np.ndarray
    means: np.ndarray
    cov: np.ndarray
    priors: np.ndarray

    def discriminants(self, X) -> np.ndarray:
        """delta_k(x) = x' S^-1 m_k - m_k' S^-1 m_k / 2 + log pi_k, via solves."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Sinv_m = _solve(self.cov, self.means.T)
        const = -0.5 * np.sum(self.means.T * Sinv_m, axis=0) + np.log(self.priors)
        return X @ Sinv_m + const

    def posterior(self, X) -> np.ndarray:
        d = self.discriminants(X)
        d -= d.max(1, keepdims=True)
        e = np.exp(d)
        return e / e.sum(1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return self.classes[np.argmax(self.discriminants(X), axis=1)]


def lda_fit(X_train, y_train, priors=None) -> LdaModel:
    X = np.asarray(X_train, dtype=float)
    y = np.asarray(y_train)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ClassSizeError("LDA needs at least two classes")
    means = np.stack([X[y == c].mean(0) for c in classes])
    resid = np.concatenate([X[y == c] - means[i] for i, c in enumerate(classes)])
    dof = max(X.shape[0] - len(classes), 1)
    cov = _shrink(resid.T @ resid / dof, X.shape[0])
    if priors is None:
        priors = np.array([np.mean(y == c) for c in classes])
    model = LdaModel(classes, means, cov, np.asarray(priors, dtype=float))
    _solve(cov, means.T)  # fail early on singular covariance
    return model


@dataclass
class DecodeResult:
    mean_accuracy: float
    standard_error: float
    accuracies: np.ndarray
    posteriors: np.ndarray
    posterior_mean: float
    posterior_se: float

    def to_json(self) -> dict:
        return {"mean_accuracy": self.mean_accuracy, "standard_error": self.standard_error,
                "posterior_mean": self.posterior_mean, "posterior_se": self.posterior_se,
                "accuracies": [float(a) for a in self.accuracies],
                "posteriors": [float(p) for p in self.posteriors]}


def _seed_stream(rng, count):
    """Independent child generators split from one root, schedule-independent."""
    if isinstance(rng, np.random.Generator):
        root = int(rng.integers(2**63 - 1))
    else:
        root = 0 if rng is None else int(rng)
    return [np.random.default_rng(s) for s in np.random.SeedSequence(root).spawn(count)]


def kfold_decode(pop: PopulationMatrix, folds: int = 10, iterations: int = 20, rng=0,
                 classes=CLASSES) -> DecodeResult:
    """Stratified k-fold LDA decoding, reshuffled each iteration.

    ``posteriors[i]`` is trial i's held-out posterior for its true class,
    averaged over iterations (every trial is held out once per iteration).
    """
    keep = np.isin(pop.labels, list(classes))
    X, y = pop.X[keep], pop.labels[keep]
    for c in classes:
        if np.sum(y == c) < folds:
            raise FoldInfeasibleError(f"class {c!r} has {np.sum(y == c)} trials; "
                                      f"{folds}-fold CV needs at least {folds}")
    accs = []
    post_sum = np.zeros(len(y))
    for it_rng in _seed_stream(rng, iterations):
        skf = StratifiedKFold(n_splits=folds, shuffle=True,
                              random_state=int(it_rng.integers(2**31 - 1)))
        for tr, te in skf.split(X, y):
            model = lda_fit(X[tr], y[tr])
            accs.append(np.mean(model.predict(X[te]) == y[te]))
            P = model.posterior(X[te])
            col = np.searchsorted(model.classes, y[te])
            post_sum[te] += P[np.arange(len(te)), col]
    accs = np.array(accs)
    posts = post_sum / iterations
    se = float(accs.std(ddof=1) / math.sqrt(len(accs))) if len(accs) > 1 else 0.0
    return DecodeResult(float(accs.mean()), se, accs, posts, float(posts.mean()),
                        float(posts.std(ddof=1) / math.sqrt(len(posts))))


# --------------------------------------------------------------------------
# Fisher discriminant

@dataclass
class FisherResult:
    w: np.ndarray
    J: float
    S_w: np.ndarray
    S_b: np.ndarray

    def criterion(self, w) -> float:
        w = np.asarray(w, dtype=float)
        return float(w @ self.S_b @ w / (w @ self.S_w @ w))


def fisher_discriminant(pop: PopulationMatrix, classes=CLASSES,
                        min_class_trials: int = 2) -> FisherResult:
    """Two-class Fisher discriminant.

    The within-class term is the sum of the two class covariances, so J is
    the squared distance of projected means over the summed projected
    variances. The direction is S_w^-1 (m1 - m2), normalized.
    """
    pos, neg = classes
    A = pop.X[pop.labels == pos]
    B = pop.X[pop.labels == neg]
    for name, block in ((pos, A), (neg, B)):
        if block.shape[0] < min_class_trials:
            raise ClassSizeError(f"class {name!r} has {block.shape[0]} trials; "
                                 f"need at least {min_class_trials}")
    m1, m2 = A.mean(0), B.mean(0)
    S_w = np.atleast_2d(np.cov(A, rowvar=False, ddof=0)) + np.atleast_2d(np.cov(B, rowvar=False, ddof=0))
    S_w = _shrink(S_w, A.shape[0] + B.shape[0])
    diff = m1 - m2
    S_b = np.outer(diff, diff)
    w = _solve(S_w, diff)
    norm = np.linalg.norm(w)
    if norm > 0:
        w = w / norm
    res = FisherResult(w, 0.0, S_w, S_b)
    res.J = res.criterion(w) if norm > 0 else 0.0
    return res


# --------------------------------------------------------------------------
# max-margin SVM

@dataclass
class MarginReport:
    w: np.ndarray
    b: float
    margin: float
    distances: np.ndarray
    mean_closest_1pct: float
    mean_closest_5pct: float
    alpha: np.ndarray | None = None
    iterations: int = 0
    kkt_gap: float = 0.0

    def to_json(self) -> dict:
        return {"w": [float(v) for v in self.w], "b": float(self.b), "margin": self.margin,
                "mean_closest_1pct": self.mean_closest_1pct,
                "mean_closest_5pct": self.mean_closest_5pct,
                "distances": [float(d) for d in self.distances],
                "iterations": self.iterations, "kkt_gap": self.kkt_gap}


def _dual_qp(K, y, C, tol, max_iter):
    """Dual soft-margin SVM by a primal-dual interior-point method.

    Minimizes a'Qa/2 - sum(a) subject to 0 <= a <= C and y'a = 0, where
    Q = (y y') * K, using Mehrotra predictor-corrector steps. The upper-bound
    slack s = C - a is carried as its own variable so that huge C stays
    accurate. Stops when the relative duality gap and both residuals fall
    below ``tol``. Returns ``(alpha, b, iterations, gap)``; the bias is the
    multiplier of the equality constraint.
    """
    n = len(y)
    Q = K * np.outer(y, y)
    qmax = max(float(np.abs(Q).max()), 1e-300)
    ones = np.ones(n)
    a = np.full(n, min(1.0, C / 2))
    s = C - a
    z = np.ones(n)
    u = np.minimum(1.0, 1.0 / s)
    nu = 0.0
    gap = resid = math.inf

    def longest_step(a, s, z, u, da, dz, du, frac):
        step = 1.0
        for v, dv in ((a, da), (s, -da), (z, dz), (u, du)):
            neg = dv < 0
            if neg.any():
                step = min(step, frac * float(np.min(-v[neg] / dv[neg])))
        return step

    for it in range(max_iter + 1):
        r_d = Q @ a - ones - z + u + nu * y
        r_p = float(y @ a)
        mu = (a @ z + s @ u) / (2 * n)
        gap = 2 * n * mu / (1 + abs(0.5 * a @ Q @ a - a.sum()))
        size = 1 + qmax * max(1.0, float(a.max()))
        resid = max(float(np.abs(r_d).max()), abs(r_p)) / size
        if gap < tol and resid < tol:
            break
        if it == max_iter:
            raise ConvergenceError(f"SVM solver did not converge in {max_iter} iterations "
                                   f"(duality gap {gap:.3g})", grad_norm=max(gap, resid))
        H = Q + np.diag(z / a + u / s)

        def direction(r_z, r_u):
            rhs = -r_d + r_z / a - r_u / s
            try:
                sol = np.linalg.solve(H, np.column_stack([rhs, y]))
            except np.linalg.LinAlgError:
                raise ConvergenceError("SVM Newton system is singular",
                                       grad_norm=max(gap, resid)) from None
            dnu = (y @ sol[:, 0] + r_p) / (y @ sol[:, 1])
            da = sol[:, 0] - sol[:, 1] * dnu
            return da, (r_z - z * da) / a, (r_u + u * da) / s, dnu

        # predictor, then centred corrector
        da, dz, du, _ = direction(-a * z, -s * u)
        step = longest_step(a, s, z, u, da, dz, du, 1.0)
        mu_aff = ((a + step * da) @ (z + step * dz) + (s - step * da) @ (u + step * du)) / (2 * n)
        sigma = (mu_aff / mu) ** 3
        da, dz, du, dnu = direction(sigma * mu - a * z - da * dz, sigma * mu - s * u + da * du)
        step = longest_step(a, s, z, u, da, dz, du, 0.995)
        a = a + step * da
        s = s - step * da
        z = z + step * dz
        u = u + step * du
        nu += step * dnu
    return a, float(nu), it, float(gap)


def svm_fit_arrays(X, y, C: float = 1e6, tol: float = 1e-6, max_iter: int = 500,
                   percents=(1, 5)) -> MarginReport:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if not (np.any(y > 0) and np.any(y < 0)):
        raise ClassSizeError("SVM needs at least one trial of each class")
    K = X @ X.T
    alpha, b, iters, gap = _dual_qp(K, y, C, tol, max_iter)
    w = (alpha * y) @ X
    norm = float(np.linalg.norm(w))
    if norm == 0:
        raise ConvergenceError("SVM weight vector is zero", grad_norm=gap)
    d = y * (X @ w + b) / norm
    report = MarginReport(w, b, 1.0 / norm, np.sort(d, kind="stable"), math.nan, math.nan,
                          alpha, iters, gap)
    pct = _percentile_means(d, percents)
    report.mean_closest_1pct = pct.get(1, math.nan)
    report.mean_closest_5pct = pct.get(5, math.nan)
    return report


def svm_fit(pop: PopulationMatrix, classes=CLASSES, **kw) -> MarginReport:
    """Max-margin linear SVM between two classes; margin = 1/|w|.

    Solved in the dual with a large box constant, which recovers the
    hard-margin solution whenever the classes are separable.
    """
    X, y = pop.two_class(classes)
    return svm_fit_arrays(X, y, **kw)


def _percentile_means(d, percents):
    order = np.argsort(d, kind="stable")
    out = {}
    for p in percents:
        count = max(1, math.ceil(p / 100 * len(d) - 1e-12))
        out[p] = float(np.mean(d[order[:count]]))
    return out


def signed_distances(report: MarginReport, X, y) -> np.ndarray:
    return np.asarray(y) * (np.asarray(X) @ report.w + report.b) / np.linalg.norm(report.w)


def margin_percentiles(report: MarginReport, pop: PopulationMatrix, percents=(1, 5),
                       classes=CLASSES) -> dict:
    """Mean signed distance of the closest ceil(p% * trials) trials, per p."""
    X, y = pop.two_class(classes)
    return _percentile_means(signed_distances(report, X, y), percents)


@dataclass
class MarginSeries:
    epochs: list[int]
    reports: list[MarginReport]

    @property
    def margins(self) -> np.ndarray:
        return np.array([r.margin for r in self.reports])

    @property
    def normalized(self) -> np.ndarray:
        m = self.margins
        return m / m[0] if m.size else m

    def at(self, epoch) -> MarginReport:
        return self.reports[self.epochs.index(epoch)]


def margin_track(snapshots, **svm_kw) -> MarginSeries:
    """Refit a max-margin SVM from scratch on every snapshot's training rows."""
    if not snapshots:
        return MarginSeries([], [])
    n_units = snapshots[0].activations.shape[1]
    labels = snapshots[0].labels
    reports = []
    for idx, snap in enumerate(snapshots):
        if snap.activations.shape[1] != n_units or snap.labels != labels:
            raise InvalidParameterError(f"snapshot {idx} differs in units or labels")
        X, y = snap.train_view()
        try:
            reports.append(svm_fit_arrays(X, y, **svm_kw))
        except ConvergenceError as exc:
            raise ConvergenceError(f"snapshot {idx} (epoch {snap.epoch}): {exc}",
                                   grad_norm=exc.grad_norm, index=idx) from exc
    return MarginSeries([s.epoch for s in snapshots], reports)


# --------------------------------------------------------------------------
# mean-matched random baseline

@dataclass
class BaselineResult:
    observed: float
    null: np.ndarray
    null_mean: float
    null_sd: float
    z: float

    def to_json(self) -> dict:
        return {"observed": self.observed, "null_mean": self.null_mean,
                "null_sd": self.null_sd, "z": self.z, "draws": len(self.null),
                "null": [float(v) for v in self.null]}


def meanmatched_baseline(pop: PopulationMatrix, draws: int = 500, rng=0,
                         classes=CLASSES, min_class_size: int = 2) -> BaselineResult:
    """Null distribution of mean cross-class correlation from Gaussian matrices.

    Each draw has unit variance and the same per-unit mean as ``pop``; ``z``
    is the observed value's distance from the null mean in null sd units.
    """
    keep = np.isin(pop.labels, list(classes))
    X, labels = pop.X[keep], pop.labels[keep]
    observed = rsa(PopulationMatrix(X, labels), classes, min_class_size).mean_cross
    mu = X.mean(0)
    pos_rows = labels == classes[0]
    null = np.empty(draws)
    for d, g in enumerate(_seed_stream(rng, draws)):
        R = mu + g.standard_normal(X.shape)
        null[d] = _block_mean(_row_standardize(R[pos_rows]), _row_standardize(R[~pos_rows]))
    m, s = float(null.mean()), float(null.std(ddof=1))
    return BaselineResult(float(observed), null, m, s, (observed - m) / s)


# --------------------------------------------------------------------------
# file formats

def write_population_csv(pop: PopulationMatrix, path, labels_path) -> None:
    ids = pop.unit_ids or [f"u{i}" for i in range(pop.n_units)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ids)
        for row in pop.X:
            w.writerow([f"{v:.17g}" for v in row])
    with open(labels_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial_id", "label"])
        for i, lab in enumerate(pop.labels):
            w.writerow([i, lab])


def read_population_csv(path, labels_path) -> PopulationMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    with open(labels_path, newline="") as fh:
        lab_rows = list(csv.reader(fh))[1:]
    X = np.array([[float(v) for v in r] for r in rows[1:]])
    labels = np.array([r[1] for r in sorted(lab_rows, key=lambda r: int(r[0]))])
    return PopulationMatrix(X, labels, unit_ids=rows[0])


def _nan_to_none(v):
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else float(v)


def dump_json(obj, path) -> None:
    doc = obj.to_json() if hasattr(obj, "to_json") else asdict(obj)
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
