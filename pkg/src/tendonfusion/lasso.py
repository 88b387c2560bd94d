"""L1-penalized least squares by cyclic coordinate descent.

Minimizes (1/2n)||y - b - X beta||^2 + alpha ||beta||_1 with an unpenalized
intercept. Columns are standardized (population std) before the penalty is
applied unless ``standardize=False``; constant columns are pinned at zero.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, LassoConvergenceError
from .features import FEATURE_NAMES, HARALICK_NAMES

N_DEEP = 200


@dataclass(frozen=True)
class LassoConfig:
    alpha: float = 0.1
    tol: float = 1e-6
    max_sweeps: int = 10000
    standardize: bool = True

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be positive")


@dataclass(frozen=True, eq=False)
class LassoModel:
    intercept: float
    coefficients: np.ndarray  # standardized space
    mean: np.ndarray
    scale: np.ndarray
    alpha: float
    n_sweeps: int = 0
    objective_path: tuple = field(default=(), repr=False)

    @property
    def support(self):
        return tuple(int(i) for i in np.flatnonzero(self.coefficients))

    @property
    def coef_original(self):
        return self.coefficients / self.scale

    @property
    def intercept_original(self):
        return float(self.intercept - self.coef_original @ self.mean)

    def predict(self, X):
        X = np.asarray(X, dtype=np.float64)
        return X @ self.coef_original + self.intercept_original


def soft_threshold(z, t):
    return np.sign(z) * max(abs(z) - t, 0.0)


def _standardize(X, standardize):
    mean = X.mean(axis=0)
    if standardize:
        scale = X.std(axis=0)
    else:
        scale = np.ones(X.shape[1])
    spread = np.ptp(X, axis=0) > 0
    scale = np.where(spread & (scale > 0), scale, 1.0)
    return mean, scale, spread


def lasso_objective(Xs, yc, beta, alpha):
    r = yc - Xs @ beta
    return float(r @ r / (2 * len(yc)) + alpha * np.abs(beta).sum())


def duality_gap(Xs, yc, beta, alpha):
    n = len(yc)
    r = yc - Xs @ beta
    primal = r @ r / (2 * n) + alpha * np.abs(beta).sum()
    corr = np.abs(Xs.T @ r).max(initial=0.0) / n
    s = 1.0 if corr <= alpha or corr == 0 else alpha / corr
    theta = s * r
    dual = (yc @ yc - (yc - theta) @ (yc - theta)) / (2 * n)
    return float(primal - dual)


def fit_lasso(X, y, config=None):
    """Coordinate descent on the Gram form; converged when the largest
    coefficient change in a sweep drops below ``config.tol``."""
    config = config or LassoConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = X.shape
    if n < 2:
        raise DataError("LASSO needs at least two samples")
    if y.shape != (n,) or not np.all(np.isfinite(y)):
        raise DataError("y must be a finite vector matching X rows")
    mean, scale, spread = _standardize(X, config.standardize)
    Xs = (X - mean) / scale
    Xs[:, ~spread] = 0.0
    ybar = y.mean()
    yc = y - ybar

    G = Xs.T @ Xs / n
    c = Xs.T @ yc / n
    yy = yc @ yc / n
    diag = np.diag(G).copy()
    active = np.flatnonzero(diag > 0)
    alpha = config.alpha

    beta = np.zeros(p)
    q = np.zeros(p)  # G @ beta

    def objective():
        return 0.5 * (yy - 2 * c @ beta + beta @ q) + alpha * np.abs(beta).sum()

    path = [objective()]
    for sweep in range(1, config.max_sweeps + 1):
        max_delta = 0.0
        for j in active:
            old = beta[j]
            z = c[j] - q[j] + diag[j] * old
            new = soft_threshold(z, alpha) / diag[j]
            if new != old:
                q += G[:, j] * (new - old)
                beta[j] = new
                delta = abs(new - old)
                if delta > max_delta:
                    max_delta = delta
        f = objective()
        assert f <= path[-1] + 1e-10 * max(1.0, abs(path[-1])), \
            f"LASSO objective increased at sweep {sweep}: {path[-1]} -> {f}"
        path.append(f)
        if max_delta < config.tol:
            beta[np.abs(beta) == 0] = 0.0
            return LassoModel(float(ybar), beta, mean, scale, alpha, sweep, tuple(path))
    model = LassoModel(float(ybar), beta, mean, scale, alpha, config.max_sweeps, tuple(path))
    gap = duality_gap(Xs, yc, beta, alpha)
    raise LassoConvergenceError(
        f"LASSO did not converge in {config.max_sweeps} sweeps (duality gap {gap:.3g})",
        model=model, gap=gap)


def fused_feature_name(index):
    if index < N_DEEP:
        return f"pc{index:03d}"
    return FEATURE_NAMES[index - N_DEEP]


@dataclass(frozen=True)
class SelectedFeatures:
    indices: tuple
    deep: tuple
    handcrafted: tuple

    @property
    def texture(self):
        return tuple(n for n in self.handcrafted if n.rsplit("_d", 1)[0] in HARALICK_NAMES)

    def summary(self):
        text = f"{len(self.deep)} DL features and {len(self.handcrafted)} hand-crafted features"
        tex = self.texture
        if tex:
            text += f", including {len(tex)} texture ({', '.join(tex)})"
        else:
            text += ", no texture features"
        return text


def selected_features(model_or_support, n_deep=N_DEEP):
    support = (model_or_support.support if isinstance(model_or_support, LassoModel)
               else tuple(sorted(int(i) for i in model_or_support)))
    deep = tuple(i for i in support if i < n_deep)
    hand = tuple(FEATURE_NAMES[i - n_deep] for i in support if i >= n_deep)
    return SelectedFeatures(tuple(support), deep, hand)


def write_selection_report(selections, text_path, csv_path, labels=None, stamp=None):
    """Per-parameter listing of selected features as text and CSV."""
    labels = labels or {}
    lines = [f"# {stamp}"] if stamp else []
    for param, sel in selections.items():
        lines.append(f"{labels.get(param, param)}: {sel.summary()}")
    with open(text_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(csv_path, "w", newline="") as fh:
        if stamp:
            fh.write(f"# {stamp}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("parameter", "index", "block", "name"))
        for param, sel in selections.items():
            for i in sel.indices:
                w.writerow((labels.get(param, param), i, "deep" if i < N_DEEP else "handcrafted",
                            fused_feature_name(i)))
