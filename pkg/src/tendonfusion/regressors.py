"""Meta-regressors trained on LASSO-selected features.

All four kinds standardize their inputs with the training mean and
population standard deviation and store those parameters alongside the
learned weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import ConvergenceError, DataError, RankDeficientError

MAX_INPUTS = 64
POLY_JITTER = 1e-8
HIDDEN_UNITS = 4


class Kind(str, Enum):
    LR = "LR"
    POLY2 = "Poly2"
    SVR = "SVR"
    MLP4 = "MLP4"


@dataclass(frozen=True)
class RegressorSpec:
    kind: Kind = Kind.LR
    C: float = 1.0
    epsilon: float = 0.1
    gamma: float | None = None  # None -> 1 / n_inputs
    svr_tol: float = 1e-3
    svr_max_iter: int = 200_000
    svr_max_train: int = 2000
    learning_rate: float = 0.05
    momentum: float = 0.9
    epochs: int = 3000

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.C <= 0:
            raise ValueError("SVR C must be positive")
        if self.epsilon < 0:
            raise ValueError("SVR epsilon must be nonnegative")
        if self.gamma is not None and self.gamma <= 0:
            raise ValueError("SVR gamma must be positive")
        if self.learning_rate <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("bad MLP optimizer settings")

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["kind"] = self.kind.value
        return d


def _standardizer(X):
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    return mean, scale


@dataclass(frozen=True, eq=False)
class TrainedRegressor:
    kind: Kind
    x_mean: np.ndarray
    x_scale: np.ndarray
    params: dict = field(default_factory=dict)
    spec: RegressorSpec | None = None
    history: tuple = field(default=(), repr=False)

    @property
    def n_inputs(self):
        return self.x_mean.shape[0]

    def standardize(self, X):
        return (X - self.x_mean) / self.x_scale

    def predict(self, X, clamp=False):
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        X2 = X[None, :] if single else X
        if X2.shape[1] != self.n_inputs:
            raise DataError(f"expected {self.n_inputs} inputs, got {X2.shape[1]}")
        out = _PREDICT[self.kind](self, self.standardize(X2))
        if clamp:
            out = np.clip(out, 1.0, 7.0)
        return float(out[0]) if single else out


# -- linear / polynomial ---------------------------------------------------------

def _fit_lr(X, y, spec, seed):
    mean, scale = _standardizer(X)
    A = np.column_stack([np.ones(len(y)), (X - mean) / scale])
    w, _, rank, sv = np.linalg.lstsq(A, y, rcond=None)
    if rank < A.shape[1]:
        raise RankDeficientError(f"design matrix rank {rank} < {A.shape[1]} columns")
    return TrainedRegressor(Kind.LR, mean, scale, {"bias": np.array([w[0]]), "weights": w[1:]}, spec)


def _predict_lr(model, Z):
    return Z @ model.params["weights"] + model.params["bias"][0]


def poly2_expand(Z):
    """Columns [1, z_i, z_i^2, z_i z_j (i<j)]."""
    n, p = Z.shape
    iu, ju = np.triu_indices(p, k=1)
    return np.hstack([np.ones((n, 1)), Z, Z ** 2, Z[:, iu] * Z[:, ju]])


def n_poly2_terms(p):
    return 1 + 2 * p + p * (p - 1) // 2


def _fit_poly2(X, y, spec, seed, quadratic=True):
    mean, scale = _standardizer(X)
    Z = (X - mean) / scale
    A = poly2_expand(Z) if quadratic else np.column_stack([np.ones(len(y)), Z])
    if A.shape[0] < A.shape[1]:
        raise RankDeficientError(f"{A.shape[0]} samples for {A.shape[1]} polynomial terms")
    gram = A.T @ A
    eig = np.linalg.eigvalsh(gram)
    if eig[0] <= eig[-1] * 1e-12:
        raise RankDeficientError("polynomial design is rank deficient beyond jitter")
    w = np.linalg.solve(gram + POLY_JITTER * np.eye(A.shape[1]), A.T @ y)
    if not quadratic:
        p = Z.shape[1]
        w = np.concatenate([w, np.zeros(n_poly2_terms(p) - 1 - p)])
    return TrainedRegressor(Kind.POLY2, mean, scale, {"weights": w}, spec)


def _predict_poly2(model, Z):
    return poly2_expand(Z) @ model.params["weights"]


def poly2_raw_coefficients(model):
    """Re-express a Poly2 fit in unstandardized inputs, same term layout."""
    w = model.params["weights"]
    p = model.n_inputs
    iu, ju = np.triu_indices(p, k=1)
    w0, lin, sq, cross = w[0], w[1:1 + p], w[1 + p:1 + 2 * p], w[1 + 2 * p:]
    Q = np.diag(sq)
    Q[iu, ju] = cross / 2
    Q[ju, iu] = cross / 2
    d = 1.0 / model.x_scale
    m = model.x_mean
    Qr = d[:, None] * Q * d[None, :]
    lin_r = d * lin - 2 * Qr @ m
    const = w0 - lin @ (d * m) + m @ Qr @ m
    return np.concatenate([[const], lin_r, np.diag(Qr), 2 * Qr[iu, ju]])


# -- epsilon-SVR -------------------------------------------------------------------

def rbf_kernel(A, B, gamma):
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2 * A @ B.T
    return np.exp(-gamma * np.maximum(sq, 0.0))


def _smo_epsilon_svr(K, z, C, eps, tol, max_iter):
    """Dual of epsilon-SVR over 2l variables with second-order working-set
    selection. Returns (dual coefficients alpha - alpha*, rho, iterations)."""
    l = len(z)
    y = np.concatenate([np.ones(l), -np.ones(l)])
    a = np.zeros(2 * l)
    G = np.concatenate([eps - z, eps + z])
    Kd = np.diag(K)
    Kd2 = np.concatenate([Kd, Kd])
    tau = 1e-12
    for it in range(max_iter):
        vy = -y * G
        up = ((y > 0) & (a < C)) | ((y < 0) & (a > 0))
        low = ((y > 0) & (a > 0)) | ((y < 0) & (a < C))
        if not up.any() or not low.any():
            break
        vu = np.where(up, vy, -np.inf)
        i = int(np.argmax(vu))
        gmax = vu[i]
        vl = np.where(low, vy, np.inf)
        gmin = vl.min()
        if gmax - gmin < tol:
            break
        ii = i % l
        Ki = K[ii]
        Qi = y[i] * y * np.concatenate([Ki, Ki])
        b = gmax - vy
        cand = low & (b > 0)
        quad = Kd2[i] + Kd2 - 2 * y[i] * y * Qi
        quad = np.where(quad > 0, quad, tau)
        score = np.where(cand, -(b * b) / quad, np.inf)
        j = int(np.argmin(score))
        jj = j % l
        Kj = K[jj]
        Qj = y[j] * y * np.concatenate([Kj, Kj])

        old_ai, old_aj = a[i], a[j]
        if y[i] != y[j]:
            qc = Kd2[i] + Kd2[j] + 2 * Qi[j]
            qc = qc if qc > 0 else tau
            delta = (-G[i] - G[j]) / qc
            diff = a[i] - a[j]
            a[i] += delta
            a[j] += delta
            if diff > 0:
                if a[j] < 0:
                    a[j] = 0.0
                    a[i] = diff
            elif a[i] < 0:
                a[i] = 0.0
                a[j] = -diff
            if diff > 0:
                if a[i] > C:
                    a[i] = C
                    a[j] = C - diff
            elif a[j] > C:
                a[j] = C
                a[i] = C + diff
        else:
            qc = Kd2[i] + Kd2[j] - 2 * Qi[j]
            qc = qc if qc > 0 else tau
            delta = (G[i] - G[j]) / qc
            total = a[i] + a[j]
            a[i] -= delta
            a[j] += delta
            if total > C:
                if a[i] > C:
                    a[i] = C
                    a[j] = total - C
            elif a[j] < 0:
                a[j] = 0.0
                a[i] = total
            if total > C:
                if a[j] > C:
                    a[j] = C
                    a[i] = total - C
            elif a[i] < 0:
                a[i] = 0.0
                a[j] = total
        G += Qi * (a[i] - old_ai) + Qj * (a[j] - old_aj)
    else:
        raise ConvergenceError(
            f"SMO did not reach KKT tolerance {tol} in {max_iter} iterations",
            {"iterations": max_iter, "violation": float(gmax - gmin)})

    # bias, as the mean over free variables or the midpoint of the feasible interval
    yG = y * G
    free = (a > 0) & (a < C)
    if free.any():
        rho = yG[free].mean()
    else:
        at_upper = a >= C
        ub_mask = (at_upper & (y < 0)) | (~at_upper & (y > 0))
        lb_mask = (at_upper & (y > 0)) | (~at_upper & (y < 0))
        ub = yG[ub_mask].min(initial=np.inf)
        lb = yG[lb_mask].max(initial=-np.inf)
        rho = (ub + lb) / 2
    return a[:l] - a[l:], float(rho), it


def _fit_svr(X, y, spec, seed):
    mean, scale = _standardizer(X)
    Z = (X - mean) / scale
    if len(y) > spec.svr_max_train:
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(len(y), size=spec.svr_max_train, replace=False))
        Z, y = Z[idx], y[idx]
    gamma = spec.gamma if spec.gamma is not None else 1.0 / Z.shape[1]
    K = rbf_kernel(Z, Z, gamma)
    coef, rho, iters = _smo_epsilon_svr(K, y, spec.C, spec.epsilon, spec.svr_tol, spec.svr_max_iter)
    sv = np.flatnonzero(coef)
    params = {
        "support_vectors": Z[sv], "dual_coef": coef[sv], "rho": np.array([rho]),
        "gamma": np.array([gamma]),
    }
    model = TrainedRegressor(Kind.SVR, mean, scale, params, spec, history=(iters,))
    # full training duals kept out of the persisted params; exposed for KKT checks
    object.__setattr__(model, "_train_dual", (Z, y, coef))
    return model


def _predict_svr(model, Z):
    p = model.params
    if p["dual_coef"].size == 0:
        return np.full(len(Z), -p["rho"][0])
    K = rbf_kernel(Z, p["support_vectors"], p["gamma"][0])
    return K @ p["dual_coef"] - p["rho"][0]


def svr_training_duals(model):
    """(standardized training inputs, targets, dual coefficients) of an SVR fit."""
    return model._train_dual


# -- MLP with 4 tanh hidden units --------------------------------------------------

def mlp_init(n_inputs, seed):
    rng = np.random.default_rng(seed)
    return {
        "W1": rng.normal(0.0, 1.0 / np.sqrt(n_inputs), size=(HIDDEN_UNITS, n_inputs)),
        "b1": np.zeros(HIDDEN_UNITS),
        "W2": rng.normal(0.0, 1.0 / np.sqrt(HIDDEN_UNITS), size=HIDDEN_UNITS),
        "b2": np.zeros(1),
    }


def mlp_forward(params, Z):
    h = np.tanh(Z @ params["W1"].T + params["b1"])
    return h @ params["W2"] + params["b2"][0], h


def mlp_loss_and_grads(params, Z, t):
    """Half mean squared error on standardized targets and its gradients."""
    n = len(t)
    out, h = mlp_forward(params, Z)
    r = out - t
    loss = 0.5 * float(r @ r) / n
    g_out = r / n
    g_h = np.outer(g_out, params["W2"]) * (1.0 - h * h)
    grads = {
        "W2": h.T @ g_out,
        "b2": np.array([g_out.sum()]),
        "W1": g_h.T @ Z,
        "b1": g_h.sum(axis=0),
    }
    return loss, grads


def _fit_mlp(X, y, spec, seed):
    mean, scale = _standardizer(X)
    Z = (X - mean) / scale
    y_mean = y.mean()
    y_scale = y.std() or 1.0
    t = (y - y_mean) / y_scale
    params = mlp_init(Z.shape[1], seed)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    lr = spec.learning_rate
    loss, grads = mlp_loss_and_grads(params, Z, t)
    history = [loss]
    for epoch in range(spec.epochs):
        while True:
            step = {k: spec.momentum * velocity[k] - lr * grads[k] for k in params}
            trial = {k: params[k] + step[k] for k in params}
            new_loss, new_grads = mlp_loss_and_grads(trial, Z, t)
            if np.isfinite(new_loss) and new_loss <= loss:
                break
            # restart: drop momentum; shrink the step if plain descent also fails
            if any(np.any(v) for v in velocity.values()):
                velocity = {k: np.zeros_like(v) for k, v in velocity.items()}
            else:
                lr *= 0.5
                if lr < 1e-12:
                    raise ConvergenceError(
                        "MLP training stalled: no descent step found",
                        {"epoch": epoch, "loss": loss})
        params, velocity, loss, grads = trial, step, new_loss, new_grads
        history.append(loss)
    params = dict(params)
    params["y_mean"] = np.array([y_mean])
    params["y_scale"] = np.array([y_scale])
    return TrainedRegressor(Kind.MLP4, mean, scale, params, spec, tuple(history))


def _predict_mlp(model, Z):
    out, _ = mlp_forward(model.params, Z)
    return out * model.params["y_scale"][0] + model.params["y_mean"][0]


def mlp_gradients(model, X, y):
    p = model.params
    Z = model.standardize(np.asarray(X, dtype=np.float64))
    t = (np.asarray(y, dtype=np.float64) - p["y_mean"][0]) / p["y_scale"][0]
    core = {k: p[k] for k in ("W1", "b1", "W2", "b2")}
    return mlp_loss_and_grads(core, Z, t)


def gradient_check(model, X, y, h=1e-5):
    """Largest relative gap between analytic and central-difference gradients."""
    if model.kind is not Kind.MLP4:
        raise ValueError("gradient_check applies to MLP4 models")
    p = model.params
    Z = model.standardize(np.asarray(X, dtype=np.float64))
    t = (np.asarray(y, dtype=np.float64) - p["y_mean"][0]) / p["y_scale"][0]
    core = {k: p[k].astype(np.float64).copy() for k in ("W1", "b1", "W2", "b2")}
    _, grads = mlp_loss_and_grads(core, Z, t)
    worst = 0.0
    for name, arr in core.items():
        flat = arr.reshape(-1)
        gflat = grads[name].reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            lp, _ = mlp_loss_and_grads(core, Z, t)
            flat[idx] = orig - h
            lm, _ = mlp_loss_and_grads(core, Z, t)
            flat[idx] = orig
            numeric = (lp - lm) / (2 * h)
            analytic = gflat[idx]
            denom = max(abs(numeric), abs(analytic), 1e-8)
            worst = max(worst, abs(numeric - analytic) / denom)
    return worst


_FIT = {Kind.LR: _fit_lr, Kind.POLY2: _fit_poly2, Kind.SVR: _fit_svr, Kind.MLP4: _fit_mlp}
_PREDICT = {Kind.LR: _predict_lr, Kind.POLY2: _predict_poly2, Kind.SVR: _predict_svr,
            Kind.MLP4: _predict_mlp}


def fit(spec, X, y, seed=0):
    if not isinstance(spec, RegressorSpec):
        spec = RegressorSpec(kind=spec)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise DataError("X must be 2-D with one row per target")
    n, p = X.shape
    if p == 0:
        raise DataError("no input features")
    if p > MAX_INPUTS:
        raise DataError(f"{p} inputs exceed the limit of {MAX_INPUTS}")
    if spec.kind in (Kind.LR, Kind.POLY2) and n < p + 1:
        raise RankDeficientError(f"{n} samples cannot determine {p + 1} coefficients")
    return _FIT[spec.kind](X, y, spec, seed)


def from_params(kind, x_mean, x_scale, params, spec=None):
    return TrainedRegressor(Kind(kind), np.asarray(x_mean, float), np.asarray(x_scale, float),
                            {k: np.asarray(v, float) for k, v in params.items()}, spec)


def with_params(model, **params):
    merged = dict(model.params)
    merged.update(params)
    return replace(model, params=merged)
