"""Penalised and unpenalised logistic regression.

The LASSO path is solved by proximal-Newton steps (IRLS outer loop, cyclic
coordinate descent inner loop) on standardised features with warm starts.
The penalty is chosen by K-fold cross-validated binomial deviance with the
one-standard-error rule, and the selected support is refit by maximum
likelihood. Clusterwise models repeat that pipeline per stratum.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit, logit

from ._cd_kernel import weighted_lasso_cd
from .cluster import ClusterAssignment
from .datamodel import Dataset, DesignMatrix, Encoding, encode

N_LAMBDA = 100
LAMBDA_MIN_RATIO = 1e-4
TOL = 1e-7
MIN_STRATUM_ROWS = 50
SEPARATION_LIMIT = 15.0


class CVError(ValueError):
    """Cross-validation folds cannot all contain both outcome classes."""


def _check_binary(y: np.ndarray) -> None:
    if y.min() == y.max():
        raise ValueError("outcome has a single class")


def _standardise(X: np.ndarray):
    center = X.mean(axis=0)
    scale = np.sqrt(((X - center) ** 2).mean(axis=0))
    const = scale <= 1e-12 * (1.0 + np.abs(center))
    scale = np.where(const, 1.0, scale)
    Xs = (X - center) / scale
    Xs[:, const] = 0.0
    return np.ascontiguousarray(Xs), center, scale, const


def penalised_objective(Xs, y, beta, b0, lam) -> float:
    """Mean negative log-likelihood plus ``lam * |beta|_1`` (standardised scale)."""
    eta = b0 + Xs @ beta
    return float(np.mean(np.logaddexp(0.0, eta) - y * eta) + lam * np.abs(beta).sum())


def lambda_max(Xs: np.ndarray, y: np.ndarray) -> float:
    """Smallest penalty at which every coefficient is zero."""
    if Xs.shape[1] == 0:
        return 0.0
    return float(np.max(np.abs(Xs.T @ (y - y.mean()))) / len(y))


def _solve(Xs, y, lam, beta, b0, tol=TOL, max_outer=100):
    """Proximal Newton for one penalty; ``beta`` is updated in place."""
    f_old = penalised_objective(Xs, y, beta, b0, lam)
    for _ in range(max_outer):
        eta = b0 + Xs @ beta
        p = expit(eta)
        w = np.maximum(p * (1.0 - p), 1e-5)
        z = eta + (y - p) / w
        new = beta.copy()
        new_b0, _ = weighted_lasso_cd(Xs, w, z, new, b0, lam, tol * 0.1, 10000)
        f_new = penalised_objective(Xs, y, new, new_b0, lam)
        step = 1.0
        while f_new > f_old + 1e-13 * abs(f_old) and step > 1e-6:
            step *= 0.5
            trial = beta + step * (new - beta)
            trial_b0 = b0 + step * (new_b0 - b0)
            f_new = penalised_objective(Xs, y, trial, trial_b0, lam)
            if f_new <= f_old:
                new, new_b0 = trial, trial_b0
                break
        change = max(np.max(np.abs(new - beta), initial=0.0), abs(new_b0 - b0))
        beta[:] = new
        b0 = new_b0
        f_old = f_new
        if change < tol:
            break
    return b0


@dataclass(frozen=True, eq=False)
class LassoFit:
    lam: float
    coef: np.ndarray  # original feature scale
    intercept: float
    feature_names: tuple
    beta_std: np.ndarray
    intercept_std: float
    center: np.ndarray
    scale: np.ndarray

    @property
    def support(self) -> tuple:
        return tuple(n for n, c in zip(self.feature_names, self.coef) if c != 0.0)

    def decision(self, X: np.ndarray) -> np.ndarray:
        return self.intercept + X @ self.coef


@dataclass(eq=False)
class LambdaPath:
    lambdas: np.ndarray
    fits: list
    feature_names: tuple
    lambda_max: float
    cv_mean: np.ndarray | None = None
    cv_se: np.ndarray | None = None

    def fit_at(self, lam: float) -> LassoFit:
        i = int(np.argmin(np.abs(self.lambdas - lam)))
        return self.fits[i]


def default_lambdas(lmax: float, n_lambda: int = N_LAMBDA, ratio: float = LAMBDA_MIN_RATIO) -> np.ndarray:
    if lmax <= 0:
        lmax = 1e-6
    return np.exp(np.linspace(np.log(lmax), np.log(lmax * ratio), n_lambda))


def _path_arrays(X, y, names, lambdas=None, n_lambda=N_LAMBDA, ratio=LAMBDA_MIN_RATIO, tol=TOL) -> LambdaPath:
    _check_binary(y)
    Xs, center, scale, _ = _standardise(X)
    lmax = lambda_max(Xs, y)
    if lambdas is None:
        lambdas = default_lambdas(lmax, n_lambda, ratio)
    lambdas = np.asarray(lambdas, dtype=np.float64)
    if np.any(np.diff(lambdas) >= 0):
        raise ValueError("lambdas must be strictly decreasing")
    beta = np.zeros(Xs.shape[1])
    b0 = float(logit(y.mean()))
    fits = []
    for lam in lambdas:
        if lam >= lmax:
            beta[:] = 0.0
            b0 = float(logit(y.mean()))
        else:
            b0 = _solve(Xs, y, lam, beta, b0, tol)
        coef = beta / scale
        fits.append(LassoFit(float(lam), coef, float(b0 - coef @ center), tuple(names),
                             beta.copy(), float(b0), center, scale))
    return LambdaPath(lambdas, fits, tuple(names), lmax)


def lasso_path(X: DesignMatrix, lambdas: Sequence[float] | None = None, *, n_lambda: int = N_LAMBDA,
               lambda_min_ratio: float = LAMBDA_MIN_RATIO, tol: float = TOL) -> LambdaPath:
    """L1-penalised logistic regression along a decreasing penalty grid.

    The objective is mean negative log-likelihood plus ``lambda * |beta|_1``
    over features standardised to zero mean and unit (population)
    variance; the intercept is unpenalised and coefficients are returned
    on the original scale. The default grid has ``n_lambda`` log-spaced
    values from ``lambda_max`` down to ``lambda_max * lambda_min_ratio``.
    """
    if X.n_rows < 2:
        raise ValueError("need at least two rows")
    return _path_arrays(X.X, X.outcome, X.feature_names, lambdas, n_lambda, lambda_min_ratio, tol)


# ---------------------------------------------------------------------------
# cross-validation


@dataclass(frozen=True, eq=False)
class CVResult:
    lambdas: np.ndarray
    cv_mean: np.ndarray
    cv_se: np.ndarray
    lambda_min: float
    lambda_1se: float
    folds: np.ndarray
    seed: int


def assign_folds(y: np.ndarray, n_folds: int, seed) -> np.ndarray:
    """Seeded shuffle into ``n_folds`` folds; falls back to stratified dealing
    if any fold (or its complement) would miss a class."""
    if n_folds < 2:
        raise ValueError("n_folds must be >= 2")
    n = len(y)
    rng = np.random.default_rng(seed)
    folds = np.empty(n, dtype=np.int64)
    folds[rng.permutation(n)] = np.arange(n) % n_folds

    def ok(f):
        for k in range(n_folds):
            held = y[f == k]
            kept = y[f != k]
            if len(held) == 0 or held.min() == held.max() or kept.min() == kept.max():
                return False
        return True

    if ok(folds):
        return folds
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    if len(pos) < n_folds or len(neg) < n_folds:
        raise CVError(f"{len(pos)} positives / {len(neg)} negatives cannot fill {n_folds} folds")
    order = np.concatenate([rng.permutation(pos), rng.permutation(neg)])
    folds[order] = np.arange(n) % n_folds
    return folds


def _deviance(y, eta) -> np.ndarray:
    # eta: (n, n_lambda)
    p = np.clip(expit(eta), 1e-15, 1 - 1e-15)
    return -2.0 * np.mean(y[:, None] * np.log(p) + (1 - y[:, None]) * np.log1p(-p), axis=0)


def cross_validate(X: DesignMatrix, path: LambdaPath, n_folds: int = 5, seed: int = 0) -> CVResult:
    """Held-out binomial deviance per penalty, and the min / 1-SE choices."""
    y = X.outcome
    folds = assign_folds(y, n_folds, seed)
    dev = np.empty((n_folds, len(path.lambdas)))
    for k in range(n_folds):
        tr = folds != k
        sub = _path_arrays(X.X[tr], y[tr], X.feature_names, path.lambdas)
        Xte = X.X[~tr]
        eta = np.column_stack([f.decision(Xte) for f in sub.fits])
        dev[k] = _deviance(y[~tr], eta)
    mean = dev.mean(axis=0)
    se = dev.std(axis=0, ddof=1) / np.sqrt(n_folds)
    i_min = int(np.argmin(mean))
    within = np.flatnonzero(mean <= mean[i_min] + se[i_min])
    lam_1se = float(path.lambdas[within].max())
    return CVResult(path.lambdas, mean, se, float(path.lambdas[i_min]), lam_1se, folds, seed)


def cv_select_lambda(X: DesignMatrix, path: LambdaPath, n_folds: int = 5, seed: int = 0) -> float:
    """Largest penalty whose CV deviance is within one standard error of the
    minimum. Also stores ``cv_mean``/``cv_se`` on ``path``."""
    cv = cross_validate(X, path, n_folds, seed)
    path.cv_mean = cv.cv_mean
    path.cv_se = cv.cv_se
    return cv.lambda_1se


# ---------------------------------------------------------------------------
# unpenalised refit


@dataclass(frozen=True, eq=False)
class LogisticModel:
    support: tuple
    coef: np.ndarray
    intercept: float
    converged: bool = True
    meta: Mapping = field(default_factory=dict)
    encoding: Encoding | None = field(default=None, repr=False)

    def decision(self, X) -> np.ndarray:
        M = _columns(X, self.support)
        return self.intercept + M @ self.coef

    def to_dict(self) -> dict:
        return {
            "kind": "logistic",
            "intercept": float(self.intercept),
            "coefficients": {n: float(c) for n, c in zip(self.support, self.coef)},
            "converged": bool(self.converged),
            **{k: v for k, v in self.meta.items()},
        }


def _columns(X, names: Sequence[str]) -> np.ndarray:
    if isinstance(X, DesignMatrix):
        missing = [n for n in names if n not in X.feature_names]
        if missing:
            raise ValueError(f"schema mismatch: features {missing} not in design matrix")
        idx = [X.feature_names.index(n) for n in names]
        return X.X[:, idx]
    M = np.asarray(X, dtype=np.float64)
    if M.ndim != 2 or M.shape[1] != len(names):
        raise ValueError("schema mismatch: expected one column per support feature")
    return M


def _loglik(A, y, beta) -> float:
    eta = A @ beta
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def refit_mle(X: DesignMatrix, support: Sequence, *, max_iter: int = 50, tol: float = 1e-10) -> LogisticModel:
    """Maximum-likelihood logistic regression on the ``support`` columns.

    Newton-Raphson with step halving; stops when the log-likelihood moves
    by less than ``tol``. If a standardised coefficient exceeds 15 in
    magnitude (quasi-separation) the last iterate below that bound is kept
    and ``converged`` is False. An empty support gives the closed-form
    intercept ``logit(mean(y))``.
    """
    names = tuple(X.feature_names[s] if isinstance(s, (int, np.integer)) else s for s in support)
    y = X.outcome
    ybar = float(y.mean())
    if not names:
        return LogisticModel((), np.zeros(0), float(logit(ybar)), True, {}, X.encoding)
    _check_binary(y)
    Xs, center, scale, const = _standardise(_columns(X, names))
    A = np.column_stack([np.ones(len(y)), Xs])
    beta = np.zeros(A.shape[1])
    beta[0] = logit(ybar)
    ll = _loglik(A, y, beta)
    converged = False
    for _ in range(max_iter):
        p = expit(A @ beta)
        g = A.T @ (y - p)
        H = A.T @ (A * (p * (1 - p))[:, None])
        step = np.linalg.lstsq(H, g, rcond=None)[0]
        t = 1.0
        new = beta + step
        ll_new = _loglik(A, y, new)
        while ll_new < ll - 1e-12 * abs(ll) and t > 1e-8:
            t *= 0.5
            new = beta + t * step
            ll_new = _loglik(A, y, new)
        if np.any(np.abs(new[1:]) > SEPARATION_LIMIT):
            break
        change = ll_new - ll
        beta, ll = new, ll_new
        if abs(change) < tol:
            converged = True
            break
    coef = np.where(const, 0.0, beta[1:] / scale)
    intercept = float(beta[0] - coef @ center)
    return LogisticModel(names, coef, intercept, converged, {}, X.encoding)


# ---------------------------------------------------------------------------
# composed pipeline


def fit_pipeline(X: DesignMatrix, *, n_folds: int = 5, seed: int = 0, n_lambda: int = N_LAMBDA,
                 lambda_min_ratio: float = LAMBDA_MIN_RATIO) -> LogisticModel:
    """LASSO path, 1-SE cross-validated penalty, then MLE refit of the support."""
    path = lasso_path(X, n_lambda=n_lambda, lambda_min_ratio=lambda_min_ratio)
    cv = cross_validate(X, path, n_folds, seed)
    chosen = path.fit_at(cv.lambda_1se)
    model = refit_mle(X, chosen.support)
    meta = {"lambda": cv.lambda_1se, "lambda_min": cv.lambda_min, "fold_seed": seed,
            "n_folds": n_folds, "lasso_support": list(chosen.support)}
    return LogisticModel(model.support, model.coef, model.intercept, model.converged, meta, X.encoding)


def intercept_only(y: np.ndarray, reason: str | None = None, encoding=None) -> LogisticModel:
    """Constant model; the rate is shrunk off 0/1 so predictions stay in (0, 1)."""
    n = len(y)
    rate = (y.sum() + 0.5) / (n + 1.0) if y.min() == y.max() else y.mean()
    meta = {"fallback": reason} if reason else {}
    return LogisticModel((), np.zeros(0), float(logit(rate)), True, meta, encoding)


# ---------------------------------------------------------------------------
# clusterwise models


def stratum_labels(d: Dataset, stratifier) -> np.ndarray:
    """Per-row stratum names for a categorical column name or a level
    clustering of the cluster target."""
    if isinstance(stratifier, ClusterAssignment):
        mapping = stratifier.mapping
        target = d.levels[d.target_name]
        table = np.array([str(mapping[lv]) if lv in mapping else "" for lv in target], dtype=object)
        return table[d[d.target_name]]
    return np.array(d.levels[stratifier], dtype=object)[d[stratifier]]


def _describe(stratifier) -> str:
    if isinstance(stratifier, ClusterAssignment):
        return f"level clustering (k={stratifier.k})"
    return str(stratifier)


@dataclass(frozen=True, eq=False)
class ClusterwiseModel:
    stratifier: object
    submodels: Mapping[str, LogisticModel]
    fallbacks: Mapping[str, str]
    global_fallback: LogisticModel
    encoding: Encoding

    def to_dict(self) -> dict:
        return {
            "kind": "clusterwise",
            "stratifier": _describe(self.stratifier),
            "submodels": {k: m.to_dict() for k, m in self.submodels.items()},
            "fallbacks": dict(self.fallbacks),
            "global_fallback": self.global_fallback.to_dict(),
        }


def fit_clusterwise(d: Dataset, stratifier, *, include: Sequence[str] = (), n_folds: int = 5,
                    seed: int = 0, min_rows: int = MIN_STRATUM_ROWS, n_lambda: int = N_LAMBDA,
                    encoding: Encoding | None = None) -> ClusterwiseModel:
    """Fit :func:`fit_pipeline` separately within each stratum.

    Strata with fewer than ``min_rows`` rows, a single outcome class, or too
    few events to form CV folds get an intercept-only model and a recorded
    reason. All strata share one indicator layout learned on ``d`` and the
    same fold seed.
    """
    X = encode(d, include=include, encoding=encoding)
    labels = stratum_labels(d, stratifier)
    submodels, fallbacks = {}, {}
    for s in dict.fromkeys(labels.tolist()):
        rows = np.flatnonzero(labels == s)
        Xs = X.take(rows)
        y = Xs.outcome
        reason = None
        if len(rows) < min_rows:
            reason = f"only {len(rows)} rows (< {min_rows})"
        elif y.min() == y.max():
            reason = "single outcome class"
        if reason is None:
            try:
                submodels[s] = fit_pipeline(Xs, n_folds=n_folds, seed=seed, n_lambda=n_lambda)
                continue
            except CVError as exc:
                reason = f"cannot form CV folds: {exc}"
        submodels[s] = intercept_only(y, reason, X.encoding)
        fallbacks[s] = reason
    glob = intercept_only(X.outcome, "unseen stratum", X.encoding)
    return ClusterwiseModel(stratifier, submodels, fallbacks, glob, X.encoding)


def predict(m, data) -> np.ndarray:
    """Event probabilities.

    ``data`` is a DesignMatrix or array for a LogisticModel (a Dataset is
    accepted when the model carries its encoding), and a Dataset for a
    ClusterwiseModel. Rows from strata unseen in training use the global
    intercept-only fallback.
    """
    if isinstance(m, ClusterwiseModel):
        if not isinstance(data, Dataset):
            raise TypeError("clusterwise prediction needs a Dataset")
        X = encode(data, encoding=m.encoding)
        labels = stratum_labels(data, m.stratifier)
        out = np.empty(data.n_rows)
        for s in dict.fromkeys(labels.tolist()):
            rows = np.flatnonzero(labels == s)
            sub = m.submodels.get(s, m.global_fallback)
            out[rows] = expit(sub.decision(X.take(rows)))
        return out
    if isinstance(data, Dataset):
        if m.encoding is None:
            raise ValueError("model has no encoding; pass a DesignMatrix")
        data = encode(data, encoding=m.encoding)
    return expit(m.decision(data))
