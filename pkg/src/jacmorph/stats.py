"""Univariate response statistics and feature-selection primitives.

Conventions:
  - Wilcoxon rank-sum is exact permutation enumeration when the pooled sample
    has at most 12 values, otherwise the normal approximation with tie and
    continuity corrections.  Midranks are used for ties on both paths.
  - AUC is the Mann-Whitney estimator U / (n1 * n0) with midrank ties.
  - Distinctive features come from complete-linkage clustering of the
    1 - |pearson r| feature distance, one representative per cluster (highest
    orientation-free univariate AUC, ties broken by name).
  - LASSO is L1-penalized logistic regression solved by cyclic coordinate
    descent on the IRLS quadratic surrogate over a decreasing lambda path;
    features are ranked by the path position where they first become active.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import squareform
from scipy.stats import norm, rankdata

from .errors import InputError, NotConvergedError

__all__ = [
    "CaseTable", "UnivariateResult", "wilcoxon_rank_sum", "auc",
    "univariate", "cluster_distinct", "lasso_select",
]

_EXACT_LIMIT = 12         # pooled size up to which the permutation test is exact
_LASSO_PATH_LEN = 50
_LASSO_PATH_FLOOR = 1e-3  # smallest lambda as a fraction of lambda_max


@dataclass(frozen=True)
class CaseTable:
    """Feature matrix with binary response labels (True = responder)."""

    features: np.ndarray                # (n_cases, n_features)
    labels: np.ndarray                  # (n_cases,) bool
    names: tuple[str, ...]
    case_ids: tuple[str, ...] = ()

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=bool)
        if X.ndim != 2:
            raise InputError(f"features must be 2-D (cases x features), got {X.shape}")
        if y.shape != (X.shape[0],):
            raise InputError(f"labels shape {y.shape} does not match {X.shape[0]} cases")
        if len(self.names) != X.shape[1]:
            raise InputError(f"{len(self.names)} names for {X.shape[1]} feature columns")
        if len(set(self.names)) != len(self.names):
            raise InputError("feature names must be unique")
        if not np.isfinite(X).all():
            raise InputError("feature table has missing or non-finite values")
        ids = self.case_ids if self.case_ids else tuple(f"case{i:03d}" for i in range(X.shape[0]))
        if len(ids) != X.shape[0]:
            raise InputError(f"{len(ids)} case ids for {X.shape[0]} cases")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "case_ids", ids)

    @property
    def n_cases(self) -> int:
        return self.features.shape[0]

    def require_both_classes(self) -> None:
        if self.labels.all() or not self.labels.any():
            raise InputError("analysis requires both response classes present")

    def subset(self, rows: np.ndarray) -> "CaseTable":
        return CaseTable(self.features[rows], self.labels[rows], self.names,
                         tuple(np.asarray(self.case_ids, dtype=object)[rows]))


@dataclass(frozen=True)
class UnivariateResult:
    """Orientation-free AUC and rank-sum p for a single feature."""

    name: str
    p_value: float
    auc: float                 # max(auc, 1 - auc)
    flipped: bool              # True when the raw AUC was below 0.5


def wilcoxon_rank_sum(a, b) -> float:
    """Two-sided rank-sum p-value; exact by enumeration for small samples."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 1 or b.size < 1:
        raise InputError("both samples must be nonempty")
    pooled = np.concatenate([a, b])
    if np.ptp(pooled) == 0.0:
        return 1.0
    ranks = rankdata(pooled)
    n = pooled.size
    na = a.size
    w_obs = float(ranks[:na].sum())
    mu = na * (n + 1) / 2.0
    if n <= _EXACT_LIMIT:
        dev = abs(w_obs - mu)
        hits = 0
        total = 0
        for combo in itertools.combinations(range(n), na):
            total += 1
            if abs(ranks[list(combo)].sum() - mu) >= dev - 1e-12:
                hits += 1
        return hits / total
    _, counts = np.unique(pooled, return_counts=True)
    tie_term = float((counts ** 3 - counts).sum()) / (n * (n - 1))
    var = a.size * b.size / 12.0 * ((n + 1) - tie_term)
    if var <= 0.0:
        return 1.0
    z = (abs(w_obs - mu) - 0.5) / np.sqrt(var)
    return float(min(1.0, 2.0 * norm.sf(max(z, 0.0))))


def auc(scores, labels) -> float:
    """Mann-Whitney AUC of scores for the positive class, midrank ties."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if s.shape != y.shape or s.ndim != 1:
        raise InputError("scores and labels must be matching 1-D arrays")
    n1 = int(y.sum())
    n0 = y.size - n1
    if n1 == 0 or n0 == 0:
        raise InputError("AUC requires both classes present")
    ranks = rankdata(s)
    u = float(ranks[y].sum()) - n1 * (n1 + 1) / 2.0
    return u / (n1 * n0)


def univariate(table: CaseTable) -> tuple[UnivariateResult, ...]:
    """Per-feature rank-sum p and orientation-free AUC, sorted by AUC."""
    table.require_both_classes()
    y = table.labels
    out = []
    for col, name in enumerate(table.names):
        vals = table.features[:, col]
        p = wilcoxon_rank_sum(vals[y], vals[~y])
        a = auc(vals, y)
        out.append(UnivariateResult(name, p, max(a, 1.0 - a), flipped=a < 0.5))
    out.sort(key=lambda r: (-r.auc, r.name))
    return tuple(out)


def _abs_correlation(X: np.ndarray) -> np.ndarray:
    """|pearson r| between columns; constant columns correlate 0 with all."""
    Xc = X - X.mean(axis=0)
    norms = np.sqrt((Xc ** 2).sum(axis=0))
    safe = np.where(norms > 0, norms, 1.0)
    R = (Xc / safe).T @ (Xc / safe)
    R[norms == 0, :] = 0.0
    R[:, norms == 0] = 0.0
    np.fill_diagonal(R, 1.0)
    return np.clip(np.abs(R), 0.0, 1.0)


def cluster_distinct(table: CaseTable, corr_threshold: float = 0.9) -> tuple[str, ...]:
    """Distinctive feature subset via complete-linkage correlation clustering.

    Features closer than ``1 - corr_threshold`` in the 1 - |r| metric end up
    in one cluster; the representative is the member with the highest
    orientation-free univariate AUC (ties broken by name).  Returned in the
    table's column order.
    """
    if len(table.names) < 2:
        raise InputError("cluster_distinct needs at least 2 features")
    table.require_both_classes()
    dist = 1.0 - _abs_correlation(table.features)
    Z = linkage(squareform(dist, checks=False), method="complete")
    assign = fcluster(Z, t=1.0 - corr_threshold, criterion="distance")
    scores = {r.name: r.auc for r in univariate(table)}
    reps = {}
    for cluster_id in np.unique(assign):
        members = [table.names[i] for i in np.flatnonzero(assign == cluster_id)]
        members.sort(key=lambda nm: (-scores[nm], nm))
        reps[members[0]] = True
    return tuple(nm for nm in table.names if nm in reps)


def _standardize(X: np.ndarray) -> np.ndarray:
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    out = np.where(sd > 0, (X - mu) / np.where(sd > 0, sd, 1.0), 0.0)
    return out


def lasso_select(X: np.ndarray, y, k: int = 10) -> tuple[int, ...]:
    """Column indices ordered by entry position on the L1 logistic path.

    The path is ``_LASSO_PATH_LEN`` log-spaced penalties from lambda_max
    (smallest penalty with an all-zero solution) down to its
    ``_LASSO_PATH_FLOOR`` fraction, warm-started.  A feature's rank is the
    first path position where its coefficient becomes nonzero; ties at the
    same position are broken by coefficient magnitude there, then by column
    index.  Returns at most ``k`` indices.
    """
    X = np.asarray(X, dtype=np.float64)
    yv = np.asarray(y, dtype=np.float64).ravel()
    if X.ndim != 2 or yv.size != X.shape[0]:
        raise InputError("X must be (cases x features) matching y")
    if len(set(np.unique(yv)) - {0.0, 1.0}) > 0:
        raise InputError("y must be binary 0/1")
    if yv.min() == yv.max():
        raise InputError("lasso_select requires both classes present")
    Xs = _standardize(X)
    n, p = Xs.shape
    lam_max = float(np.abs(Xs.T @ (yv - yv.mean())).max()) / n
    if lam_max == 0.0:
        return ()
    lams = np.geomspace(lam_max, _LASSO_PATH_FLOOR * lam_max, _LASSO_PATH_LEN)
    beta = np.zeros(p)
    b0 = float(np.log(yv.mean() / (1.0 - yv.mean())))
    entry_step = np.full(p, -1)
    entry_mag = np.zeros(p)
    for step, lam in enumerate(lams):
        beta, b0, ok, info = _l1_logistic(Xs, yv, lam, beta, b0)
        if not ok:
            raise NotConvergedError(
                f"LASSO path failed at step {step} (lambda={lam:.3e})", info)
        new = (entry_step < 0) & (beta != 0.0)
        entry_step[new] = step
        entry_mag[new] = np.abs(beta[new])
    active = np.flatnonzero(entry_step >= 0)
    order = sorted(active, key=lambda j: (entry_step[j], -entry_mag[j], j))
    return tuple(int(j) for j in order[:k])


def _penalized_nll(X, y, lam, beta, b0):
    eta = b0 + X @ beta
    # log(1 + e^eta) - y*eta, computed stably
    nll = float(np.mean(np.logaddexp(0.0, eta) - y * eta))
    return nll + lam * float(np.abs(beta).sum())


def _l1_logistic(X, y, lam, beta, b0, max_outer=100, max_inner=1000, tol=1e-7):
    """One glmnet-style fit: IRLS surrogate + cyclic soft-threshold descent.

    Each quadratic surrogate is solved on weighted-centered columns, which
    eliminates the intercept from the coordinate cycle (it is recovered in
    closed form afterwards).  The inner solver cycles over the active
    coordinates only, with full sweeps to admit new ones.
    """
    n, p = X.shape
    beta = beta.copy()
    obj = _penalized_nll(X, y, lam, beta, b0)
    for outer in range(max_outer):
        eta = b0 + X @ beta
        prob = 1.0 / (1.0 + np.exp(-eta))
        w = np.clip(prob * (1.0 - prob), 1e-5, None)
        z = eta + (y - prob) / w
        wsum = float(w.sum())
        xm = (w @ X) / wsum
        zm = float(w @ z) / wsum
        XcT = np.ascontiguousarray((X - xm).T)
        wXcT = XcT * w
        wx2 = (wXcT * XcT).sum(axis=1) / n
        resid = (z - zm) - XcT.T @ beta

        def sweep(cols):
            nonlocal resid
            delta = 0.0
            for j in cols:
                rho = float(wXcT[j] @ resid) / n + wx2[j] * beta[j]
                new = np.sign(rho) * max(abs(rho) - lam, 0.0) / wx2[j] if wx2[j] > 0 else 0.0
                if new != beta[j]:
                    resid = resid - XcT[j] * (new - beta[j])
                    delta = max(delta, abs(new - beta[j]))
                    beta[j] = new
            return delta

        sweeps = 0
        while sweeps < max_inner:
            sweeps += 1
            if sweep(range(p)) < tol:
                break
            active = np.flatnonzero(beta)
            while sweeps < max_inner:
                sweeps += 1
                if sweep(active) < tol:
                    break
        b0 = zm - float(xm @ beta)
        new_obj = _penalized_nll(X, y, lam, beta, b0)
        if abs(new_obj - obj) <= 1e-8 * max(1.0, abs(obj)):
            return beta, b0, True, {"outer": outer, "objective": new_obj}
        obj = new_obj
    return beta, b0, False, {"outer": max_outer, "objective": obj}
