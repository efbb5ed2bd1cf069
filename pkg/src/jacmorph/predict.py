"""RF-LASSO response prediction with repeated stratified cross-validation.

The per-fold protocol is: standardize with training-fold statistics, reduce
to distinctive features (correlation clustering), rank them by the LASSO
path, train a random forest on the top-k, and evaluate on the held-out fold.
All selection happens strictly inside the training fold.  Metrics are pooled
over the folds of a repeat (every case is held out exactly once per repeat)
and summarized as mean +/- SD over repeats.  Randomness is derived from
(seed, repeat[, fold]) spawn keys so results are independent of execution
order.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from math import ceil, sqrt

import numpy as np
from sklearn.ensemble import RandomForestClassifier
from sklearn.model_selection import StratifiedKFold

from .errors import InputError
from .stats import CaseTable, auc, cluster_distinct, lasso_select

__all__ = ["RFModel", "CVReport", "rf_train", "cross_validate"]

_METRICS = ("sensitivity", "specificity", "accuracy", "auc")


@dataclass(frozen=True)
class RFModel:
    """Bagged-CART ensemble predicting response probability as vote fraction.

    A single-class training set yields a degenerate constant predictor with
    the flag set.
    """

    forest: RandomForestClassifier | None
    constant: float | None = None      # degenerate: predicted P(responder)

    @property
    def degenerate(self) -> bool:
        return self.forest is None

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        """P(responder) per row as the fraction of trees voting responder."""
        X = np.asarray(X, dtype=np.float64)
        if self.degenerate:
            return np.full(X.shape[0], self.constant)
        votes = np.stack([tree.predict(X) for tree in self.forest.estimators_])
        return votes.mean(axis=0)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.predict_proba(X) >= 0.5


def rf_train(X: np.ndarray, y, n_trees: int = 200, seed: int = 0) -> RFModel:
    """Random forest: Gini splits, sqrt feature candidates, min-leaf 2."""
    X = np.asarray(X, dtype=np.float64)
    yv = np.asarray(y, dtype=bool).ravel()
    if n_trees < 1:
        raise InputError(f"n_trees must be >= 1, got {n_trees}")
    if X.ndim != 2 or yv.size != X.shape[0]:
        raise InputError("X must be (cases x features) matching y")
    if yv.all() or not yv.any():
        return RFModel(None, constant=float(yv.any()))
    forest = RandomForestClassifier(
        n_estimators=n_trees,
        criterion="gini",
        max_features=max(1, ceil(sqrt(X.shape[1]))),
        min_samples_leaf=2,
        bootstrap=True,
        random_state=int(seed),
    )
    forest.fit(X, yv.astype(np.int64))
    return RFModel(forest)


@dataclass(frozen=True)
class CVReport:
    """Repeated-CV performance summary.

    ``per_repeat`` holds the pooled held-out metrics of each repeat in order;
    ``mean``/``sd`` aggregate them.  ``selection_counts`` counts how often
    each feature was selected across all (repeat, fold) models, and
    ``accuracy_curve[m-1]`` is the mean pooled accuracy using the first m
    LASSO-ranked features.
    """

    per_repeat: tuple[dict, ...]
    mean: dict
    sd: dict
    selection_counts: dict
    accuracy_curve: tuple[float, ...]
    folds: int
    seed: int

    def __post_init__(self):
        for key in _METRICS:
            if not 0.0 <= self.mean[key] <= 1.0:
                raise InputError(f"metric {key} out of [0,1]: {self.mean[key]}")


def _fold_seed(seed: int, repeat: int, fold: int | None = None) -> int:
    key = (seed, repeat) if fold is None else (seed, repeat, fold)
    return int(np.random.SeedSequence(key).generate_state(1)[0])


def _pooled_metrics(y: np.ndarray, pred: np.ndarray, prob: np.ndarray) -> dict:
    tp = int((pred & y).sum())
    tn = int((~pred & ~y).sum())
    fp = int((pred & ~y).sum())
    fn = int((~pred & y).sum())
    return {
        "sensitivity": tp / (tp + fn),
        "specificity": tn / (tn + fp),
        "accuracy": (tp + tn) / y.size,
        "auc": auc(prob, y),
    }


def cross_validate(table: CaseTable, folds: int = 10, repeats: int = 10,
                   seed: int = 0, n_trees: int = 200, k: int = 10,
                   corr_threshold: float = 0.9) -> CVReport:
    """Repeated stratified k-fold CV of the cluster -> LASSO -> RF pipeline.

    A class smaller than ``folds`` is fine (its members just spread over a
    subset of the folds, which is how a heavily imbalanced cohort has to
    split), but each class needs at least 2 members so no training fold ever
    loses a class entirely, and ``folds`` beyond the size of the larger class
    is rejected.
    """
    table.require_both_classes()
    if folds < 2:
        raise InputError(f"folds must be >= 2, got {folds}")
    if repeats < 1:
        raise InputError(f"repeats must be >= 1, got {repeats}")
    y = table.labels
    X = table.features
    n_pos = int(y.sum())
    if min(n_pos, y.size - n_pos) < 2:
        raise InputError("each class needs >= 2 members for stratified CV, got "
                         f"{n_pos} positive / {y.size - n_pos} negative")
    if folds > max(n_pos, y.size - n_pos):
        raise InputError(f"folds={folds} exceeds both class sizes "
                         f"({n_pos} positive, {y.size - n_pos} negative)")
    per_repeat = []
    curve_rows = []
    counts: dict[str, int] = {}
    for rep in range(repeats):
        splitter = StratifiedKFold(n_splits=folds, shuffle=True,
                                   random_state=_fold_seed(seed, rep))
        with warnings.catch_warnings():
            # The small-class-below-folds layout is intended, not a mistake.
            warnings.simplefilter("ignore", UserWarning)
            splits = list(splitter.split(X, y))
        prob = np.zeros(y.size)
        curve_prob = None
        for fold, (tr, te) in enumerate(splits):
            mu = X[tr].mean(axis=0)
            sdev = X[tr].std(axis=0)
            sdev = np.where(sdev > 0, sdev, 1.0)
            Xtr = (X[tr] - mu) / sdev
            Xte = (X[te] - mu) / sdev
            sub = CaseTable(X[tr], y[tr], table.names)
            distinct = cluster_distinct(sub, corr_threshold)
            cols = [table.names.index(nm) for nm in distinct]
            order = lasso_select(Xtr[:, cols], y[tr].astype(float), k=k)
            chosen = [cols[j] for j in order]
            if not chosen:            # LASSO found no signal: fall back to
                chosen = cols[:1]     # the first distinct feature
            for nm in (table.names[c] for c in chosen):
                counts[nm] = counts.get(nm, 0) + 1
            rf_seed = _fold_seed(seed, rep, fold)
            model = rf_train(Xtr[:, chosen], y[tr], n_trees, rf_seed)
            prob[te] = model.predict_proba(Xte[:, chosen])
            if curve_prob is None:
                curve_prob = np.zeros((k, y.size))
            for m in range(1, k + 1):
                use = chosen[:m]
                sub_model = rf_train(Xtr[:, use], y[tr], n_trees, rf_seed)
                curve_prob[m - 1, te] = sub_model.predict_proba(Xte[:, use])
        per_repeat.append(_pooled_metrics(y, prob >= 0.5, prob))
        curve_rows.append([((curve_prob[m] >= 0.5) == y).mean() for m in range(k)])
    mean = {key: float(np.mean([r[key] for r in per_repeat])) for key in _METRICS}
    sd = {key: float(np.std([r[key] for r in per_repeat])) for key in _METRICS}
    curve = tuple(float(v) for v in np.mean(curve_rows, axis=0))
    ordered_counts = dict(sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])))
    return CVReport(tuple(per_repeat), mean, sd, ordered_counts, curve,
                    folds=folds, seed=seed)
