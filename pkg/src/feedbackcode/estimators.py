"""scikit-learn style wrappers around the piecewise-linear fitters."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted, check_X_y, column_or_1d, check_array

from .analysis import knee_fit, segmented_least_squares


def _x_column(X) -> np.ndarray:
    X = check_array(X, ensure_2d=False)
    if X.ndim == 2:
        if X.shape[1] != 1:
            raise ValueError(f"expected a single feature, got {X.shape[1]}")
        X = X[:, 0]
    return column_or_1d(X)


class SegmentedLinearRegressor(RegressorMixin, BaseEstimator):
    """Penalised segmented least squares; inputs need not be pre-sorted."""

    def __init__(self, penalty: float = 1.0, max_points: int = 5000):
        self.penalty = penalty
        self.max_points = max_points

    def fit(self, X, y):
        X, y = check_X_y(X, y, ensure_2d=False, y_numeric=True)
        x = _x_column(X)
        order = np.argsort(x, kind="stable")
        self.fit_ = segmented_least_squares(x[order], y[order], self.penalty, self.max_points)
        self.breakpoints_ = self.fit_.breakpoints
        self.n_segments_ = self.fit_.n_segments
        return self

    def predict(self, X):
        check_is_fitted(self, "fit_")
        return self.fit_.predict(_x_column(X))


class KneeRegressor(RegressorMixin, BaseEstimator):
    """Zero-then-linear model ``y = slope * (x - knee)`` on the steep side."""

    def __init__(self, fix_knee_at_zero: bool = False, side: str | None = None):
        self.fix_knee_at_zero = fix_knee_at_zero
        self.side = side

    def fit(self, X, y):
        X, y = check_X_y(X, y, ensure_2d=False, y_numeric=True)
        self.fit_ = knee_fit(_x_column(X), y, fix_knee_at_zero=self.fix_knee_at_zero, side=self.side)
        self.slope_ = self.fit_.slope
        self.knee_ = self.fit_.knee
        self.side_ = self.fit_.side
        return self

    def predict(self, X):
        check_is_fitted(self, "fit_")
        return self.fit_.predict(_x_column(X))
