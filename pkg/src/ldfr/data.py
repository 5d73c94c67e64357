"""Container for longitudinal functional data."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from ldfr.errors import DataError, DimensionError


@dataclass
class LongitudinalFunctionalDataset:
    """Scalar responses and noisy predictor curves observed over visit times.

    One row per visit ``(i, j)``. Visits are kept sorted by subject and then
    by time, which every downstream routine relies on.

    Parameters
    ----------
    subject : ndarray of int, shape (N,)
        Subject code ``0 .. I-1`` of every visit.
    t : ndarray, shape (N,)
        Visit times.
    s : ndarray, shape (R,)
        Common grid on which the predictor curves are recorded.
    w : ndarray, shape (N, R)
        Noisy predictor curves ``W_ij(s_r)``.
    y : ndarray, shape (N,), optional
        Scalar responses; ``None`` for predictor-only data (new subjects).
    group : ndarray of int, shape (N,), optional
        Group code of every visit (constant within subject).
    covariates : ndarray, shape (N, c), optional
        Extra scalar covariates entering the model linearly.
    subject_labels : ndarray, shape (I,), optional
        Original identifiers, ``subject_labels[code]``.
    """

    subject: np.ndarray
    t: np.ndarray
    s: np.ndarray
    w: np.ndarray
    y: Optional[np.ndarray] = None
    group: Optional[np.ndarray] = None
    covariates: Optional[np.ndarray] = None
    subject_labels: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.subject = np.asarray(self.subject, dtype=int)
        self.t = np.asarray(self.t, dtype=float)
        self.s = np.asarray(self.s, dtype=float)
        self.w = np.atleast_2d(np.asarray(self.w, dtype=float))
        n = self.subject.size
        if self.t.shape != (n,) or self.w.shape != (n, self.s.size):
            raise DimensionError(
                f"inconsistent shapes: subject {self.subject.shape}, t {self.t.shape}, "
                f"w {self.w.shape}, s {self.s.shape}"
            )
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=float)
            if self.y.shape != (n,):
                raise DimensionError("y must have one value per visit")
        if self.group is not None:
            self.group = np.asarray(self.group, dtype=int)
        if self.covariates is not None:
            self.covariates = np.asarray(self.covariates, dtype=float).reshape(n, -1)
        if n and np.any(np.diff(self.subject) < 0):
            raise DataError("visits must be sorted by subject")
        if self.subject_labels is None:
            self.subject_labels = np.arange(self.n_subjects)
        else:
            self.subject_labels = np.asarray(self.subject_labels)

    @property
    def n_visits(self) -> int:
        return self.subject.size

    @property
    def n_subjects(self) -> int:
        return int(self.subject.max()) + 1 if self.subject.size else 0

    @property
    def visits_per_subject(self) -> np.ndarray:
        return np.bincount(self.subject, minlength=self.n_subjects)

    def subject_rows(self, i: int) -> np.ndarray:
        """Row indices of subject code ``i``."""
        return np.flatnonzero(self.subject == i)

    def subset(self, rows) -> "LongitudinalFunctionalDataset":
        """Dataset restricted to ``rows`` (subject codes are preserved)."""
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        rows = np.sort(rows)
        take = lambda a: None if a is None else a[rows]  # noqa: E731
        return replace(
            self,
            subject=self.subject[rows],
            t=self.t[rows],
            w=self.w[rows],
            y=take(self.y),
            group=take(self.group),
            covariates=take(self.covariates),
        )

    @classmethod
    def from_arrays(cls, subject, t, s, w, y=None, group=None, covariates=None):
        """Build a dataset from unsorted arrays with arbitrary subject labels."""
        subject = np.asarray(subject)
        labels, codes = np.unique(subject, return_inverse=True)
        t = np.asarray(t, dtype=float)
        order = np.lexsort((t, codes))
        pick = lambda a: None if a is None else np.asarray(a)[order]  # noqa: E731
        return cls(
            subject=codes[order],
            t=t[order],
            s=s,
            w=np.asarray(w, dtype=float)[order],
            y=pick(y),
            group=pick(group),
            covariates=pick(covariates),
            subject_labels=labels,
        )
