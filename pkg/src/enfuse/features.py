"""Feature matrices carried between extraction, fusion, and the classifiers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError


@dataclass
class FeatureMatrix:
    """Dense M x D matrix with optional per-row labels and stable sample ids.

    Sample ids let downstream fusion verify that matrices from different
    extractors describe the same rows in the same order.
    """

    data: np.ndarray
    labels: np.ndarray | None = None
    sample_ids: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise InvalidArgumentError("feature matrix must be 2-D")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.data):
                raise InvalidArgumentError("labels length mismatch")
        if self.sample_ids is None:
            self.sample_ids = np.arange(len(self.data))
        else:
            self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
            if len(self.sample_ids) != len(self.data):
                raise InvalidArgumentError("sample_ids length mismatch")

    @property
    def n_rows(self) -> int:
        return self.data.shape[0]

    @property
    def n_cols(self) -> int:
        return self.data.shape[1]
