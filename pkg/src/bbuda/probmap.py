from __future__ import annotations

import numpy as np

from .tensor import DTYPE


class ProbMapError(ValueError):
    pass


class ProbMap:
    """Per-pixel class probabilities, shape (C, H, W), float32.

    The only thing a black-box teacher is allowed to hand out.
    """

    __slots__ = ("_values",)

    def __init__(self, values, tol: float = 1e-6, validate: bool = True):
        arr = np.ascontiguousarray(values, dtype=DTYPE)
        if arr.ndim != 3:
            raise ProbMapError(f"ProbMap must be (C, H, W), got shape {arr.shape}")
        arr.setflags(write=False)
        self._values = arr
        if validate:
            self.validate(tol)

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def num_classes(self) -> int:
        return self._values.shape[0]

    @property
    def height(self) -> int:
        return self._values.shape[1]

    @property
    def width(self) -> int:
        return self._values.shape[2]

    @property
    def shape(self) -> tuple:
        return self._values.shape

    def validate(self, tol: float = 1e-6) -> None:
        v = self._values
        if not np.all(np.isfinite(v)):
            raise ProbMapError("ProbMap contains non-finite values")
        if v.min() < 0.0 or v.max() > 1.0:
            raise ProbMapError("ProbMap values must lie in [0, 1]")
        err = np.abs(v.sum(axis=0, dtype=np.float64) - 1.0).max()
        if err > tol:
            raise ProbMapError(f"per-pixel channel sums deviate from 1 by {err:.3g} (> {tol})")

    def argmax(self) -> np.ndarray:
        return self._values.argmax(axis=0)

    def __eq__(self, other) -> bool:
        return isinstance(other, ProbMap) and np.array_equal(self._values, other._values)

    def __repr__(self) -> str:
        return f"ProbMap(C={self.num_classes}, H={self.height}, W={self.width})"
