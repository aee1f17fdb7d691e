#base.py
from typing import Any, Callable

import numpy as np
from pydantic import Field

from src.exceptions.custom_exceptions import InvalidInputException
from src.schemas.base import ArraySchema
from src.schemas.dataset import FoldAssignment


class FoldModels(ArraySchema):
    """One fitted model per held-out fold.

    ``models[j]`` was trained without the samples of fold j and is the only
    model ever evaluated on them.
    """

    models: list[Any]
    held_out: list[int] = Field(default_factory=list)

    def model_post_init(self, __context) -> None:
        if not self.held_out:
            object.__setattr__(self, "held_out", list(range(len(self.models))))

    @property
    def num_folds(self) -> int:
        return len(self.models)

    def predict_out_of_fold(
        self,
        folds: FoldAssignment,
        predict: Callable[[Any, np.ndarray], np.ndarray],
    ) -> np.ndarray:
        if folds.num_folds != self.num_folds:
            raise InvalidInputException(
                f"fold assignment has {folds.num_folds} folds, models were fitted for {self.num_folds}"
            )
        out = None
        for model, fold in zip(self.models, self.held_out):
            rows = folds.test_indices(fold)
            prediction = np.asarray(predict(model, rows), dtype=float)
            if out is None:
                out = np.empty((folds.n,) + prediction.shape[1:])
            out[rows] = prediction
        return out
