from .io import draw_trees, ensemble_from_records, load_fit, save_fit
from .model import (BartConfig, BartError, CutGrid, FittedBart, fit_continuous,
                    fit_probit, predict)
from .tree import DecisionTree, sample_tree_move

__all__ = ["BartConfig", "BartError", "CutGrid", "DecisionTree", "FittedBart",
           "draw_trees", "ensemble_from_records", "fit_continuous", "fit_probit",
           "load_fit", "predict", "sample_tree_move", "save_fit"]
