from .analytic import AnalyticSurrogate
from .learned import (ModelConfig, SurrogateModel, aggregate_timing, loss, make_gradient_labels,
                      train)

__all__ = ["AnalyticSurrogate", "ModelConfig", "SurrogateModel", "aggregate_timing", "loss",
           "make_gradient_labels", "train"]
