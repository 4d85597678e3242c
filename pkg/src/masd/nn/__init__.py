from masd.nn import tensor as ops
from masd.nn.checkpoint import CheckpointError
from masd.nn.grad import evaluate_with_gradients, finite_diff_check
from masd.nn.optim import AdamState, adam_step, clip_global_norm
from masd.nn.params import ParameterSet, init_mlp, mlp, mlp_numpy, uniform_fan_in
from masd.nn.tensor import NumericError, ShapeError, Tensor, frozen, stop_gradient

__all__ = [
    "AdamState",
    "CheckpointError",
    "NumericError",
    "ParameterSet",
    "ShapeError",
    "Tensor",
    "adam_step",
    "clip_global_norm",
    "evaluate_with_gradients",
    "finite_diff_check",
    "frozen",
    "init_mlp",
    "mlp",
    "mlp_numpy",
    "ops",
    "stop_gradient",
    "uniform_fan_in",
]
