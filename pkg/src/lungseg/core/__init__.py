from . import ops
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import grad_check
from .nn import BatchNorm2d, Conv2d, ConvBNAct, ConvTranspose2d, Dense, Module
from .optim import Optimizer, OptimizerState, adam, optimizer_step, sgd
from .rng import make_rng
from .tensor import Tensor, no_grad, parameter
from .threads import set_threads

__all__ = [
    "ops",
    "Tensor",
    "no_grad",
    "parameter",
    "Module",
    "Conv2d",
    "ConvTranspose2d",
    "Dense",
    "BatchNorm2d",
    "ConvBNAct",
    "Optimizer",
    "OptimizerState",
    "optimizer_step",
    "sgd",
    "adam",
    "grad_check",
    "make_rng",
    "save_checkpoint",
    "load_checkpoint",
    "set_threads",
]
