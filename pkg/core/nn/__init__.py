from core.nn.tensor import Param, Tensor, no_grad, precision

__all__ = ["Param", "Tensor", "no_grad", "precision"]
