"""Minimal CNN engine: the conv/BN/pool/dense vocabulary of the low-complexity network."""

from .adam import Adam
from .layers import (
    BN_EPSILON,
    BN_MOMENTUM,
    ShapeError,
    avgpool_forward,
    batchnorm_forward,
    conv2d_forward,
    dense_forward,
    softmax,
)
from .network import ForwardTrace, Gradients, Model, NonFiniteLossError, backward, forward
from .spec import (
    Activation,
    Kind,
    LayerSpec,
    NetworkParams,
    NetworkSpec,
    avgpool,
    batchnorm,
    conv2d,
    dense,
    flatten,
    init_params,
    parse_architecture,
    softmax_classifier,
    baseline_spec,
    tensor_shapes,
)

__all__ = [
    "Activation", "Adam", "BN_EPSILON", "BN_MOMENTUM", "ForwardTrace", "Gradients", "Kind",
    "LayerSpec", "Model", "NetworkParams", "NetworkSpec", "NonFiniteLossError", "ShapeError",
    "avgpool", "avgpool_forward", "backward", "batchnorm", "batchnorm_forward", "conv2d",
    "conv2d_forward", "dense", "dense_forward", "flatten", "forward", "init_params",
    "parse_architecture", "softmax", "softmax_classifier", "baseline_spec", "tensor_shapes",
]
