from breathstage.nn.functional import (
    ShapeMismatch,
    TargetNotDistribution,
    attention_backward,
    attention_forward,
    conv1d_backward,
    conv1d_forward,
    l2_feature_loss,
    log_softmax,
    lstm_backward,
    lstm_forward,
    one_hot,
    relu_backward,
    relu_forward,
    residual_backward,
    residual_forward,
    sigmoid,
    sigmoid_bce,
    softmax,
    softmax_cross_entropy,
)
from breathstage.nn.params import Adam, CheckpointError, ParameterStore, he_init, make_rng

__all__ = [
    "Adam",
    "CheckpointError",
    "ParameterStore",
    "ShapeMismatch",
    "TargetNotDistribution",
    "attention_backward",
    "attention_forward",
    "conv1d_backward",
    "conv1d_forward",
    "he_init",
    "l2_feature_loss",
    "log_softmax",
    "lstm_backward",
    "lstm_forward",
    "make_rng",
    "one_hot",
    "relu_backward",
    "relu_forward",
    "residual_backward",
    "residual_forward",
    "sigmoid",
    "sigmoid_bce",
    "softmax",
    "softmax_cross_entropy",
]
