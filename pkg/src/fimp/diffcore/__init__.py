"""Differentiable numeric primitives with a reverse-mode gradient contract."""

from fimp.diffcore.gradcheck import GradCheckReport, grad_check
from fimp.diffcore.nn import dropout, elu_plus_one, gru_cell, mha, mhsa, mlp_block
from fimp.diffcore.optim import OptimizerState, adamw_step, cosine_lr
from fimp.diffcore.params import (
    AttentionParams,
    GruParams,
    LayerNormParams,
    MlpParams,
    ParamStore,
    config_hash,
    glorot_uniform,
    load_arrays,
    make_attention,
    make_gru,
    make_layer_norm,
    make_mlp,
    save_arrays,
    token_init,
)
from fimp.diffcore.tensor import (
    Tensor,
    absolute,
    concat,
    default_dtype,
    elu,
    exp,
    gather,
    layer_norm,
    log,
    relu,
    set_default_dtype,
    sigmoid,
    softmax,
    sqrt,
    stack,
    tanh,
    using_dtype,
)

__all__ = [
    "AttentionParams", "GradCheckReport", "GruParams", "LayerNormParams",
    "MlpParams", "OptimizerState", "ParamStore", "Tensor", "absolute",
    "adamw_step", "concat", "config_hash", "cosine_lr", "default_dtype",
    "dropout", "elu", "elu_plus_one", "exp", "gather", "glorot_uniform",
    "grad_check", "gru_cell", "layer_norm", "load_arrays", "log",
    "make_attention", "make_gru", "make_layer_norm", "make_mlp", "mha",
    "mhsa", "mlp_block", "relu", "save_arrays", "set_default_dtype",
    "sigmoid", "softmax", "sqrt", "stack", "tanh", "token_init",
    "using_dtype",
]
