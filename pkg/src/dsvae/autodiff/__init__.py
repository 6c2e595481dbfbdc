from .tensor import (
    ShapeError, Tensor, add, as_tensor, broadcast_to, clip, concat, div, exp, getitem, log,
    matmul, mean, mul, no_grad, power, relu, reshape, sigmoid, stack, sub, tanh, transpose, tsum,
)
from .functional import conv1d, instance_norm, lstm_cell, lstm_sequence, rnn_sequence
from .nn import (
    LSTM, MLP, RNN, Conv1d, InstanceNorm, LayerSpec, Linear, Module, ModuleList, StackedLSTM,
    TimeAvgPool, build_layer,
)
from .optim import Adam, AdamState, DivergedError, adam_step, step_decay_lr
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [name for name in dir() if not name.startswith("_")]
