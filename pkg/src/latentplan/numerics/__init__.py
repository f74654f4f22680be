from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import finite_diff_check
from .optim import AdamState, adam_step
from .tensor import (
    ContractError,
    ShapeError,
    Tensor,
    add,
    backward,
    causal_softmax,
    concat,
    cosine_sim,
    cross_entropy,
    embedding,
    gelu,
    inject_fault,
    layer_norm,
    matmul,
    mean,
    mse,
    mul,
    no_grad,
    reshape,
    rowwise_cosine,
    softmax,
    softmax_cross_entropy,
    square,
    sub,
    sum_,
    take_rows,
    transpose,
)
