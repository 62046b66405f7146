from .autodiff import (
    Graph,
    NonFiniteError,
    ShapeError,
    Tensor,
    abs_,
    add,
    affine,
    as_tensor,
    backward,
    concat,
    cosine_similarity,
    div,
    exp,
    grad,
    l1_norm,
    l2_norm,
    log,
    log_softmax,
    logsumexp,
    matmul,
    mean,
    mul,
    normalize_rows,
    parameter,
    pick,
    relu,
    reshape,
    softmax,
    sqrt,
    sub,
    sum_,
    take_rows,
    tanh,
    topological_order,
    transpose,
)
from .gradcheck import finite_diff_grad, gradients_agree, relative_error, roundoff_bound
from .optim import AdamWState, adamw_step, cosine_lr
