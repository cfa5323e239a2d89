"""Random gradient-check instances, one generator per differentiable op.

Every case is ``(fn, inputs)`` where ``fn`` maps tensors to a scalar tensor.
Non-scalar op outputs are contracted with a fixed random tensor so every
output entry contributes to the gradient.
"""

import numpy as np

from taps import ops
from taps.layers import AdaptiveLayer, gated_weight
from taps.ops import BatchNormStats
from taps.tensor import Tensor


def project(out, r):
    return ops.total(ops.mul(out, Tensor(r, dtype=out.dtype)))


def away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def matmul_case(rng):
    m, k, n = rng.integers(1, 5, 3)
    r = rng.standard_normal((m, n))
    return (lambda a, b: project(ops.matmul(a, b), r)), [rng.standard_normal((m, k)), rng.standard_normal((k, n))]


def conv2d_case(rng):
    n, ci, co = rng.integers(1, 3), rng.integers(1, 3), rng.integers(1, 4)
    h, w = rng.integers(3, 6, 2)
    kh = int(rng.integers(1, 4))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    oh, ow = (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kh) // stride + 1
    r = rng.standard_normal((n, co, oh, ow))
    return ((lambda x, k: project(ops.conv2d(x, k, stride, pad), r)),
            [rng.standard_normal((n, ci, h, w)), rng.standard_normal((co, ci, kh, kh)) * 0.5])


def attention_case(rng):
    t, d = int(rng.integers(1, 5)), int(rng.integers(2, 5))
    r = rng.standard_normal((t, d))
    mats = [rng.standard_normal((d, d)) * 0.5 for _ in range(4)]
    return (lambda x, q, k, v, o: project(ops.attention_single_head(x, q, k, v, o), r)), [rng.standard_normal((t, d))] + mats


def batchnorm_case(rng):
    # with two values per channel the normalized output is +-1 whatever x is,
    # so the x-gradient is eps-sized noise; keep at least three per channel
    c = int(rng.integers(1, 4))
    shape = (int(rng.integers(3, 6)), c) if rng.random() < 0.5 else (int(rng.integers(2, 4)), c, 2, 2)
    training = bool(rng.random() < 0.7)
    stats = BatchNormStats(rng.standard_normal(c) * 0.1, rng.uniform(0.5, 2.0, c))
    r = rng.standard_normal(shape)

    def fn(x, g, b):
        return project(ops.batchnorm(x, g, b, stats.copy(), training), r)

    return fn, [rng.standard_normal(shape) * 2 + 1, rng.uniform(0.5, 1.5, c), rng.standard_normal(c)]


def relu_case(rng):
    shape = tuple(rng.integers(1, 5, 2))
    r = rng.standard_normal(shape)
    return (lambda x: project(ops.relu(x), r)), [away_from_zero(rng, shape)]


def add_case(rng):
    shape = tuple(rng.integers(1, 5, 2))
    r = rng.standard_normal(shape)
    return (lambda a, b: project(ops.add(a, b), r)), [rng.standard_normal(shape), rng.standard_normal(shape)]


def mul_case(rng):
    shape = tuple(rng.integers(1, 5, 2))
    r = rng.standard_normal(shape)
    return (lambda a, b: project(ops.mul(a, b), r)), [rng.standard_normal(shape), rng.standard_normal(shape)]


def scale_case(rng):
    shape = tuple(rng.integers(1, 5, 2))
    c = float(rng.standard_normal() * 3)
    r = rng.standard_normal(shape)
    return (lambda a: project(ops.scale(a, c), r)), [rng.standard_normal(shape)]


def abs_sum_case(rng):
    shape = tuple(rng.integers(1, 6, 2))
    return (lambda x: ops.abs_sum(x)), [away_from_zero(rng, shape)]


def softmax_case(rng):
    shape = tuple(rng.integers(1, 5, 2))
    r = rng.standard_normal(shape)
    return (lambda x: project(ops.softmax(x), r)), [rng.standard_normal(shape) * 2]


def cross_entropy_case(rng):
    n, c = int(rng.integers(1, 6)), int(rng.integers(2, 6))
    labels = rng.integers(0, c, n)
    return (lambda z: ops.cross_entropy_loss(z, labels)), [rng.standard_normal((n, c)) * 2]


def mean_case(rng):
    shape = tuple(rng.integers(1, 5, 3))
    axis = None if rng.random() < 0.5 else int(rng.integers(0, 3))
    out_shape = () if axis is None else tuple(s for i, s in enumerate(shape) if i != axis)
    r = rng.standard_normal(out_shape)
    return (lambda x: project(ops.mean(x, axis), r)), [rng.standard_normal(shape)]


def linear_case(rng):
    n, i, o = rng.integers(1, 5, 3)
    r = rng.standard_normal((n, o))
    return ((lambda x, w, b: project(ops.linear(x, w, b), r)),
            [rng.standard_normal((n, i)), rng.standard_normal((i, o)), rng.standard_normal(o)])


def gated_case(rng, open_gate):
    """Effective weight through a linear or conv layer, differentiated wrt the delta.

    The indicator is a constant with respect to the delta, so the oracle is the
    plain forward function.
    """
    tau = 0.1
    s = float(rng.uniform(0.2, 2.0)) if open_gate else float(rng.uniform(-0.5, 0.09))
    if rng.random() < 0.5:
        n, i, o = rng.integers(1, 4, 3)
        x, base = rng.standard_normal((n, i)), rng.standard_normal((i, o))
        r = rng.standard_normal((n, o))

        def fn(xx, delta):
            w = gated_weight(Tensor(base, dtype=delta.dtype), delta, Tensor(s, dtype=delta.dtype), tau)
            return project(ops.linear(xx, w), r)
    else:
        x, base = rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((2, 2, 3, 3))
        r = rng.standard_normal((1, 2, 2, 2))

        def fn(xx, delta):
            w = gated_weight(Tensor(base, dtype=delta.dtype), delta, Tensor(s, dtype=delta.dtype), tau)
            return project(ops.conv2d(xx, w), r)
    return fn, [x, rng.standard_normal(base.shape) * 0.5]


OP_CASES = {
    "matmul": matmul_case,
    "conv2d": conv2d_case,
    "attention": attention_case,
    "batchnorm": batchnorm_case,
    "relu": relu_case,
    "add": add_case,
    "mul": mul_case,
    "scale": scale_case,
    "abs_sum": abs_sum_case,
    "softmax": softmax_case,
    "cross_entropy": cross_entropy_case,
    "mean": mean_case,
    "linear": linear_case,
    "adaptive_open": lambda rng: gated_case(rng, True),
    "adaptive_closed": lambda rng: gated_case(rng, False),
}


def random_adaptive_layer(rng, open_gate=None, tau=0.1):
    """A random linear or conv adaptive layer with a random input and nonzero delta."""
    if open_gate is None:
        open_gate = bool(rng.random() < 0.5)
    s = rng.uniform(0.1, 2.0) if open_gate else rng.uniform(-1.0, 0.0999)
    if rng.random() < 0.5:
        i, o = rng.integers(1, 6, 2)
        base = Tensor(rng.standard_normal((i, o)))
        bias = Tensor(rng.standard_normal(o)) if rng.random() < 0.5 else None
        layer = AdaptiveLayer("fc", "linear", base, bias, tau=tau, init_score=s,
                              delta=rng.standard_normal((i, o)))
        x = rng.standard_normal((int(rng.integers(1, 5)), i))
    else:
        ci, co, k = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        base = Tensor(rng.standard_normal((co, ci, k, k)))
        layer = AdaptiveLayer("conv", "conv", base, None, tau=tau, init_score=s, padding=int(rng.integers(0, 2)),
                              delta=rng.standard_normal((co, ci, k, k)))
        x = rng.standard_normal((int(rng.integers(1, 3)), ci, 4, 4))
    return layer, x
