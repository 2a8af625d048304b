"""Central finite-difference checks for every kernel.

Each registered case builds seeded standard-normal inputs and a scalar
objective ``sum(kernel(inputs) * weights)`` with fixed random weights, so a
kernel whose outputs are constrained (softmax rows sum to one) still has a
non-trivial gradient.
"""
import numpy as np

from . import core as T


class NonDifferentiablePoint(Exception):
    """Raised by a case builder when the sampled point sits on a kink."""


def finite_difference_grad(fn, inputs, step=1e-5):
    """Numerical gradient of scalar ``fn()`` w.r.t. each tensor in ``inputs``."""
    grads = []
    for t in inputs:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            with T.no_grad():
                fp = fn().item()
            flat[i] = orig - step
            with T.no_grad():
                fm = fn().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric):
    err = 0.0
    for a, n in zip(analytic, numeric):
        a = np.zeros_like(n) if a is None else a
        err = max(err, float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(n)), initial=0.0)))
    return err


def check_function(fn, inputs, step=1e-5):
    """Compare tape gradients of scalar ``fn()`` against central differences."""
    for t in inputs:
        t.grad = None
    fn().backward()
    analytic = [None if t.grad is None else t.grad.copy() for t in inputs]
    return max_relative_error(analytic, finite_difference_grad(fn, inputs, step))


def _objective(rng, make):
    """Scalar ``sum(make() * w)`` with weights drawn once from ``rng``."""
    with T.no_grad():
        w = rng.standard_normal(make().shape)
    return lambda: T.sum_(T.mul(make(), w))


def _param(rng, shape):
    return T.Tensor(rng.standard_normal(shape), requires_grad=True)


def _case_binary(op, positive_rhs=False):
    def build(rng, shapes):
        a = _param(rng, shapes[0])
        b = _param(rng, shapes[1])
        if positive_rhs:
            b.data[...] = np.sign(b.data) * (1.0 + np.abs(b.data))
        return [a, b], _objective(rng, lambda: op(a, b))
    return build


def _case_unary(op):
    def build(rng, shapes):
        x = _param(rng, shapes[0])
        return [x], _objective(rng, lambda: op(x))
    return build


def _build_softmax(rng, shapes):
    x = _param(rng, shapes[0])
    bias = rng.standard_normal(shapes[0][-2:])
    bias[0, -1] = -np.inf
    return [x], _objective(rng, lambda: T.softmax_with_bias(x, bias))


def _build_layer_norm(rng, shapes):
    x = _param(rng, shapes[0])
    n = shapes[0][-1]
    gamma, beta = _param(rng, (n,)), _param(rng, (n,))
    return [x, gamma, beta], _objective(rng, lambda: T.layer_norm(x, gamma, beta))


def _build_embedding(rng, shapes):
    table = _param(rng, shapes[0])
    ids = rng.integers(0, shapes[0][0], size=shapes[1])
    return [table], _objective(rng, lambda: T.embedding(table, ids))


def _build_cross_entropy(rng, shapes):
    logits = _param(rng, shapes[0])
    n, v = shapes[0]
    targets = rng.integers(0, v, size=n)
    targets[-1] = -1
    return [logits], lambda: T.cross_entropy(logits, targets)


def _build_cosine(rng, shapes):
    a, b = _param(rng, shapes[0]), _param(rng, shapes[0])
    return [a, b], _objective(rng, lambda: T.cosine_similarity(a, b))


def _build_kl(rng, shapes):
    # q must stay on the simplex under perturbation, so perturb its logits.
    z = _param(rng, shapes[0])
    p = T.softmax_with_bias(T.Tensor(rng.standard_normal(shapes[0]))).data
    p[..., 0] = 0.0
    p /= p.sum(axis=-1, keepdims=True)
    return [z], _objective(rng, lambda: T.kl_divergence(p, T.softmax_with_bias(z)))


def _build_concat(rng, shapes):
    xs = [_param(rng, s) for s in shapes]
    return xs, _objective(rng, lambda: T.concat(xs, axis=-1))


def _build_getitem(rng, shapes):
    x = _param(rng, shapes[0])
    rows = np.array([0, 2, 2])
    return [x], _objective(rng, lambda: T.concat([x[1:, :3], x[rows][:, :3]], axis=0))


GRADCHECK_CASES = {
    "add": (_case_binary(T.add), [(3, 4), (4,)]),
    "sub": (_case_binary(T.sub), [(3, 4), (3, 4)]),
    "mul": (_case_binary(T.mul), [(2, 3, 4), (3, 1)]),
    "div": (_case_binary(T.div, positive_rhs=True), [(3, 4), (3, 4)]),
    "scale": (_case_unary(lambda x: T.scale(x, -2.5)), [(3, 4)]),
    "matmul": (_case_binary(T.matmul), [(3, 4), (4, 2)]),
    "matmul_batched": (_case_binary(T.matmul), [(2, 3, 4), (2, 4, 5)]),
    "softmax_with_bias": (_build_softmax, [(2, 5)]),
    "softmax_with_bias_batched": (_build_softmax, [(2, 3, 4, 6)]),
    "layer_norm": (_build_layer_norm, [(4, 8)]),
    "gelu": (_case_unary(T.gelu), [(3, 5)]),
    "embedding": (_build_embedding, [(6, 4), (2, 5)]),
    "cross_entropy": (_build_cross_entropy, [(5, 7)]),
    "cosine_similarity": (_build_cosine, [(3, 6)]),
    "kl_divergence": (_build_kl, [(3, 6)]),
    "sum": (_case_unary(lambda x: T.sum_(x, axis=1)), [(3, 4, 2)]),
    "mean": (_case_unary(lambda x: T.mean(x, axis=0, keepdims=True)), [(3, 4)]),
    "concat": (_build_concat, [(2, 3), (2, 4)]),
    "getitem": (_build_getitem, [(4, 5)]),
    "reshape": (_case_unary(lambda x: T.reshape(x, (6, 2))), [(3, 4)]),
    "transpose": (_case_unary(lambda x: T.transpose(x, (1, 2, 0))), [(2, 3, 4)]),
}


def grad_check(op, shapes=None, seed=0, step=1e-5, retries=3):
    """Max relative error |analytic - numeric| / max(1, |numeric|) for a kernel.

    A builder that lands on a non-differentiable point is resampled with the
    next seed, at most ``retries`` times.
    """
    build, default_shapes = GRADCHECK_CASES[op]
    shapes = default_shapes if shapes is None else shapes
    last = None
    for attempt in range(retries + 1):
        rng = np.random.default_rng(seed + attempt)
        try:
            inputs, fn = build(rng, shapes)
            return check_function(fn, inputs, step)
        except NonDifferentiablePoint as exc:
            last = exc
    raise NonDifferentiablePoint(f"{op}: no differentiable sample after {retries} retries ({last})")
