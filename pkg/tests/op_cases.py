"""One builder + input sampler per differentiable op, shared by the unit and
acceptance gradient checks."""

import numpy as np

from dsgreplay import tensor as T


def _away_from_zero(rng, shape):
    x = rng.standard_normal(shape)
    return np.sign(x) * (0.1 + np.abs(x))


def _bn_eval(ts):
    return T.forward_op("batchnorm1d", ts, {"running_mean": np.array([0.3, -0.2, 0.1]),
                                             "running_var": np.array([1.5, 0.7, 2.0]), "train": False})


def _bn_train(ts):
    return T.forward_op("batchnorm1d", ts, {"running_mean": np.zeros(3), "running_var": np.ones(3),
                                             "train": True})


OP_CASES = {
    "add": (lambda ts: ts[0] + ts[1], lambda r: [r.standard_normal((3, 4)), r.standard_normal((1, 4))]),
    "sub": (lambda ts: ts[0] - ts[1], lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 1))]),
    "mul": (lambda ts: ts[0] * ts[1], lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((3, 1))]),
    "scalar_mul": (lambda ts: ts[0] * 2.5, lambda r: [r.standard_normal((3, 4))]),
    "matmul": (lambda ts: ts[0] @ ts[1], lambda r: [r.standard_normal((3, 5)), r.standard_normal((5, 2))]),
    "conv1d": (lambda ts: T.conv1d(ts[0], ts[1], ts[2], stride=1, padding=2),
               lambda r: [r.standard_normal((2, 3, 9)), r.standard_normal((4, 3, 5)), r.standard_normal(4)]),
    "conv1d_stride2": (lambda ts: T.conv1d(ts[0], ts[1], ts[2], stride=2, padding=1),
                       lambda r: [r.standard_normal((2, 2, 8)), r.standard_normal((3, 2, 3)), r.standard_normal(3)]),
    "relu": (lambda ts: T.relu(ts[0]), lambda r: [_away_from_zero(r, (3, 5))]),
    "maxpool1d": (lambda ts: T.maxpool1d(ts[0], 2, 2), lambda r: [r.standard_normal((2, 3, 8))]),
    "global_avg_pool1d": (lambda ts: T.global_avg_pool1d(ts[0]), lambda r: [r.standard_normal((2, 3, 7))]),
    "batchnorm1d_train": (_bn_train, lambda r: [r.standard_normal((4, 3, 5)), 1 + 0.2 * r.standard_normal(3),
                                                r.standard_normal(3)]),
    "batchnorm1d_eval": (_bn_eval, lambda r: [r.standard_normal((4, 3, 5)), 1 + 0.2 * r.standard_normal(3),
                                              r.standard_normal(3)]),
    "dropout": (lambda ts: T.dropout(ts[0], 0.3, True, np.random.default_rng(7)),
                lambda r: [r.standard_normal((4, 6))]),
    "softmax_cross_entropy": (lambda ts: T.softmax_cross_entropy(ts[0], [0, 2, 1, 2]),
                              lambda r: [r.standard_normal((4, 3))]),
    "mse": (lambda ts: T.mse(ts[0], ts[1]), lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 4))]),
    "concat": (lambda ts: T.concat(ts, axis=1), lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((2, 1, 4))]),
    "slice": (lambda ts: T.slice_(ts[0], 2, 1, 4), lambda r: [r.standard_normal((2, 3, 6))]),
    "reshape": (lambda ts: ts[0].reshape(6, 2) @ ts[1], lambda r: [r.standard_normal((3, 4)), r.standard_normal((2, 3))]),
    "embedding_lookup": (lambda ts: T.embedding_lookup(ts[0], [2, 0, 2, 4]), lambda r: [r.standard_normal((5, 3))]),
    "upsample1d": (lambda ts: T.upsample1d(ts[0], 2), lambda r: [r.standard_normal((2, 3, 4))]),
}
