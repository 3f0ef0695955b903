"""Random small computation graphs for gradient checks.

Each graph is a chain of 3 to 6 steps acting on a (3, 4) tensor ``h``. Every
step uses one primitive (plus small helpers to keep inputs in domain), and the
scalar loss is ``sum(out * w)`` for a fixed random ``w``.
"""

from __future__ import annotations

import numpy as np

from lnsr import diffcore as dc

SHAPE = (3, 4)


def _step_add(h, p, rng):
    return dc.add(h, p["v4"])


def _step_sub(h, p, rng):
    return dc.sub(p["m34"], h)


def _step_mul(h, p, rng):
    return dc.mul(h, p["m34"])


def _step_div(h, p, rng):
    return dc.div(h, dc.add(dc.square(p["m34"]), 0.5))


def _step_matmul(h, p, rng):
    return dc.matmul(h, p["m44"])


def _step_neg(h, p, rng):
    return dc.neg(h)


def _step_tanh(h, p, rng):
    return dc.tanh(h)


def _step_relu(h, p, rng):
    return dc.relu(h)


def _step_gelu(h, p, rng):
    return dc.gelu(h)


def _step_exp(h, p, rng):
    return dc.exp(dc.mul(h, 0.3))


def _step_log(h, p, rng):
    return dc.log(dc.add(dc.square(h), 1.0))


def _step_square(h, p, rng):
    return dc.square(h)


def _step_softmax(h, p, rng):
    return dc.softmax(h)


def _step_log_softmax(h, p, rng):
    return dc.log_softmax(h)


def _step_layer_norm(h, p, rng):
    return dc.layer_norm(h, p["g4"], p["v4"], eps=1e-5)


def _step_sum(h, p, rng):
    return dc.add(h, dc.sum_(h, axis=1, keepdims=True))


def _step_mean(h, p, rng):
    return dc.mul(h, dc.mean(h, axis=0, keepdims=True))


def _step_sum_squares(h, p, rng):
    return dc.mul(h, dc.mul(dc.sum_squares(h), 0.1))


def _step_reshape(h, p, rng):
    return dc.matmul(dc.reshape(dc.reshape(h, (12,)), (4, 3)).transpose(), p["m44"])


def _step_transpose(h, p, rng):
    return dc.transpose(dc.matmul(dc.transpose(h), p["m33"]))


def _step_getitem(h, p, rng):
    return dc.getitem(h, (np.array([0, 2, 2]), slice(None)))


def _step_where(h, p, rng):
    mask = rng.random(SHAPE) < 0.5
    return dc.where(mask, h, p["m34"])


STEPS = {
    "add": _step_add,
    "sub": _step_sub,
    "mul": _step_mul,
    "div": _step_div,
    "matmul": _step_matmul,
    "neg": _step_neg,
    "tanh": _step_tanh,
    "relu": _step_relu,
    "gelu": _step_gelu,
    "exp": _step_exp,
    "log": _step_log,
    "square": _step_square,
    "softmax": _step_softmax,
    "log_softmax": _step_log_softmax,
    "layer_norm": _step_layer_norm,
    "sum": _step_sum,
    "mean": _step_mean,
    "sum_squares": _step_sum_squares,
    "reshape": _step_reshape,
    "transpose": _step_transpose,
    "getitem": _step_getitem,
    "where": _step_where,
}


def make_graph(index: int, seed: int = 0):
    """Graph number ``index``: (builder, inputs, step names).

    The first step rotates through every primitive so that any run of
    ``len(STEPS)`` consecutive graphs covers all of them.
    """
    rng = np.random.default_rng([seed, index])
    names = sorted(STEPS)
    chain = [names[index % len(names)]] + [str(s) for s in rng.choice(names, size=rng.integers(2, 6))]
    inputs = {
        "x": rng.normal(size=SHAPE),
        "m34": rng.normal(size=SHAPE),
        "m44": rng.normal(scale=0.5, size=(4, 4)),
        "m33": rng.normal(scale=0.5, size=(3, 3)),
        "v4": rng.normal(size=4),
        "g4": 1.0 + 0.2 * rng.normal(size=4),
    }
    weights = rng.normal(size=SHAPE)
    graph_seed = int(rng.integers(2**31))

    def builder(**p):
        step_rng = np.random.default_rng(graph_seed)
        h = p["x"]
        for name in chain:
            h = STEPS[name](h, p, step_rng)
        return dc.sum_(dc.mul(h, weights))

    return builder, inputs, chain


def check_graph(builder, inputs, h: float = 1e-6) -> float:
    """Worst max-relative-error between tape gradients and central differences."""
    _, tape = dc.evaluate(builder, inputs)
    grads = dc.backward(tape)
    worst = 0.0
    for name, value in inputs.items():
        def f(v, name=name):
            return builder(**{**inputs, name: v})

        fd = dc.finite_difference_gradient(f, value, h=h)
        worst = max(worst, dc.max_relative_error(grads[name], fd))
    return worst
