"""Shared builders and deliberately naive reference implementations.

The ``naive_*`` helpers use plain Python loops and ``math`` so they share no
code path with the vectorised package functions they check.
"""

import math

import numpy as np
import pytest

from moekit.core import ExpertWeights, MoeLayer, MoeModel


def rand_expert(rng, d_h, d_m, scale=None):
    s = (1.0 / math.sqrt(d_h)) if scale is None else scale
    return ExpertWeights(
        rng.standard_normal((d_h, d_m)) * s,
        rng.standard_normal((d_h, d_m)) * s,
        rng.standard_normal((d_m, d_h)) * s,
    )


def rand_layer(rng, n=4, k=2, d_h=6, d_m=5):
    router = rng.standard_normal((d_h, n)) / math.sqrt(d_h)
    return MoeLayer(router, tuple(rand_expert(rng, d_h, d_m) for _ in range(n)), None, k)


def rand_model(rng, L=2, n=4, k=2, d_h=6, d_m=5):
    return MoeModel.from_layers([rand_layer(rng, n, k, d_h, d_m) for _ in range(L)])


# -- scalar oracles ------------------------------------------------------------------


def naive_sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def naive_expert(e, x):
    d_h, d_m = e.w_gate.shape
    h = []
    for j in range(d_m):
        g = sum(float(x[a]) * float(e.w_gate[a, j]) for a in range(d_h))
        u = sum(float(x[a]) * float(e.w_up[a, j]) for a in range(d_h))
        h.append(g * naive_sigmoid(g) * u)
    return [sum(h[j] * float(e.w_down[j, b]) for j in range(d_m)) for b in range(d_h)]


def naive_route(logits, k):
    order = sorted(range(len(logits)), key=lambda i: (-logits[i], i))[:k]
    top = max(logits[i] for i in order)
    ex = {i: math.exp(logits[i] - top) for i in order}
    z = sum(ex.values())
    return {i: v / z for i, v in ex.items()}


def naive_layer(layer, x):
    d_h, n = layer.router.shape
    logits = [sum(float(x[a]) * float(layer.router[a, i]) for a in range(d_h)) for i in range(n)]
    y = [0.0] * d_h
    for i, p in naive_route(logits, layer.k).items():
        out = naive_expert(layer.experts[layer.remap[i]], x)
        y = [a + p * b for a, b in zip(y, out)]
    return y


def naive_model(model, x):
    for layer in model.layers:
        x = naive_layer(layer, x)
    return x


def naive_distances(x):
    n = len(x)
    return [[math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(x[i], x[j]))) for j in range(n)] for i in range(n)]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
