"""Hierarchical relation decoder, hop attention and the answer distribution.

For hop ``t`` the decoder input is ``u_t = [h_q | r_{t-1} | ... | r_1]``;
``r_t = softmax(W_inf[t] u_t)`` and ``x_t = follow(x_{t-1}, r_t)``.  A scalar
``c_t = W_att[t] . u_t`` per hop feeds a softmax ``a`` over hops, and the
answer is ``y_hat = sum_t a_t x_t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._numeric import softmax, softmax_backward
from .exceptions import ShapeError
from .kg import ReifiedKG, _as_dense, follow, follow_backward

INIT_SCALE = 0.05


@dataclass
class HopDecoderParams:
    W_inf: list[np.ndarray]
    W_att: list[np.ndarray]

    @classmethod
    def init(cls, dim: int, n_relations: int, t_max: int, rng=None, scale: float = INIT_SCALE) -> "HopDecoderParams":
        if t_max < 1:
            raise ValueError("t_max must be at least 1")
        rng = np.random.default_rng(rng)
        W_inf, W_att = [], []
        for t in range(1, t_max + 1):
            width = dim + (t - 1) * n_relations
            W_inf.append(rng.uniform(-scale, scale, size=(n_relations, width)))
            W_att.append(rng.uniform(-scale, scale, size=width))
        return cls(W_inf, W_att)

    @property
    def t_max(self) -> int:
        return len(self.W_inf)

    @property
    def n_relations(self) -> int:
        return self.W_inf[0].shape[0]

    @property
    def dim(self) -> int:
        return self.W_inf[0].shape[1]

    def validate(self) -> None:
        if len(self.W_att) != len(self.W_inf) or not self.W_inf:
            raise ShapeError("W_inf and W_att must both have t_max >= 1 entries")
        d, n_r = self.dim, self.n_relations
        for t, (Wi, Wa) in enumerate(zip(self.W_inf, self.W_att), 1):
            width = d + (t - 1) * n_r
            if Wi.shape != (n_r, width) or Wa.shape != (width,):
                raise ShapeError(f"hop {t} decoder shapes {Wi.shape}/{Wa.shape} do not match width {width}")


def decoder_input(h_q: np.ndarray, priors) -> np.ndarray:
    """``[h_q | r_{t-1} | ... | r_1]`` for ``priors = [r_1, ..., r_{t-1}]``."""
    return np.concatenate([h_q, *priors[::-1]]) if priors else np.asarray(h_q, dtype=np.float64)


def decode_relation(params: HopDecoderParams, h_q: np.ndarray, priors=()) -> np.ndarray:
    priors = list(priors)
    t = len(priors) + 1
    if t > params.t_max:
        raise ValueError(f"hop {t} exceeds t_max={params.t_max}")
    u = decoder_input(h_q, priors)
    W = params.W_inf[t - 1]
    if u.shape != (W.shape[1],):
        raise ShapeError(f"decoder input has width {u.shape}, hop {t} expects {W.shape[1]}")
    return softmax(W @ u)


@dataclass
class InferenceTrace:
    x0: np.ndarray
    h_q: np.ndarray
    inputs: list[np.ndarray]
    relations: list[np.ndarray]
    entities: list[np.ndarray]
    att_logits: np.ndarray
    attention: np.ndarray
    y_hat: np.ndarray

    @property
    def t_max(self) -> int:
        return len(self.relations)


def run_hops(kg: ReifiedKG, params: HopDecoderParams, x0, h_q) -> InferenceTrace:
    x0 = _as_dense(kg, x0, "x0")
    h_q = np.asarray(h_q, dtype=np.float64)
    if params.n_relations != kg.n_relations:
        raise ShapeError(f"decoder has {params.n_relations} relations, graph has {kg.n_relations}")
    if h_q.shape != (params.W_inf[0].shape[1],):
        raise ShapeError(f"h_q has shape {h_q.shape}, decoder expects ({params.W_inf[0].shape[1]},)")
    inputs, rels, ents, logits = [], [], [], []
    x = x0
    for t in range(params.t_max):
        u = decoder_input(h_q, rels)
        r = softmax(params.W_inf[t] @ u)
        x = follow(kg, x, r)
        inputs.append(u)
        rels.append(r)
        ents.append(x)
        logits.append(params.W_att[t] @ u)
    c = np.array(logits)
    a = softmax(c)
    y_hat = a @ np.array(ents)
    return InferenceTrace(x0, h_q, inputs, rels, ents, c, a, y_hat)


@dataclass
class InferenceGrads:
    W_inf: list[np.ndarray]
    W_att: list[np.ndarray]
    h_q: np.ndarray
    x0: np.ndarray


def inference_backward(kg: ReifiedKG, params: HopDecoderParams, trace: InferenceTrace, grad_y) -> InferenceGrads:
    g_y = _as_dense(kg, grad_y, "grad_y")
    T = trace.t_max
    d = trace.h_q.size
    n_r = kg.n_relations

    X = np.array(trace.entities)
    g_c = softmax_backward(trace.attention, X @ g_y)

    g_W_inf = [np.zeros_like(W) for W in params.W_inf]
    g_W_att = [np.zeros_like(W) for W in params.W_att]
    g_h = np.zeros(d)
    g_r = [np.zeros(n_r) for _ in range(T)]
    g_x = trace.attention[T - 1] * g_y
    for t in range(T - 1, -1, -1):
        x_prev = trace.x0 if t == 0 else trace.entities[t - 1]
        g_x_prev, g_r_follow = follow_backward(kg, x_prev, trace.relations[t], g_x)
        g_r[t] += g_r_follow
        u = trace.inputs[t]
        g_z = softmax_backward(trace.relations[t], g_r[t])
        g_W_inf[t] = np.outer(g_z, u)
        g_W_att[t] = g_c[t] * u
        g_u = params.W_inf[t].T @ g_z + g_c[t] * params.W_att[t]
        g_h += g_u[:d]
        # u_t = [h_q | r_{t-1} | ... | r_1]
        for k in range(t):
            prior = t - 1 - k
            g_r[prior] += g_u[d + k * n_r : d + (k + 1) * n_r]
        if t > 0:
            g_x = g_x_prev + trace.attention[t - 1] * g_y
        else:
            g_x = g_x_prev
    return InferenceGrads(g_W_inf, g_W_att, g_h, g_x)
