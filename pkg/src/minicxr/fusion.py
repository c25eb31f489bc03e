"""Bidirectional cross-modal attention with a dynamic gated blend.

Language-side hidden states attend over visual tokens (and vice versa
with distinct weights); a two-layer MLP over the concatenated streams
produces a per-position sigmoid gate that convexly blends the visually
attended stream with the untouched linguistic one. At gate 0 the blend is
an exact pass-through, at gate 1 it returns the attended stream, which
makes both saturation limits directly testable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray

GATE_HIDDEN = 32
GATE_BIAS_INIT = -2.0   # start near the unconditioned decoder
VALUE_INIT = 0.2        # wide value path so the visual signal ignites early


class MissingVisualContextError(ValueError):
    """Cross-attention was asked to attend over an empty visual stream."""


@dataclass
class FusedContext:
    """Blend output C plus the gate values that produced it."""

    C: DiffArray                 # (..., N_text, d_model)
    gate_values: np.ndarray      # (..., N_text, 1), strictly in (0, 1)
    attended: DiffArray          # the V->L stream entering the blend


def init_fusion_params(d_model: int, seed: int, prefix: str = "fus.",
                       n_layers: int = 1) -> dict[str, DiffArray]:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xF0)))
    params: dict[str, DiffArray] = {}

    def w(shape):
        return ad.param(0.02 * rng.standard_normal(shape))

    for layer in range(n_layers):
        p = f"{prefix}l{layer}."
        params[p + "wq_lv"] = w((d_model, d_model))   # V->L: queries from language
        params[p + "wk_vl"] = w((d_model, d_model))
        params[p + "wv_vl"] = ad.param(VALUE_INIT * rng.standard_normal((d_model, d_model)))
        params[p + "wq_vl"] = w((d_model, d_model))   # L->V: queries from vision
        params[p + "wk_lv"] = w((d_model, d_model))
        params[p + "wv_lv"] = w((d_model, d_model))
        params[p + "gate_w1"] = w((3 * d_model, GATE_HIDDEN))
        params[p + "gate_b1"] = ad.param(np.zeros(GATE_HIDDEN))
        params[p + "gate_w2"] = w((GATE_HIDDEN, 1))
        params[p + "gate_b2"] = ad.param(np.full(1, GATE_BIAS_INIT))
    return params


def _require_visual(E_V: DiffArray) -> None:
    if E_V.values.ndim < 2 or E_V.values.shape[-2] == 0:
        raise MissingVisualContextError("no visual tokens to attend over")


def cross_attend_v_to_l(E_L: DiffArray, E_V: DiffArray, params: dict,
                        prefix: str, return_weights: bool = False):
    """Scaled single-head attention: language queries over visual keys/values."""
    _require_visual(E_V)
    if E_L.values.shape[-1] != E_V.values.shape[-1]:
        raise ad.DimensionError(
            f"embedding widths differ: {E_L.values.shape} vs {E_V.values.shape}")
    d = E_L.values.shape[-1]
    q = ad.matmul(E_L, params[prefix + "wq_lv"])
    k = ad.matmul(E_V, params[prefix + "wk_vl"])
    v = ad.matmul(E_V, params[prefix + "wv_vl"])
    scores = ad.scale(ad.matmul(q, ad.transpose_last2(k)), 1.0 / math.sqrt(d))
    weights = ad.softmax_rows(scores)
    out = ad.matmul(weights, v)
    if return_weights:
        return out, weights
    return out


def cross_attend_l_to_v(E_V: DiffArray, E_L: DiffArray, params: dict,
                        prefix: str, return_weights: bool = False):
    """Mirror direction with its own weight matrices: visual queries over text."""
    _require_visual(E_V)
    if E_L.values.shape[-1] != E_V.values.shape[-1]:
        raise ad.DimensionError(
            f"embedding widths differ: {E_V.values.shape} vs {E_L.values.shape}")
    d = E_V.values.shape[-1]
    q = ad.matmul(E_V, params[prefix + "wq_vl"])
    k = ad.matmul(E_L, params[prefix + "wk_lv"])
    v = ad.matmul(E_L, params[prefix + "wv_lv"])
    scores = ad.scale(ad.matmul(q, ad.transpose_last2(k)), 1.0 / math.sqrt(d))
    weights = ad.softmax_rows(scores)
    out = ad.matmul(weights, v)
    if return_weights:
        return out, weights
    return out


def fuse(E_L: DiffArray, E_V: DiffArray, params: dict,
         prefix: str = "fus.l0.") -> FusedContext:
    """Gated convex blend of the attended and linguistic streams.

    C = g * Attn(V->L) + (1 - g) * E_L, with g = sigmoid(MLP([E_L ;
    Attn(V->L) ; mean-pooled Attn(L->V)])). Saturating the gate MLP bias
    to -inf/+inf therefore reproduces E_L or the attended stream exactly.
    """
    attended = cross_attend_v_to_l(E_L, E_V, params, prefix)
    reverse = cross_attend_l_to_v(E_V, E_L, params, prefix)
    pooled = ad.mean_axis(reverse, axis=-2)
    zeros = ad.constant(np.zeros(E_L.values.shape))
    pooled_rows = ad.add(zeros, pooled)        # broadcast pool to every row
    gate_in = ad.concat_last([E_L, attended, pooled_rows])
    hidden = ad.gelu(ad.add(ad.matmul(gate_in, params[prefix + "gate_w1"]),
                            params[prefix + "gate_b1"]))
    logit = ad.add(ad.matmul(hidden, params[prefix + "gate_w2"]),
                   params[prefix + "gate_b2"])
    g = ad.sigmoid(logit)
    one_minus = ad.sub(ad.constant(np.ones_like(g.values)), g)
    C = ad.add(ad.mul(g, attended), ad.mul(one_minus, E_L))
    return FusedContext(C=C, gate_values=g.values, attended=attended)
