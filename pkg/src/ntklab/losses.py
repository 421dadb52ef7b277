"""Training losses with analytic gradients.

Heads that act on intermediate tensors (cosine logits, embeddings) return
gradients shaped like their input; the trainer pulls them back to theta and
combines the resulting theta-aligned values with :func:`classification_loss`
and :func:`regularization_loss`.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DomainError, LayoutError, NumericalError
from .model import ModelParams, forward_cached, backward
from .numerics import extreme_singular_triplets, sym_eig


@dataclass(frozen=True)
class MarginConfig:
    s: float = 15.0
    m: float = 0.1
    t_ema: float = 0.0
    ema_momentum: float = 0.99


@dataclass(frozen=True)
class LossValue:
    value: float
    gradient: np.ndarray


def _log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=1, keepdims=True)
    return z - zmax - np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    an = a / np.linalg.norm(a, axis=1, keepdims=True)
    bn = b / np.linalg.norm(b, axis=1, keepdims=True)
    return an @ bn.T


def cosine_matrix_backward(a, b, grad_cos):
    """Pull ``dL/dcos`` back to ``(dL/da, dL/db)`` for ``cos = norm(a) norm(b)^T``."""
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    an, bn = a / na, b / nb
    cos = an @ bn.T
    ga = (grad_cos @ bn - np.sum(grad_cos * cos, axis=1, keepdims=True) * an) / na
    gb = (grad_cos.T @ an - np.sum(grad_cos * cos, axis=0)[:, None] * bn) / nb
    return ga, gb


def curricular_margin_loss(cosines, labels, cfg: MarginConfig) -> tuple[LossValue, MarginConfig]:
    """Curricular margin softmax; returns the loss (gradient w.r.t. ``cosines``) and the EMA-updated config.

    Negatives use ``N = cos`` when the per-pair threshold is non-negative and
    ``cos * (t + cos)`` otherwise. The positive branch is chosen by the
    majority sign of the thresholds over the sample's negatives.
    """
    c = np.asarray(cosines, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if c.ndim != 2 or y.shape != (c.shape[0],):
        raise ValueError(f"cosines {c.shape} and labels {y.shape} disagree")
    if np.any(np.abs(c) > 1.0 + 1e-9):
        raise DomainError(f"cosine outside [-1, 1]: max |cos| = {np.abs(c).max():.6g}")
    if y.min(initial=0) < 0 or y.max(initial=0) >= c.shape[1]:
        raise ValueError("label out of range")
    c = np.clip(c, -1.0, 1.0)
    b, k = c.shape
    rows = np.arange(b)
    s, m, t = cfg.s, cfg.m, cfg.t_ema
    cos_m, sin_m = np.cos(m), np.sin(m)

    cy = c[rows, y]
    sin_y = np.sqrt(np.maximum(1.0 - cy * cy, 1e-24))
    cy_m = cy * cos_m - sin_y * sin_m  # cos(theta_y + m)
    d_cy_m = cos_m + cy / sin_y * sin_m

    eps = cy_m[:, None] - c
    neg = np.ones_like(c, dtype=bool)
    neg[rows, y] = False
    hard = (eps < 0) & neg
    easy_votes = np.sum((eps >= 0) & neg, axis=1)
    hard_votes = np.sum(hard, axis=1)
    first = easy_votes >= hard_votes

    z = np.where(hard, c * (t + c), c)
    dz = np.where(hard, t + 2.0 * c, 1.0)
    pos = np.where(first, cy * cos_m - cy * cy * sin_m, cy_m + m * sin_m)
    dpos = np.where(first, cos_m - 2.0 * cy * sin_m, d_cy_m)
    z[rows, y] = pos
    dz[rows, y] = dpos

    logp = _log_softmax(s * z)
    value = float(-logp[rows, y].mean())
    g = np.exp(logp)
    g[rows, y] -= 1.0
    grad = g * s * dz / b
    new_t = cfg.ema_momentum * t + (1.0 - cfg.ema_momentum) * float(cy.mean())
    return LossValue(max(value, 0.0), grad), replace(cfg, t_ema=new_t)


def scaled_cosine_ce(cosines, labels, s: float) -> float:
    c = np.asarray(cosines, dtype=np.float64)
    y = np.asarray(labels)
    return float(-_log_softmax(s * c)[np.arange(c.shape[0]), y].mean())


def adaptability_loss(query_emb, support_emb, ways: int, shots: int, subdomain_labels) -> LossValue:
    """Cross-entropy of prototype cosine pseudo-labels against sub-domain labels.

    ``support_emb`` is class-major (``ways`` groups of ``shots`` rows). The
    gradient is w.r.t. the stacked rows ``[support_emb; query_emb]``.
    """
    q = np.asarray(query_emb, dtype=np.float64)
    sup = np.asarray(support_emb, dtype=np.float64)
    y = np.asarray(subdomain_labels, dtype=np.int64)
    if sup.shape[0] != ways * shots:
        raise ValueError(f"support has {sup.shape[0]} rows, expected {ways}*{shots}")
    protos = sup.reshape(ways, shots, -1).mean(axis=1)
    pn = np.linalg.norm(protos, axis=1)
    if np.any(pn <= 1e-12):
        raise NumericalError(f"zero-norm prototype for sub-domain class {int(np.argmax(pn <= 1e-12))}")
    qn = np.linalg.norm(q, axis=1)
    if np.any(qn <= 1e-12):
        raise NumericalError(f"zero-norm query embedding at row {int(np.argmax(qn <= 1e-12))}")
    pl = cosine_matrix(q, protos)
    logp = _log_softmax(pl)
    rows = np.arange(q.shape[0])
    value = float(-logp[rows, y].mean())
    g = np.exp(logp)
    g[rows, y] -= 1.0
    g /= q.shape[0]
    gq, gp = cosine_matrix_backward(q, protos, g)
    gs = np.repeat(gp / shots, shots, axis=0)
    return LossValue(max(value, 0.0), np.concatenate([gs, gq]))


def classification_loss(logit_loss: LossValue, emb_loss: LossValue, gamma: float) -> LossValue:
    if logit_loss.gradient.shape != emb_loss.gradient.shape:
        raise LayoutError(f"gradient shapes differ: {logit_loss.gradient.shape} vs {emb_loss.gradient.shape}")
    return LossValue(logit_loss.value + gamma * emb_loss.value, logit_loss.gradient + gamma * emb_loss.gradient)


def regularization_loss(conv: LossValue, lin: LossValue) -> LossValue:
    if conv.gradient.shape != lin.gradient.shape:
        raise LayoutError(f"gradient shapes differ: {conv.gradient.shape} vs {lin.gradient.shape}")
    return LossValue(conv.value + lin.value, conv.gradient + lin.gradient)


def conv_weight_matrix(params: ModelParams, i: int) -> np.ndarray:
    c = params.spec.conv_front[i]
    return params.block(f"conv{i}.w").reshape(c.out_channels, c.fan_in)


def conv_spectral_reg(params: ModelParams, alpha: float) -> LossValue:
    """``alpha * sum_c s_max(W_c) / s_min(W_c)`` over im2col-matricized conv weights."""
    grad = np.zeros(params.size)
    if alpha == 0.0 or not params.spec.conv_front:
        return LossValue(0.0, grad)
    total = 0.0
    for i in range(len(params.spec.conv_front)):
        w = conv_weight_matrix(params, i)
        top, bottom = extreme_singular_triplets(w)
        if bottom.value <= 1e-12:
            raise NumericalError(f"conv layer {i} weight is rank-deficient (smallest singular value {bottom.value:.3e})")
        ratio = top.value / bottom.value
        total += ratio
        dw = np.outer(top.left, top.right) / bottom.value - ratio / bottom.value * np.outer(bottom.left, bottom.right)
        grad[params.layout[f"conv{i}.w"].slice] = alpha * dw.ravel()
    return LossValue(alpha * total, grad)


def linear_ntk(params: ModelParams, embedding: np.ndarray) -> np.ndarray:
    """Trace-reduced NTK of the head block, from penultimate activations."""
    spec = params.spec
    z = embedding.shape[1]
    g = spec.output_dim * (spec.sigma_w**2 / z * embedding @ embedding.T + spec.sigma_b**2)
    return 0.5 * (g + g.T)  # BLAS products are not bit-symmetric


def linear_ntk_reg(
    params: ModelParams, x, prev_range: float | None, beta_hyper: float
) -> tuple[LossValue, float]:
    """``beta * (range of head-NTK eigenvalues now) / (range on the previous batch)``.

    ``prev_range=None`` bootstraps with the current range. The previous range
    is a constant. Returns the loss (theta gradient) and the current range.
    """
    cache = forward_cached(params, x)
    h = cache.embedding
    eig = sym_eig(linear_ntk(params, h))
    cur = float(eig.eigenvalues[0] - eig.eigenvalues[-1])
    denom = cur if prev_range is None else float(prev_range)
    if denom <= 1e-12:
        if cur <= 1e-12:
            return LossValue(float(beta_hyper), np.zeros(params.size)), cur
        raise DomainError(f"previous eigenvalue range {denom:.3e} is degenerate")
    value = beta_hyper * cur / denom
    if beta_hyper == 0.0:
        return LossValue(0.0, np.zeros(params.size)), cur
    vmax, vmin = eig.eigenvectors[:, 0], eig.eigenvectors[:, -1]
    spec = params.spec
    coef = beta_hyper / denom * 2.0 * spec.output_dim * spec.sigma_w**2 / h.shape[1]
    gh = coef * (np.outer(vmax, vmax @ h) - np.outer(vmin, vmin @ h))
    grad = backward(params, cache, None, grad_embedding=gh)
    return LossValue(float(value), grad), cur
