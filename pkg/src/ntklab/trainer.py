"""Base-session meta-training, the FSCIL session protocol, and plain regression GD."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .errors import ConfigError, DivergenceError
from .fscil import (
    FscilDataset,
    SessionReport,
    extended_class_count,
    finalize_report,
    mixup_extend,
    ncm_evaluate,
    sample_episode,
)
from .losses import (
    LossValue,
    MarginConfig,
    adaptability_loss,
    classification_loss,
    conv_spectral_reg,
    cosine_matrix,
    cosine_matrix_backward,
    curricular_margin_loss,
    linear_ntk_reg,
    regularization_loss,
)
from .model import ModelParams, NetworkSpec, backward, embed, forward_cached, init_params
from .ntk import (
    ConvergenceCheck,
    SpectrumTrace,
    convergence_bound_check,
    empirical_ntk,
    eta0_from,
    spectrum_snapshot,
)
from .numerics import make_rng


AUTO_ETA0 = "auto-eta0"

# stream keys for make_rng(seed, key)
_INIT, _CLASSIFIER, _EPISODES, _MIX, _PROBE = range(5)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 300
    batch_size: int = 1  # episodes per gradient step
    lr: float | Literal["auto-eta0"] = 0.1
    gamma: float = 0.5
    alpha: float = 1e-3
    beta_hyper: float = 1e-3
    mix_alpha: float = 0.2
    margin: MarginConfig = MarginConfig()
    ways: int = 5
    shots: int = 5
    queries: int = 3
    spectrum_every: int = 10
    probe_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.spectrum_every < 1:
            raise ConfigError("spectrum_every must be >= 1")
        if self.probe_size < 2:
            raise ConfigError("probe_size must be >= 2")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if self.lr != AUTO_ETA0 and not (isinstance(self.lr, (int, float)) and self.lr > 0):
            raise ConfigError(f"lr must be positive or {AUTO_ETA0!r}, got {self.lr!r}")


@dataclass
class TrainState:
    params: ModelParams
    classifier: np.ndarray  # one cosine-classifier row per real or virtual class
    step: int = 0
    margin_cfg: MarginConfig = MarginConfig()
    prev_lin_range: float | None = None
    spectrum_trace: SpectrumTrace = field(default_factory=SpectrumTrace)
    loss_trace: list = field(default_factory=list)
    convergence: ConvergenceCheck | None = None
    lr: float = 0.0
    initial_params: ModelParams | None = None


def embedding_fn(params: ModelParams):
    """Penultimate activations; NCM L2-normalizes them."""
    def fn(x):
        return embed(params, x)

    return fn


def probe_indices(ds: FscilDataset, size: int, seed: int) -> np.ndarray:
    train = ds.train_indices(0)
    rng = make_rng(seed, _PROBE)
    return np.sort(rng.choice(train, size=min(size, train.size), replace=False))


def _episode_step(state: TrainState, ds: FscilDataset, cfg: TrainConfig, ep_rng, mix_rng):
    """Loss value and gradients (theta, classifier) for one episode."""
    params = state.params
    ep = sample_episode(ds, cfg.ways, cfg.shots, cfg.queries, ep_rng)
    x_real = np.concatenate([ep.support_x, ep.query_x])
    y_real = np.concatenate([ep.support_labels, ep.query_labels])
    mix = mixup_extend(x_real, y_real, cfg.mix_alpha, ds.base_classes, mix_rng)
    x_all = np.concatenate([x_real, mix.mixed_x])
    y_all = np.concatenate([y_real, mix.mixed_class_ids])

    cache = forward_cached(params, x_all)
    f = cache.output
    cos = cosine_matrix(f, state.classifier)
    logit, margin_cfg = curricular_margin_loss(cos, y_all, state.margin_cfg)
    gf, gw = cosine_matrix_backward(f, state.classifier, logit.gradient)
    logit_theta = LossValue(logit.value, backward(params, cache, gf))

    n_real = x_real.shape[0]
    n_sup = ep.support_x.shape[0]
    if cfg.gamma > 0:
        h = cache.embedding[:n_real]
        emb = adaptability_loss(h[n_sup:], h[:n_sup], cfg.ways, cfg.shots, ep.subdomain_labels)
        gh = np.zeros_like(cache.embedding)
        gh[:n_real] = emb.gradient
        emb_theta = LossValue(emb.value, backward(params, cache, None, grad_embedding=gh))
    else:
        emb_theta = LossValue(0.0, np.zeros(params.size))
    cls = classification_loss(logit_theta, emb_theta, cfg.gamma)

    conv = conv_spectral_reg(params, cfg.alpha)
    if cfg.beta_hyper > 0:
        lin, cur_range = linear_ntk_reg(params, ep.query_x, state.prev_lin_range, cfg.beta_hyper)
    else:
        lin, cur_range = LossValue(0.0, np.zeros(params.size)), state.prev_lin_range
    reg = regularization_loss(conv, lin)
    total = LossValue(cls.value + reg.value, cls.gradient + reg.gradient)
    return total, gw, margin_cfg, cur_range


def init_state(ds: FscilDataset, spec: NetworkSpec, cfg: TrainConfig, init_hook=None) -> TrainState:
    if spec.input_dim != ds.dim:
        raise ConfigError(f"network input_dim {spec.input_dim} != dataset feature dim {ds.dim}")
    params = init_params(spec, make_rng(cfg.seed, _INIT), init_hook)
    classifier = make_rng(cfg.seed, _CLASSIFIER).standard_normal((extended_class_count(ds.base_classes), spec.output_dim))
    return TrainState(params=params, classifier=classifier, margin_cfg=cfg.margin, initial_params=params)


def _record_spectrum(state: TrainState, ds: FscilDataset, probe_x: np.ndarray) -> None:
    ntk = empirical_ntk(state.params, probe_x)
    acc = ncm_evaluate(embedding_fn(state.params), ds, 0).accuracy
    spectrum_snapshot(ntk, state.step, acc, state.spectrum_trace)


def train_base_session(
    ds: FscilDataset, spec: NetworkSpec, cfg: TrainConfig, init_hook=None, state: TrainState | None = None
) -> TrainState:
    """Episodic gradient descent on margin + adaptability + dual NTK regularization losses."""
    state = state or init_state(ds, spec, cfg, init_hook)
    probe_x = ds.features[probe_indices(ds, cfg.probe_size, cfg.seed)]
    ep_rng = make_rng(cfg.seed, _EPISODES)
    mix_rng = make_rng(cfg.seed, _MIX)
    ntk0 = None
    if cfg.lr == AUTO_ETA0:
        ntk0 = empirical_ntk(state.params, probe_x)
        state.lr = eta0_from(ntk0)
    else:
        state.lr = float(cfg.lr)

    _record_spectrum(state, ds, probe_x)
    theta = state.params.theta.copy()
    for _ in range(cfg.steps):
        value = 0.0
        g_theta = np.zeros_like(theta)
        g_cls = np.zeros_like(state.classifier)
        for _ in range(cfg.batch_size):
            total, gw, margin_cfg, cur_range = _episode_step(state, ds, cfg, ep_rng, mix_rng)
            value += total.value / cfg.batch_size
            g_theta += total.gradient / cfg.batch_size
            g_cls += gw / cfg.batch_size
            state.margin_cfg = margin_cfg
            if cur_range is not None and cur_range > 1e-12:
                state.prev_lin_range = cur_range
        if not np.isfinite(value) or value > 1e6 or not np.all(np.isfinite(g_theta)):
            raise DivergenceError(state.step, value)
        theta = theta - state.lr * g_theta
        state.params = state.params.with_theta(theta)
        state.classifier = state.classifier - state.lr * g_cls
        state.loss_trace.append(value)
        state.step += 1
        if state.step % cfg.spectrum_every == 0:
            _record_spectrum(state, ds, probe_x)
    if ntk0 is not None and state.loss_trace:
        state.convergence = convergence_bound_check(state.loss_trace, ntk0)
    return state


def run_protocol(state: TrainState, ds: FscilDataset) -> SessionReport:
    """Frozen-embedding NCM over sessions ``0..S``; base/incremental accuracy from the last session."""
    embed_fn = embedding_fn(state.params)
    evals = [ncm_evaluate(embed_fn, ds, s) for s in range(ds.sessions + 1)]
    last = evals[-1]
    inc = last.novel_accuracy if ds.sessions > 0 else 0.0
    return finalize_report([e.accuracy for e in evals], last.base_accuracy, inc)


# ---------------------------------------------------------------- regression GD


@dataclass
class RegressionRun:
    params: ModelParams
    losses: np.ndarray  # 0.5 * ||f(X) - Y||^2 before each recorded step
    steps: np.ndarray
    lr: float
    ntk0: object | None = None


def fit_regression(
    params: ModelParams,
    x,
    y,
    lr: float | Literal["auto-eta0"],
    steps: int,
    record_every: int = 1,
) -> RegressionRun:
    """Full-batch gradient descent on ``0.5 * ||f(x) - y||^2``.

    With ``lr="auto-eta0"`` the step is ``2 / (s_min + s_max)`` of the raw
    empirical NTK at initialization.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(x.shape[0], -1)
    ntk0 = None
    if lr == AUTO_ETA0:
        ntk0 = empirical_ntk(params, x)
        lr = eta0_from(ntk0)
    theta = params.theta.copy()
    losses, recorded = [], []
    for step in range(steps + 1):
        cache = forward_cached(params, x)
        resid = cache.output - y
        if step % record_every == 0 or step == steps:
            losses.append(0.5 * float(np.sum(resid**2)))
            recorded.append(step)
        if step == steps:
            break
        theta = theta - lr * backward(params, cache, resid)
        params = params.with_theta(theta)
    return RegressionRun(params, np.array(losses), np.array(recorded), float(lr), ntk0)
