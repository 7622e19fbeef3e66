"""Learned feature maps: small dense networks trained with batch CME losses.

The state encoder is trained so that next-step features are linearly
predictable from current ones, with the linear operator re-estimated by
ridge regression on every mini-batch and treated as a constant when
differentiating.  A decoder network is trained jointly to invert the
encoder.  Observation and history encoders are then trained, with the state
encoder frozen, so that their tensor-product features linearly predict
the state features.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .cme import (DEFAULT_LAMBDA, ConstantFeatureMap, FeatureSpaceModel, fit_operators,
                  ridge_operator, tensor_features, trace_normalized_lambda)
from .errors import InvalidSpecError, NonFiniteError, StaleCacheError
from .kernel import Standardizer

log = logging.getLogger(__name__)

BATCH_LAMBDA = 1e-3


class DenseNet:
    """Fully connected network with ``tanh`` hidden layers and a linear output.

    ``forward`` caches activations for one subsequent ``backward``; any
    parameter update in between invalidates the cache.
    """

    def __init__(self, sizes, rng=None, weights=None, biases=None):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise InvalidSpecError(f"invalid layer sizes {sizes}")
        self.sizes = sizes
        if weights is None:
            rng = np.random.default_rng(0) if rng is None else rng
            weights, biases = [], []
            for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
                bound = 1.0 / np.sqrt(fan_in)
                weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
                biases.append(rng.uniform(-bound, bound, fan_out))
        self.weights = [np.array(w, dtype=float) for w in weights]
        self.biases = [np.array(b, dtype=float) for b in biases]
        self._version = 0
        self._cache = None

    @property
    def params(self):
        return self.weights + self.biases

    def forward(self, X, keep=True):
        a = np.atleast_2d(np.asarray(X, dtype=float))
        acts = [a]
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            a = a @ W + b
            if i < last:
                a = np.tanh(a)
            acts.append(a)
        if keep:
            self._cache = (self._version, acts)
        return a

    __call__ = forward

    def backward(self, grad_out):
        """Parameter gradients and input gradient for the cached forward pass."""
        if self._cache is None:
            raise StaleCacheError("backward called without a preceding forward pass")
        version, acts = self._cache
        if version != self._version:
            raise StaleCacheError("parameters changed since the forward pass")
        self._cache = None
        g = np.asarray(grad_out, dtype=float)
        n_layers = len(self.weights)
        gW, gb = [None] * n_layers, [None] * n_layers
        for i in range(n_layers - 1, -1, -1):
            if i < n_layers - 1:
                g = g * (1.0 - acts[i + 1] ** 2)
            gW[i] = acts[i].T @ g
            gb[i] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return gW + gb, g

    def apply_update(self, deltas):
        for p, d in zip(self.params, deltas):
            p += d
        self._version += 1

    def to_dict(self):
        return {"sizes": self.sizes}


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def for_params(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(grads, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Return parameter increments and advance the moment estimates."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    out = []
    for i, g in enumerate(grads):
        state.m[i] = beta1 * state.m[i] + (1 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1 - beta2) * g * g
        out.append(-lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps))
    return out


@dataclass(frozen=True)
class DeepConfig:
    d_s: int = 60
    d_o: int = 32
    d_h: int = 32
    hidden: tuple | None = None
    epochs: int = 30
    batch_size: int = 512
    lr: float = 1e-3
    recon_weight: float = 1.0
    batch_lambda: float = BATCH_LAMBDA
    lam: float = DEFAULT_LAMBDA
    add_constant: bool = True
    select_inverse_lambda: bool = True

    def __post_init__(self):
        if min(self.d_s, self.d_o, self.d_h, self.epochs) < 1:
            raise InvalidSpecError("dimensions and epoch count must be positive")
        if self.batch_size < self.d_s + 1:
            raise InvalidSpecError("batch size must exceed d_s for a well-posed batch operator")
        if not 0.0 < self.recon_weight <= 1.0:
            raise InvalidSpecError("reconstruction weight must lie in (0, 1]")
        if self.lr <= 0 or self.batch_lambda <= 0:
            raise InvalidSpecError("learning rate and batch ridge must be positive")

    def layers(self, n_in, n_out, widths=(4, 2)):
        """Layer sizes ``n_in -> widths*n_in -> n_out`` unless ``hidden`` is set."""
        hidden = self.hidden if self.hidden is not None else [w * n_in for w in widths]
        return [n_in, *hidden, n_out]

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


@dataclass
class NetworkFeatureMap:
    """Network applied to standardised inputs, optionally with a leading 1."""

    net: DenseNet
    standardizer: Standardizer
    add_constant: bool = False

    @property
    def dim(self) -> int:
        return self.net.sizes[-1] + int(self.add_constant)

    def __call__(self, X):
        Z = self.net.forward(self.standardizer(np.atleast_2d(X)), keep=False)
        if self.add_constant:
            Z = np.hstack([np.ones((Z.shape[0], 1)), Z])
        return Z


@dataclass
class NetworkDecoder:
    """Inverse network mapping state features back to physical states."""

    net: DenseNet
    standardizer: Standardizer

    def __call__(self, Z):
        out = self.net.forward(np.atleast_2d(Z), keep=False)
        return out * self.standardizer.scale + self.standardizer.mean


@dataclass
class TrainingLog:
    losses: list = field(default_factory=list)
    seconds: float = 0.0


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = perm[start:start + batch_size]
        if idx.size >= 2:
            yield idx


def _batch_operator(X, Y, lam):
    """Ridge operator with a trace-normalised ridge, for use as a constant."""
    return ridge_operator(X, Y, trace_normalized_lambda(X, lam))


def state_batch_loss(enc: DenseNet, dec: DenseNet, X, Xn, lam=BATCH_LAMBDA, recon_weight=1.0):
    """Loss and parameter gradients ``(loss, g_enc, g_dec)`` for one batch.

    The prediction term is the one-step feature prediction error relative to
    the spread of the next-step features, so shrinking the features cannot
    reduce it.  The batch operator is held constant when differentiating.
    The reconstruction term is the mean squared decoder error.
    """
    b = X.shape[0]
    Z2 = enc.forward(np.concatenate([X, Xn]))
    Z, Zn = Z2[:b], Z2[b:]
    C = _batch_operator(Z, Zn, lam)
    resid = Zn - Z @ C.T
    Zc = Zn - Zn.mean(axis=0)
    var = max(float(np.sum(Zc ** 2)), 1e-12)
    pred = float(np.sum(resid ** 2)) / var
    rec_err = dec.forward(Z) - X
    loss = pred + recon_weight * float(np.sum(rec_err ** 2)) / b
    g_dec, g_z_rec = dec.backward(2.0 * recon_weight * rec_err / b)
    g_z = -2.0 * resid @ C / var + g_z_rec
    g_zn = 2.0 * (resid - pred * Zc) / var
    g_enc, _ = enc.backward(np.concatenate([g_z, g_zn]))
    return loss, g_enc, g_dec


def _with_constant(Z, c):
    return np.hstack([np.ones((Z.shape[0], 1)), Z]) if c else Z


def obs_batch_loss(enc_o: DenseNet, enc_h: DenseNet | None, Xo, Xh, Z_s, lam=BATCH_LAMBDA,
                   add_constant=True):
    """Loss and gradients ``(loss, g_obs, g_hist)`` of the tensor-feature regression.

    ``enc_h`` is ``None`` for an empty history, whose feature is the constant 1.
    """
    b = Xo.shape[0]
    c = int(add_constant)
    A = _with_constant(enc_o.forward(Xo), c)
    Hf = _with_constant(enc_h.forward(Xh), c) if enc_h is not None else np.ones((b, 1))
    W = tensor_features(A, Hf)
    C = _batch_operator(W, Z_s, lam)
    resid = Z_s - W @ C.T
    loss = float(np.sum(resid ** 2)) / b
    G = (-2.0 * resid @ C / b).reshape(b, A.shape[1], Hf.shape[1])
    g_o, _ = enc_o.backward(np.einsum("nij,nj->ni", G, Hf)[:, c:])
    g_h = None
    if enc_h is not None:
        g_h, _ = enc_h.backward(np.einsum("nij,ni->nj", G, A)[:, c:])
    return loss, g_o, g_h


def train_state_features(S, S_next, config: DeepConfig = DeepConfig(), seed=0):
    """Train the state encoder and its decoder; return ``(map, decoder, log)``."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    std = Standardizer.fit(np.concatenate([S, S_next[-1:]]))
    X, Xn = std(S), std(S_next)
    n_s = X.shape[1]
    enc = DenseNet(config.layers(n_s, config.d_s), rng)
    dec = DenseNet(config.layers(n_s, config.d_s)[::-1], rng)
    opt_e, opt_d = AdamState.for_params(enc.params), AdamState.for_params(dec.params)
    log_ = TrainingLog()
    for epoch in range(config.epochs):
        total, count = 0.0, 0
        for k, idx in enumerate(_batches(X.shape[0], config.batch_size, rng)):
            loss, g_enc, g_dec = state_batch_loss(enc, dec, X[idx], Xn[idx],
                                                  config.batch_lambda, config.recon_weight)
            if not np.isfinite(loss):
                raise NonFiniteError(f"state feature loss non-finite at epoch {epoch} batch {k}",
                                     index=k)
            enc.apply_update(adam_step(g_enc, opt_e, config.lr))
            dec.apply_update(adam_step(g_dec, opt_d, config.lr))
            total += loss * idx.size
            count += idx.size
        log_.losses.append(total / count)
        log.debug("state epoch %d loss %.5g", epoch, log_.losses[-1])
    log_.seconds = time.perf_counter() - t0
    return NetworkFeatureMap(enc, std, False), NetworkDecoder(dec, std), log_


def train_obs_history_features(Z_s, O, H, config: DeepConfig = DeepConfig(), seed=0):
    """Train observation and history encoders against frozen state features.

    Returns ``(obs_map, hist_map, log)``.  With an empty history the history
    map is the constant feature and only the observation encoder is trained.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    O = np.asarray(O, dtype=float)
    H = np.asarray(H, dtype=float)
    std_o = Standardizer.fit(O)
    Xo = std_o(O)
    enc_o = DenseNet(config.layers(O.shape[1], config.d_o), rng)
    enc_h = std_h = Xh = None
    if H.shape[1] > 0:
        std_h = Standardizer.fit(H)
        Xh = std_h(H)
        enc_h = DenseNet(config.layers(H.shape[1], config.d_h, widths=(4,)), rng)
    opt_o = AdamState.for_params(enc_o.params)
    opt_h = AdamState.for_params(enc_h.params) if enc_h is not None else None
    log_ = TrainingLog()
    for epoch in range(config.epochs):
        total, count = 0.0, 0
        for k, idx in enumerate(_batches(O.shape[0], config.batch_size, rng)):
            loss, g_o, g_h = obs_batch_loss(enc_o, enc_h, Xo[idx],
                                            None if Xh is None else Xh[idx], Z_s[idx],
                                            config.batch_lambda, config.add_constant)
            if not np.isfinite(loss):
                raise NonFiniteError(
                    f"observation feature loss non-finite at epoch {epoch} batch {k}", index=k)
            enc_o.apply_update(adam_step(g_o, opt_o, config.lr))
            if enc_h is not None:
                enc_h.apply_update(adam_step(g_h, opt_h, config.lr))
            total += loss * idx.size
            count += idx.size
        log_.losses.append(total / count)
        log.debug("obs epoch %d loss %.5g", epoch, log_.losses[-1])
    log_.seconds = time.perf_counter() - t0
    obs_map = NetworkFeatureMap(enc_o, std_o, config.add_constant)
    hist_map = NetworkFeatureMap(enc_h, std_h, config.add_constant) if enc_h is not None else \
        ConstantFeatureMap(0)
    return obs_map, hist_map, log_


def train_deep_model(data, config: DeepConfig = DeepConfig(), seed=0) -> FeatureSpaceModel:
    """Train all encoders, then refit every operator on the full data set."""
    t0 = time.perf_counter()
    ss = np.random.SeedSequence(seed).spawn(2)
    state_map, decoder, log_s = train_state_features(
        data.dyn_states, data.dyn_next, config, seed=int(ss[0].generate_state(1)[0]))
    Z_s, Z_next = state_map(data.dyn_states), state_map(data.dyn_next)
    Z_obs_s = state_map(data.obs_states)
    obs_map, hist_map, log_o = train_obs_history_features(
        Z_obs_s, data.obs_obs, data.obs_hist, config, seed=int(ss[1].generate_state(1)[0]))

    Z_o, Z_h = obs_map(data.obs_obs), hist_map(data.obs_hist)
    select = config.select_inverse_lambda and np.unique(data.obs_traj).size >= 2
    ops = fit_operators(Z_s, Z_next, Z_obs_s, Z_o, Z_h, config.lam, select_inverse=select,
                        groups=data.obs_traj, seed=seed)
    background = data.state_mean if data.state_mean is not None else data.dyn_states.mean(axis=0)
    meta = {
        "seed": seed,
        "config": config.to_dict(),
        "dims": {"d_s": state_map.dim, "d_o": obs_map.dim, "d_h": hist_map.dim},
        "lambda": ops.lambdas,
        "history_length": data.spec.history_length if data.spec is not None else None,
        "state_losses": log_s.losses, "obs_losses": log_o.losses,
        "state_range": [data.state_min, data.state_max],
        "train_seconds": time.perf_counter() - t0,
    }
    model = FeatureSpaceModel(state_map, obs_map, hist_map, decoder, ops.C_dyn, ops.C_inv, ops.B,
                              ops.R, ops.Q, config.lam, np.asarray(background, dtype=float),
                              "deep", meta)
    return model.validate()
