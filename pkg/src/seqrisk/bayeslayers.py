"""Deterministic and mean-field Gaussian variational layers.

Each learnable weight is either a plain Tensor (deterministic) or a
GaussianPosterior holding a per-element mean and an unconstrained scale
parameter (sigma = softplus(rho)). Sampling uses the reparameterization
w = mu + sigma * eps so gradients flow to both parameters, and the KL
divergence to a zero-mean isotropic Gaussian prior is closed form.

Within one forward pass a stochastic layer is realized exactly once and
the realization is shared by every use in that pass (callers realize via
``realize``/``Layer.realize`` and reuse the returned tensors).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import Tensor

LOG_TWO_PI_E = math.log(2.0 * math.pi * math.e)


@dataclass(frozen=True)
class IsotropicPrior:
    """Zero-mean Gaussian weight prior with a shared standard deviation."""

    std: float

    SEARCH_RANGE = (0.135, 1.0)

    def __post_init__(self):
        if not self.std > 0.0:
            raise ValueError(f"prior std must be positive, got {self.std}")


@dataclass(frozen=True)
class StochasticityConfig:
    """Which parameter groups carry weight posteriors instead of point values."""

    embeddings: bool = False
    rnn: bool = False
    hidden: bool = False
    output: bool = False
    bias_uncertainty: bool = False

    VARIANTS = {
        "deterministic": (False, False, False, False),
        "bayesian-embeddings": (True, False, False, False),
        "bayesian-output": (False, False, False, True),
        "bayesian-hidden-output": (False, False, True, True),
        "bayesian-rnn-hidden-output": (False, True, True, True),
        "fully-bayesian": (True, True, True, True),
    }

    @classmethod
    def from_variant(cls, name, bias_uncertainty=False):
        try:
            emb, rnn, hidden, output = cls.VARIANTS[name]
        except KeyError:
            raise ValueError(
                f"unknown variant {name!r}; choose from {sorted(cls.VARIANTS)}"
            ) from None
        return cls(emb, rnn, hidden, output, bias_uncertainty)

    def variant_name(self):
        flags = (self.embeddings, self.rnn, self.hidden, self.output)
        for name, pattern in self.VARIANTS.items():
            if pattern == flags:
                return name
        return "custom"

    @property
    def any_stochastic(self):
        return self.embeddings or self.rnn or self.hidden or self.output


class GaussianPosterior:
    """Factorized Gaussian q(w) with learnable mean and scale per element."""

    def __init__(self, mean, rho):
        mean = mean if isinstance(mean, Tensor) else Tensor(mean, requires_grad=True)
        rho = rho if isinstance(rho, Tensor) else Tensor(rho, requires_grad=True)
        if mean.shape != rho.shape:
            raise nc.ShapeError(
                f"mean/rho shape mismatch: {mean.shape} vs {rho.shape}"
            )
        self.mean = mean
        self.rho = rho

    @property
    def shape(self):
        return self.mean.shape

    def std_graph(self):
        """sigma as a differentiable tensor (softplus keeps it positive)."""
        return nc.softplus(self.rho)

    def std_values(self):
        """sigma as a plain array, outside any autodiff graph."""
        x = self.rho.data
        return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    @classmethod
    def initialized(cls, shape, prior, rng, mean_scale=None):
        """Glorot-uniform means; posterior starts at one tenth of the prior width."""
        mean = _glorot_uniform(shape, rng, mean_scale)
        rho = np.full(shape, _softplus_inverse(0.1 * prior.std))
        return cls(Tensor(mean, requires_grad=True), Tensor(rho, requires_grad=True))


def _glorot_uniform(shape, rng, scale=None):
    if scale is None:
        fan_in = shape[0] if len(shape) > 1 else shape[0]
        fan_out = shape[-1] if len(shape) > 1 else shape[0]
        scale = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-scale, scale, size=shape)


def _softplus_inverse(y):
    return float(np.log(np.expm1(y)))


def sample_weights(post, rng):
    """One reparameterized draw w = mu + softplus(rho) * eps, eps ~ N(0, I)."""
    eps = Tensor(rng.standard_normal(post.shape))
    return nc.add(post.mean, nc.mul(post.std_graph(), eps))


def realize(param, rng=None, mode="sample"):
    """Turn a parameter into a concrete weight tensor for this pass."""
    if isinstance(param, Tensor):
        return param
    if mode == "mean":
        return param.mean
    if mode == "sample":
        if rng is None:
            raise ValueError("sample mode needs an rng")
        return sample_weights(param, rng)
    raise ValueError(f"unknown realization mode {mode!r}")


def kl_to_prior(post, prior):
    """Closed-form KL( q(w) || N(0, prior.std^2 I) ), summed over elements.

    Per element: ln(sp/s) + (s^2 + mu^2) / (2 sp^2) - 1/2. Written in
    terms of the ratio r = s/sp so the value is exactly 0 when mu = 0
    and s equals the prior std bit-for-bit.
    """
    mu = post.mean
    r = nc.div(post.std_graph(), prior.std)
    inv2sp2 = 1.0 / (2.0 * prior.std * prior.std)
    elem = nc.add(
        nc.sub(nc.mul(nc.add(nc.mul(r, r), -1.0), 0.5), nc.log(r)),
        nc.mul(nc.mul(mu, mu), inv2sp2),
    )
    return nc.reduce_sum(elem)


def embedding_lookup(table, ids, mode="sample", rng=None):
    """Gather embedding rows; in sample mode one realization covers all ids."""
    realized = realize(table, rng, mode)
    return nc.index_rows(realized, ids)


def dense_forward(x, weight, bias, mode="sample", rng=None):
    """x @ W + b with W, b realized once if stochastic."""
    w = realize(weight, rng, mode)
    b = realize(bias, rng, mode)
    return nc.add(nc.matmul(x, w), b)


def lstm_step(x, h_prev, c_prev, wx, wh, b):
    """One LSTM step with realized gate weights.

    Gate layout along the 4H axis is [input, forget, cell, output].
    """
    hidden = h_prev.shape[1]
    z = nc.add(nc.add(nc.matmul(x, wx), nc.matmul(h_prev, wh)), b)
    i = nc.sigmoid(nc.slice_cols(z, 0, hidden))
    f = nc.sigmoid(nc.slice_cols(z, hidden, 2 * hidden))
    g = nc.tanh(nc.slice_cols(z, 2 * hidden, 3 * hidden))
    o = nc.sigmoid(nc.slice_cols(z, 3 * hidden, 4 * hidden))
    c = nc.add(nc.mul(f, c_prev), nc.mul(i, g))
    h = nc.mul(o, nc.tanh(c))
    return h, c


def embedding_entropy(table, row):
    """Differential entropy of one row's Gaussian embedding distribution."""
    if not isinstance(table, GaussianPosterior):
        raise TypeError("embedding_entropy needs a stochastic embedding table")
    v = table.shape[0]
    if not 0 <= row < v:
        raise IndexError(f"row {row} out of range for table with {v} rows")
    sigma = table.std_values()[row]
    d = sigma.size
    return 0.5 * d * LOG_TWO_PI_E + float(np.sum(np.log(sigma)))


class _ParamGroup:
    """Shared naming/collection behavior for layers."""

    def _entries(self):
        raise NotImplementedError

    def parameters(self):
        """name -> learnable Tensor (posterior params expand to .mu/.rho)."""
        out = {}
        for name, param in self._entries():
            if isinstance(param, GaussianPosterior):
                out[f"{name}.mu"] = param.mean
                out[f"{name}.rho"] = param.rho
            else:
                out[name] = param
        return out

    def posteriors(self):
        return {n: p for n, p in self._entries() if isinstance(p, GaussianPosterior)}


def _make_param(shape, stochastic, prior, rng, mean_scale=None):
    if stochastic:
        return GaussianPosterior.initialized(shape, prior, rng, mean_scale)
    return Tensor(_glorot_uniform(shape, rng, mean_scale), requires_grad=True)


class EmbeddingLayer(_ParamGroup):
    def __init__(self, name, vocab_size, dim, stochastic, prior, rng):
        self.name = name
        self.vocab_size = vocab_size
        self.dim = dim
        self.table = _make_param((vocab_size, dim), stochastic, prior, rng)

    def realize(self, rng=None, mode="sample"):
        return realize(self.table, rng, mode)

    def _entries(self):
        return [(f"{self.name}.table", self.table)]


class DenseLayer(_ParamGroup):
    def __init__(self, name, in_dim, out_dim, stochastic, bias_uncertainty, prior, rng):
        self.name = name
        self.weight = _make_param((in_dim, out_dim), stochastic, prior, rng)
        bias_stochastic = stochastic and bias_uncertainty
        if bias_stochastic:
            self.bias = GaussianPosterior(
                Tensor(np.zeros(out_dim), requires_grad=True),
                Tensor(np.full(out_dim, _softplus_inverse(0.1 * prior.std)), requires_grad=True),
            )
        else:
            self.bias = Tensor(np.zeros(out_dim), requires_grad=True)

    def realize(self, rng=None, mode="sample"):
        return realize(self.weight, rng, mode), realize(self.bias, rng, mode)

    def _entries(self):
        return [(f"{self.name}.weight", self.weight), (f"{self.name}.bias", self.bias)]


class LSTMLayer(_ParamGroup):
    """Gate weights for one LSTM layer; stepping is done by lstm_step."""

    def __init__(self, name, in_dim, hidden_dim, stochastic, bias_uncertainty, prior, rng):
        self.name = name
        self.hidden_dim = hidden_dim
        self.wx = _make_param((in_dim, 4 * hidden_dim), stochastic, prior, rng)
        self.wh = _make_param((hidden_dim, 4 * hidden_dim), stochastic, prior, rng)
        if stochastic and bias_uncertainty:
            self.bias = GaussianPosterior(
                Tensor(np.zeros(4 * hidden_dim), requires_grad=True),
                Tensor(
                    np.full(4 * hidden_dim, _softplus_inverse(0.1 * prior.std)),
                    requires_grad=True,
                ),
            )
        else:
            self.bias = Tensor(np.zeros(4 * hidden_dim), requires_grad=True)

    def realize(self, rng=None, mode="sample"):
        return (
            realize(self.wx, rng, mode),
            realize(self.wh, rng, mode),
            realize(self.bias, rng, mode),
        )

    def _entries(self):
        return [
            (f"{self.name}.wx", self.wx),
            (f"{self.name}.wh", self.wh),
            (f"{self.name}.bias", self.bias),
        ]
