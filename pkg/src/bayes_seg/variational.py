"""Stochastic convolution layers.

Two weight posteriors are provided:

* mean-field Gaussian sampled with the reparameterization trick
  (``ReparamConv2d``), and
* multiplicative normalizing flows (``MnfConv2d``): Gaussian weights whose
  output-channel means are scaled by an auxiliary vector ``z`` pushed through a
  RealNVP flow, with a learned auxiliary inverse model giving a tractable bound
  on the KL term.

All layers share one calling convention, ``layer(x, ctx)``, where ``ctx`` is a
:class:`ForwardContext` carrying the noise source and collecting KL terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .tensor import Tensor

LOG_2PI = math.log(2.0 * math.pi)


class StateError(RuntimeError):
    """An operation needed a cached sample that does not exist."""


class FlowNumericError(ArithmeticError):
    """A flow step produced a non-finite scale."""


def inv_softplus(y: float) -> float:
    return float(y + np.log(-np.expm1(-y)))


@dataclass
class ForwardContext:
    """Per-call state for one forward pass.

    ``mode`` is ``"sample"`` (draw weights from ``rng``) or ``"mean"`` (use the
    posterior means; MNF layers push the mean of ``z0`` through their flow). KL contributions of sampled layers are
    appended to ``kl_terms`` when ``collect_kl`` is set.
    """

    mode: str = "sample"
    rng: np.random.Generator | None = None
    collect_kl: bool = True
    kl_terms: list = field(default_factory=list)

    def normal(self, shape) -> np.ndarray:
        if self.rng is None:
            raise StateError("sampling forward pass needs an rng")
        return self.rng.standard_normal(shape)


@dataclass(frozen=True)
class PriorSpec:
    kind: str = "standard_normal"

    def __post_init__(self):
        if self.kind != "standard_normal":
            raise ValueError(f"unsupported prior {self.kind!r}; only 'standard_normal' is implemented")


def _he_init(shape, rng) -> np.ndarray:
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else 1
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


class GaussianWeightPosterior:
    """Fully factorized Gaussian over one weight block: ``sigma = softplus(rho)``."""

    def __init__(self, mu, rho, prior: PriorSpec | None = None):
        self.mu = Tensor(mu, requires_grad=True)
        self.rho = Tensor(rho, requires_grad=True)
        if self.mu.shape != self.rho.shape:
            raise T.ShapeError(f"mu shape {self.mu.shape} != rho shape {self.rho.shape}")
        self.prior = prior or PriorSpec()

    @classmethod
    def init(cls, shape, rng, sigma0: float = 1e-3, he: bool = True):
        mu = _he_init(shape, rng) if he else np.zeros(shape)
        return cls(mu, np.full(shape, inv_softplus(sigma0)))

    @property
    def shape(self):
        return self.mu.shape

    def sigma(self) -> Tensor:
        return T.softplus(self.rho)

    def parameters(self) -> dict:
        return {"mu": self.mu, "rho": self.rho}


def sample_reparam(posterior: GaussianWeightPosterior, rng=None, eps=None) -> Tensor:
    """``omega = mu + softplus(rho) * eps`` with ``eps ~ N(0, 1)``."""
    if eps is None:
        eps = rng.standard_normal(posterior.shape)
    return posterior.mu + posterior.sigma() * Tensor(eps)


def gaussian_kl(mu, sigma) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, 1)) summed over all entries."""
    sigma = T.as_tensor(sigma)
    terms = mu * mu + sigma * sigma - 1.0 - 2.0 * T.log(sigma)
    return 0.5 * T.tsum(terms)


def kl_gaussian(posterior: GaussianWeightPosterior) -> Tensor:
    return gaussian_kl(posterior.mu, posterior.sigma())


def gaussian_log_density(x, mu, sigma) -> Tensor:
    """Sum of elementwise ``log N(x; mu, sigma^2)``."""
    sigma = T.as_tensor(sigma)
    r = (x - mu) / sigma
    n = T.as_tensor(x).size
    return -0.5 * T.tsum(r * r) - T.tsum(T.log(sigma)) - 0.5 * LOG_2PI * n


# ----------------------------------------------------------------------- flows

class MLP:
    """One tanh hidden layer, linear output, acting on a vector."""

    def __init__(self, in_dim, hidden, out_dim, rng, out_std=0.0, out_bias=0.0):
        self.w1 = Tensor(rng.standard_normal((hidden, in_dim)) / math.sqrt(max(in_dim, 1)), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = Tensor(rng.standard_normal((out_dim, hidden)) * out_std, requires_grad=True)
        self.b2 = Tensor(np.full(out_dim, float(out_bias)), requires_grad=True)

    def __call__(self, x) -> Tensor:
        h = T.tanh(T.matmul(self.w1, x) + self.b1)
        return T.matmul(self.w2, h) + self.b2

    def parameters(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


class RealNvpFlow:
    """Stack of masked affine coupling steps on a ``dim``-vector.

    Step ``l`` keeps the coordinates where ``mask_l == 1`` and maps the rest as
    ``z * exp(s(m*z)) + t(m*z)``. Masks alternate between the first and second
    half of the coordinates. With ``out_std=0`` the scale and translate nets
    output zero and the flow is the identity.
    """

    def __init__(self, dim, rng, num_steps=2, hidden=16, out_std=0.0):
        self.dim = dim
        self.masks = []
        self.scale_nets = []
        self.translate_nets = []
        for step in range(num_steps):
            m = np.zeros(dim)
            if step % 2 == 0:
                m[: dim // 2] = 1.0
            else:
                m[dim // 2:] = 1.0
            self.masks.append(m)
            self.scale_nets.append(MLP(dim, hidden, dim, rng, out_std))
            self.translate_nets.append(MLP(dim, hidden, dim, rng, out_std))

    @property
    def num_steps(self):
        return len(self.masks)

    def _st(self, step, kept):
        s = self.scale_nets[step](kept)
        if not np.all(np.isfinite(s.data)):
            raise FlowNumericError(f"flow step {step}: non-finite scale output")
        return s, self.translate_nets[step](kept)

    def parameters(self) -> dict:
        out = {}
        for i, (sn, tn) in enumerate(zip(self.scale_nets, self.translate_nets)):
            out.update({f"step{i}.scale.{k}": v for k, v in sn.parameters().items()})
            out.update({f"step{i}.translate.{k}": v for k, v in tn.parameters().items()})
        return out


def flow_forward(flow: RealNvpFlow, z0) -> tuple[Tensor, Tensor]:
    """Push ``z0`` through every step; returns ``(z_L, sum of log|det J|)``."""
    z = T.as_tensor(z0)
    if z.shape != (flow.dim,):
        raise T.ShapeError(f"flow expects a vector of length {flow.dim}, got shape {z.shape}")
    log_det = Tensor(0.0)
    for step, m in enumerate(flow.masks):
        free = 1.0 - m
        kept = z * m
        s, t = flow._st(step, kept)
        z = kept + (z * T.exp(s) + t) * free
        log_det = log_det + T.tsum(s * free)
    return z, log_det


def flow_inverse(flow: RealNvpFlow, zl) -> tuple[Tensor, Tensor]:
    """Exact inverse of :func:`flow_forward`; log-det is that of the inverse map."""
    z = T.as_tensor(zl)
    if z.shape != (flow.dim,):
        raise T.ShapeError(f"flow expects a vector of length {flow.dim}, got shape {z.shape}")
    log_det = Tensor(0.0)
    for step in reversed(range(flow.num_steps)):
        m = flow.masks[step]
        free = 1.0 - m
        kept = z * m
        s, t = flow._st(step, kept)
        z = kept + ((z - t) * T.exp(-s)) * free
        log_det = log_det - T.tsum(s * free)
    return z, log_det


# ---------------------------------------------------------------------- layers

class Conv2d:
    """Deterministic convolution (He-initialized weights, zero bias)."""

    stochastic = False

    def __init__(self, cin, cout, k, rng, stride=1, padding=None):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = Tensor(_he_init((cout, cin, k, k), rng), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x, ctx: ForwardContext) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def parameters(self) -> dict:
        return {"weight": self.weight, "bias": self.bias}


class ReparamConv2d:
    """Convolution with mean-field Gaussian weights and biases."""

    stochastic = True

    def __init__(self, cin, cout, k, rng, stride=1, padding=None, sigma0=1e-3):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = GaussianWeightPosterior.init((cout, cin, k, k), rng, sigma0)
        self.bias = GaussianWeightPosterior.init((cout,), rng, sigma0, he=False)

    def sample(self, rng=None, eps_w=None, eps_b=None):
        return sample_reparam(self.weight, rng, eps_w), sample_reparam(self.bias, rng, eps_b)

    def kl(self) -> Tensor:
        return kl_gaussian(self.weight) + kl_gaussian(self.bias)

    def __call__(self, x, ctx: ForwardContext) -> Tensor:
        if ctx.mode == "mean":
            w, b = self.weight.mu, self.bias.mu
        else:
            w, b = self.sample(ctx.rng)
            if ctx.collect_kl:
                ctx.kl_terms.append(self.kl())
        return T.conv2d(x, w, b, self.stride, self.padding)

    def parameters(self) -> dict:
        return {
            "weight.mu": self.weight.mu, "weight.rho": self.weight.rho,
            "bias.mu": self.bias.mu, "bias.rho": self.bias.rho,
        }


class MnfSample(NamedTuple):
    weight: Tensor
    bias: Tensor
    z: Tensor
    log_q_z: Tensor


class MnfConv2d:
    """Convolution whose weight posterior is a multiplicative normalizing flow.

    ``z`` has one entry per output channel; ``w ~ N(z_i * mu_ij, sigma_ij^2)``.
    The auxiliary model ``s(z | w)`` inverts ``aux_flow`` and scores the result
    under a Gaussian whose mean and scale come from two small networks fed with
    the per-output-channel mean of the sampled weights.
    """

    stochastic = True

    def __init__(self, cin, cout, k, rng, stride=1, padding=None, sigma0=1e-3,
                 flow_steps=2, flow_hidden=16, aux_hidden=16, z_sigma0=1e-3):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = GaussianWeightPosterior.init((cout, cin, k, k), rng, sigma0)
        self.bias = GaussianWeightPosterior.init((cout,), rng, sigma0, he=False)
        self.z0_mu = Tensor(np.ones(cout), requires_grad=True)
        self.z0_rho = Tensor(np.full(cout, inv_softplus(z_sigma0)), requires_grad=True)
        self.flow = RealNvpFlow(cout, rng, flow_steps, flow_hidden)
        self.aux_flow = RealNvpFlow(cout, rng, flow_steps, flow_hidden)
        self.aux_mu_net = MLP(cout, aux_hidden, cout, rng, out_bias=1.0)
        self.aux_sigma_net = MLP(cout, aux_hidden, cout, rng, out_bias=inv_softplus(z_sigma0))
        self._cache: MnfSample | None = None

    @property
    def z_dim(self):
        return self.z0_mu.shape[0]

    def sample(self, rng=None, eps_z=None, eps_w=None, eps_b=None) -> MnfSample:
        if eps_z is None:
            eps_z = rng.standard_normal(self.z_dim)
        if eps_w is None:
            eps_w = rng.standard_normal(self.weight.shape)
        if eps_b is None:
            eps_b = rng.standard_normal(self.bias.shape)
        z0_sigma = T.softplus(self.z0_rho)
        z0 = self.z0_mu + z0_sigma * Tensor(eps_z)
        z, log_det = flow_forward(self.flow, z0)
        log_q = gaussian_log_density(z0, self.z0_mu, z0_sigma) - log_det
        w = T.channel_scale(self.weight.mu, z) + self.weight.sigma() * Tensor(eps_w)
        b = sample_reparam(self.bias, eps=eps_b)
        return MnfSample(w, b, z, log_q)

    def kl(self, sample: MnfSample) -> Tensor:
        """Single-sample estimate of the negated KL lower bound (to be minimized)."""
        mean_w = T.channel_scale(self.weight.mu, sample.z)
        kl_w = gaussian_kl(mean_w, self.weight.sigma())
        kl_b = kl_gaussian(self.bias)
        u, log_det_inv = flow_inverse(self.aux_flow, sample.z)
        feats = T.mean(sample.weight, axis=(1, 2, 3))
        aux_mu = self.aux_mu_net(feats)
        aux_sigma = T.softplus(self.aux_sigma_net(feats))
        log_s = gaussian_log_density(u, aux_mu, aux_sigma) + log_det_inv
        return kl_w + kl_b + sample.log_q_z - log_s

    def mean_weight(self) -> Tensor:
        """Point estimate ``mu * f(z0_mu)``: the flow applied to the mean of ``z0``."""
        z, _ = flow_forward(self.flow, self.z0_mu)
        return T.channel_scale(self.weight.mu, z)

    def __call__(self, x, ctx: ForwardContext) -> Tensor:
        if ctx.mode == "mean":
            w, b = self.mean_weight(), self.bias.mu
        else:
            smp = self.sample(ctx.rng)
            w, b = smp.weight, smp.bias
            if ctx.collect_kl:
                ctx.kl_terms.append(self.kl(smp))
        return T.conv2d(x, w, b, self.stride, self.padding)

    def parameters(self) -> dict:
        out = {
            "weight.mu": self.weight.mu, "weight.rho": self.weight.rho,
            "bias.mu": self.bias.mu, "bias.rho": self.bias.rho,
            "z0.mu": self.z0_mu, "z0.rho": self.z0_rho,
        }
        for prefix, part in (("flow", self.flow), ("aux_flow", self.aux_flow),
                             ("aux_mu", self.aux_mu_net), ("aux_sigma", self.aux_sigma_net)):
            out.update({f"{prefix}.{k}": v for k, v in part.parameters().items()})
        return out


def mnf_sample_weights(layer: MnfConv2d, rng=None, **noise) -> Tensor:
    """Draw weights from ``layer`` and cache the sample for :func:`mnf_kl_contribution`."""
    layer._cache = layer.sample(rng, **noise)
    return layer._cache.weight


def mnf_kl_contribution(layer: MnfConv2d) -> Tensor:
    if layer._cache is None:
        raise StateError("mnf_kl_contribution needs a sample from mnf_sample_weights first")
    return layer.kl(layer._cache)
