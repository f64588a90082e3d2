"""Plain-numpy MLPs with hand-written reverse mode.

Activation derivatives are computed from recorded forward values; the tape
holds exactly what the backward pass needs and nothing else.  The final
linear layer feeds a Gaussian head: the first half of its outputs is the
mean, the second half passes through softplus and is floored/capped to keep
downstream log-densities finite.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ContractError

VAR_FLOOR = 1e-6
VAR_CAP = 1e6

ACTIVATIONS = ("tanh", "identity", "softplus", "relu")


def _softplus(x):
    return np.logaddexp(0.0, x)


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str


@dataclass(frozen=True)
class GaussianHead:
    dim: int
    var_floor: float = VAR_FLOOR
    var_cap: float = VAR_CAP


@dataclass
class Mlp:
    layers: list
    head: GaussianHead

    @property
    def input_dim(self):
        return self.layers[0].weight.shape[1]


@dataclass
class GradTape:
    """Per-call record: input, post-activation values, raw head outputs."""

    x: np.ndarray
    post: list
    raw: np.ndarray
    squeeze: bool


def init_mlp(sizes, activations, rng):
    """He-style init: W ~ N(0, 2 / fan_in), biases zero.

    sizes runs input -> hidden... -> final linear output; the final size must
    be even, half mean and half raw variance.
    """
    if len(activations) != len(sizes) - 2:
        raise ContractError("need one activation per hidden layer")
    for a in activations:
        if a not in ACTIVATIONS:
            raise ContractError(f"unknown activation {a!r}")
    if sizes[-1] % 2 != 0:
        raise ContractError("final layer width must be even (mean and variance halves)")
    layers = []
    acts = list(activations) + ["identity"]
    for n_in, n_out, act in zip(sizes[:-1], sizes[1:], acts):
        w = rng.standard_normal((n_out, n_in)) * np.sqrt(2.0 / n_in)
        layers.append(Layer(weight=w, bias=np.zeros(n_out), activation=act))
    return Mlp(layers=layers, head=GaussianHead(dim=sizes[-1] // 2))


def forward(net, x):
    """Returns (mean, var, tape); accepts a single vector or a batch."""
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    post = []
    for layer in net.layers[:-1]:
        z = h @ layer.weight.T + layer.bias
        if layer.activation == "tanh":
            h = np.tanh(z)
        elif layer.activation == "softplus":
            h = _softplus(z)
        elif layer.activation == "relu":
            h = np.maximum(z, 0.0)
        else:
            h = z
        post.append(h)
    last = net.layers[-1]
    raw = h @ last.weight.T + last.bias
    d = net.head.dim
    mean = raw[:, :d]
    var = np.minimum(_softplus(raw[:, d:]) + net.head.var_floor, net.head.var_cap)
    tape = GradTape(x=x[None, :] if squeeze else x, post=post, raw=raw, squeeze=squeeze)
    if squeeze:
        return mean[0], var[0], tape
    return mean, var, tape


def backward(net, tape, dmean, dvar):
    """Reverse sweep for upstream gradients on (mean, var).

    Returns (flat parameter gradient, gradient with respect to the input).
    Parameter layout matches param_vector: per layer, weight row-major then
    bias.
    """
    dmean = np.atleast_2d(np.asarray(dmean, dtype=float))
    dvar = np.atleast_2d(np.asarray(dvar, dtype=float))
    d = net.head.dim
    raw_var = tape.raw[:, d:]
    capped = _softplus(raw_var) + net.head.var_floor >= net.head.var_cap
    draw = np.concatenate([dmean, dvar * expit(raw_var) * ~capped], axis=1)

    grads = [None] * len(net.layers)
    upstream = draw
    for li in range(len(net.layers) - 1, -1, -1):
        inp = tape.post[li - 1] if li > 0 else tape.x
        layer = net.layers[li]
        gw = upstream.T @ inp
        gb = upstream.sum(axis=0)
        grads[li] = (gw, gb)
        upstream = upstream @ layer.weight
        if li > 0:
            prev = net.layers[li - 1]
            a = tape.post[li - 1]
            if prev.activation == "tanh":
                upstream = upstream * (1.0 - a * a)
            elif prev.activation == "softplus":
                # a = softplus(z) => sigmoid(z) = 1 - exp(-a)
                upstream = upstream * (1.0 - np.exp(-a))
            elif prev.activation == "relu":
                upstream = upstream * (a > 0.0)
    flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
    dx = upstream[0] if tape.squeeze else upstream
    return flat, dx


def param_vector(net):
    return np.concatenate(
        [np.concatenate([l.weight.ravel(), l.bias]) for l in net.layers]
    )


def num_params(net):
    return sum(l.weight.size + l.bias.size for l in net.layers)


def set_param_vector(net, vec):
    """New net with the same topology and the given flat parameters."""
    vec = np.asarray(vec, dtype=float)
    if vec.size != num_params(net):
        raise ContractError("parameter vector length mismatch")
    layers = []
    pos = 0
    for l in net.layers:
        nw = l.weight.size
        w = vec[pos : pos + nw].reshape(l.weight.shape).copy()
        pos += nw
        b = vec[pos : pos + l.bias.size].copy()
        pos += l.bias.size
        layers.append(Layer(weight=w, bias=b, activation=l.activation))
    return Mlp(layers=layers, head=net.head)


def reparam_sample(mean, var, rng):
    """Location-scale draw; the noise is returned for fixed-noise replay."""
    eps = rng.standard_normal(np.shape(mean))
    return mean + np.sqrt(var) * eps, eps
