"""Dense networks with hand-written reverse mode, and Adam.

Parameters live in flat ``dict[str, ndarray]`` so every trainable piece of
the policy (MLP layers, fusion weights) shares one optimizer code path.
Weights are stored ``(out, in)`` and applied as ``x @ W.T + b``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch


def silu(x):
    return x / (1.0 + np.exp(-x))


def silu_grad(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


def identity(x):
    return x


def identity_grad(x):
    return np.ones_like(x)


ACTIVATIONS = {"silu": (silu, silu_grad), "identity": (identity, identity_grad)}


def init_mlp(sizes, rng: np.random.Generator, prefix: str = "mlp", zero_last: bool = False) -> dict:
    params = {}
    n = len(sizes) - 1
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        scale = np.sqrt(2.0 / fan_in) if i < n - 1 else np.sqrt(1.0 / fan_in)
        W = rng.standard_normal((fan_out, fan_in)) * scale
        if zero_last and i == n - 1:
            W[:] = 0.0
        params[f"{prefix}.W{i}"] = W
        params[f"{prefix}.b{i}"] = np.zeros(fan_out)
    return params


def n_layers(params, prefix="mlp") -> int:
    return sum(1 for k in params if k.startswith(prefix + ".W"))


def mlp_forward(params, x, prefix="mlp", hidden="silu", output="identity"):
    """Return ``(y, cache)`` for a batch ``x`` of shape (B, in)."""
    x = np.asarray(x, dtype=float)
    L = n_layers(params, prefix)
    if x.shape[-1] != params[f"{prefix}.W0"].shape[1]:
        raise DimensionMismatch(
            f"input width {x.shape[-1]} != layer width {params[f'{prefix}.W0'].shape[1]}")
    inputs, pre = [], []
    h = x
    for i in range(L):
        inputs.append(h)
        z = h @ params[f"{prefix}.W{i}"].T + params[f"{prefix}.b{i}"]
        pre.append(z)
        act = ACTIVATIONS[hidden if i < L - 1 else output][0]
        h = act(z)
    return h, {"inputs": inputs, "pre": pre, "prefix": prefix, "hidden": hidden, "output": output}


def mlp_backward(params, cache, grad_out):
    """Reverse pass. Returns ``(param_grads, grad_input)``."""
    prefix = cache["prefix"]
    L = len(cache["pre"])
    grads = {}
    g = np.asarray(grad_out, dtype=float)
    for i in reversed(range(L)):
        dact = ACTIVATIONS[cache["hidden"] if i < L - 1 else cache["output"]][1]
        gz = g * dact(cache["pre"][i])
        grads[f"{prefix}.W{i}"] = gz.T @ cache["inputs"][i]
        grads[f"{prefix}.b{i}"] = gz.sum(axis=0)
        g = gz @ params[f"{prefix}.W{i}"]
    return grads, g


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(params: dict, grads: dict, state: AdamState, frozen=()):
    """In-place Adam step with bias correction on every key present in ``grads``."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name in sorted(grads):
        if name in frozen:
            continue
        g = grads[name]
        if g.shape != params[name].shape:
            raise DimensionMismatch(f"gradient for {name} has shape {g.shape}, "
                                    f"parameter has {params[name].shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.lr != 0.0:
            params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
