"""Small neural-network building blocks over the autodiff engine.

Parameters live in flat ``dict[str, Value]`` containers so they serialize
directly through the checkpoint format and optimizers can walk them without
any module hierarchy.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


def init_linear(rng: np.random.Generator, n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray]:
    """He-scaled weight matrix and zero bias."""
    w = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out))
    return w, np.zeros(n_out)


def init_mlp(rng: np.random.Generator, sizes: list[int], prefix: str) -> dict[str, np.ndarray]:
    """Weights for a chain of linear layers: sizes [in, h1, ..., out]."""
    params: dict[str, np.ndarray] = {}
    for i in range(len(sizes) - 1):
        w, b = init_linear(rng, sizes[i], sizes[i + 1])
        params[f"{prefix}.w{i}"] = w
        params[f"{prefix}.b{i}"] = b
    return params


def as_parameters(arrays: dict[str, np.ndarray]) -> dict[str, ad.Value]:
    return {k: ad.parameter(np.asarray(v, dtype=np.float64)) for k, v in arrays.items()}


def as_arrays(params: dict[str, ad.Value]) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in params.items()}


def linear(x: ad.Value, w: ad.Value, b: ad.Value) -> ad.Value:
    """x (B,in) @ w (in,out) + b (out,), bias added via a rank-1 product."""
    out = ad.matmul(x, w)
    ones = ad.constant(np.ones((x.shape[0], 1)))
    return out + ad.matmul(ones, b.reshape((1, b.size)))


def mlp_forward(
    params: dict[str, ad.Value],
    prefix: str,
    n_layers: int,
    x: ad.Value,
    hidden_relu: bool = True,
    final_relu: bool = False,
) -> ad.Value:
    """Apply the chain created by init_mlp; ReLU between layers, linear out.

    ``final_relu`` additionally rectifies the last layer, for stacks whose
    every unit is specified as activated.
    """
    h = x
    for i in range(n_layers):
        h = linear(h, params[f"{prefix}.w{i}"], params[f"{prefix}.b{i}"])
        if (hidden_relu and i < n_layers - 1) or (final_relu and i == n_layers - 1):
            h = ad.relu(h)
    return h


def mlp_forward_np(
    arrays: dict[str, np.ndarray],
    prefix: str,
    n_layers: int,
    x: np.ndarray,
    hidden_relu: bool = True,
    final_relu: bool = False,
) -> np.ndarray:
    """Inference-only twin of mlp_forward over plain arrays; no graph is built."""
    h = np.asarray(x, dtype=np.float64)
    for i in range(n_layers):
        h = h @ arrays[f"{prefix}.w{i}"] + arrays[f"{prefix}.b{i}"]
        if (hidden_relu and i < n_layers - 1) or (final_relu and i == n_layers - 1):
            h = np.maximum(h, 0.0)
    return h


class Adam:
    """Standard Adam over a dict of parameter Values.

    State arrays are keyed by parameter name, so the optimizer itself is
    checkpointable and a resumed run continues bit-identically.
    """

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, ad.Value]) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / b1t
            v_hat = self.v[name] / b2t
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self, params: dict[str, ad.Value]) -> None:
        for p in params.values():
            p.grad = None
