"""Small feed-forward networks with hand-written backprop.

Everything runs in float64. Hidden blocks are Linear -> (BatchNorm) ->
LeakyReLU; the head is linear. Training-mode forward uses mini-batch
statistics and maintains running averages; inference uses the running
statistics, so prediction is deterministic row by row.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BN_EPS = 1e-5
LEAKY_SLOPE = 0.01


@dataclass
class MlpModel:
    layer_sizes: list[int]                  # [d_in, *hidden, d_out]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    gammas: list[np.ndarray]                # per hidden layer (empty if no BN)
    betas: list[np.ndarray]
    running_mean: list[np.ndarray]
    running_var: list[np.ndarray]
    use_batchnorm: bool = True
    bn_momentum: float = 0.9

    @property
    def n_hidden(self) -> int:
        return len(self.layer_sizes) - 2

    def parameters(self) -> list[np.ndarray]:
        """Trainable arrays in a fixed order (running stats excluded)."""
        return list(self.weights) + list(self.biases) + list(self.gammas) + list(self.betas)

    def copy(self) -> "MlpModel":
        return MlpModel(
            layer_sizes=list(self.layer_sizes),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            gammas=[g.copy() for g in self.gammas],
            betas=[b.copy() for b in self.betas],
            running_mean=[m.copy() for m in self.running_mean],
            running_var=[v.copy() for v in self.running_var],
            use_batchnorm=self.use_batchnorm,
            bn_momentum=self.bn_momentum,
        )


def init_mlp(layer_sizes: list[int], rng: np.random.Generator,
             use_batchnorm: bool = True) -> MlpModel:
    """He-style initialization; biases zero, BN affine at identity."""
    if len(layer_sizes) < 2:
        raise ValueError("need at least input and output sizes")
    weights, biases = [], []
    for d_in, d_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, d_out)))
        biases.append(np.zeros(d_out))
    n_hidden = len(layer_sizes) - 2
    hidden = layer_sizes[1:-1]
    return MlpModel(
        layer_sizes=list(layer_sizes),
        weights=weights,
        biases=biases,
        gammas=[np.ones(h) for h in hidden] if use_batchnorm else [np.ones(0)] * n_hidden,
        betas=[np.zeros(h) for h in hidden] if use_batchnorm else [np.zeros(0)] * n_hidden,
        running_mean=[np.zeros(h) for h in hidden],
        running_var=[np.ones(h) for h in hidden],
        use_batchnorm=use_batchnorm,
    )


def forward(model: MlpModel, X: np.ndarray, training: bool = False):
    """Return (output, cache); cache feeds backward()."""
    H = np.asarray(X, dtype=np.float64)
    if H.ndim != 2 or H.shape[1] != model.layer_sizes[0]:
        raise ValueError(f"input must be (n, {model.layer_sizes[0]})")
    cache = {"inputs": [], "pre_bn": [], "mu": [], "var": [], "xhat": [], "pre_act": []}
    for i in range(model.n_hidden):
        cache["inputs"].append(H)
        A = H @ model.weights[i] + model.biases[i]
        if model.use_batchnorm:
            if training:
                mu = A.mean(axis=0)
                var = A.var(axis=0)
                m = model.bn_momentum
                model.running_mean[i] = m * model.running_mean[i] + (1 - m) * mu
                model.running_var[i] = m * model.running_var[i] + (1 - m) * var
            else:
                mu = model.running_mean[i]
                var = model.running_var[i]
            xhat = (A - mu) / np.sqrt(var + BN_EPS)
            B = model.gammas[i] * xhat + model.betas[i]
        else:
            mu = var = xhat = None
            B = A
        cache["pre_bn"].append(A)
        cache["mu"].append(mu)
        cache["var"].append(var)
        cache["xhat"].append(xhat)
        cache["pre_act"].append(B)
        H = np.where(B > 0, B, LEAKY_SLOPE * B)
    cache["inputs"].append(H)
    out = H @ model.weights[-1] + model.biases[-1]
    cache["training"] = training
    return out, cache


def predict(model: MlpModel, X: np.ndarray) -> np.ndarray:
    out, _ = forward(model, X, training=False)
    return out


def backward(model: MlpModel, cache: dict, d_out: np.ndarray) -> dict:
    """Backpropagate d_out (gradient w.r.t. the head output) through the
    cached forward pass; returns gradients keyed like the parameter lists."""
    grads = {
        "weights": [None] * len(model.weights),
        "biases": [None] * len(model.biases),
        "gammas": [np.zeros_like(g) for g in model.gammas],
        "betas": [np.zeros_like(b) for b in model.betas],
    }
    H = cache["inputs"][-1]
    grads["weights"][-1] = H.T @ d_out
    grads["biases"][-1] = d_out.sum(axis=0)
    dH = d_out @ model.weights[-1].T
    for i in reversed(range(model.n_hidden)):
        B = cache["pre_act"][i]
        dB = dH * np.where(B > 0, 1.0, LEAKY_SLOPE)
        if model.use_batchnorm:
            A = cache["pre_bn"][i]
            if cache["training"]:
                mu, var, xhat = cache["mu"][i], cache["var"][i], cache["xhat"][i]
                m = A.shape[0]
                ivar = 1.0 / np.sqrt(var + BN_EPS)
                grads["gammas"][i] = (dB * xhat).sum(axis=0)
                grads["betas"][i] = dB.sum(axis=0)
                dxhat = dB * model.gammas[i]
                dvar = (dxhat * (A - mu)).sum(axis=0) * (-0.5) * ivar**3
                dmu = (dxhat * -ivar).sum(axis=0) + dvar * (-2.0 * (A - mu)).mean(axis=0)
                dA = dxhat * ivar + dvar * 2.0 * (A - mu) / m + dmu / m
            else:
                ivar = 1.0 / np.sqrt(model.running_var[i] + BN_EPS)
                xhat = (A - model.running_mean[i]) * ivar
                grads["gammas"][i] = (dB * xhat).sum(axis=0)
                grads["betas"][i] = dB.sum(axis=0)
                dA = dB * model.gammas[i] * ivar
        else:
            dA = dB
        Hprev = cache["inputs"][i]
        grads["weights"][i] = Hprev.T @ dA
        grads["biases"][i] = dA.sum(axis=0)
        dH = dA @ model.weights[i].T
    return grads


def grad_arrays(model: MlpModel, grads: dict) -> list[np.ndarray]:
    """Gradient list aligned with model.parameters()."""
    return list(grads["weights"]) + list(grads["biases"]) + list(grads["gammas"]) + list(grads["betas"])


# ---------------------------------------------------------------------------
# losses


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. logits."""
    n = logits.shape[0]
    p = softmax(logits)
    eps = 1e-300
    loss = -np.log(p[np.arange(n), labels] + eps).mean()
    d = p.copy()
    d[np.arange(n), labels] -= 1.0
    return float(loss), d / n


def mse(pred: np.ndarray, target: np.ndarray):
    """Mean over all entries of the squared error, and its gradient."""
    diff = pred - target
    loss = float((diff * diff).mean())
    return loss, 2.0 * diff / diff.size


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adaptive-moment optimizer over a model's parameter list."""

    def __init__(self, model: MlpModel, lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.model = model
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        params = model.parameters()
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: dict) -> None:
        self.t += 1
        params = self.model.parameters()
        garrs = grad_arrays(self.model, grads)
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, garrs, self.m, self.v):
            if p.size == 0:
                continue
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


# ---------------------------------------------------------------------------
# persistence


def save_model(model: MlpModel, path: str | Path) -> None:
    payload = {
        "layer_sizes": model.layer_sizes,
        "use_batchnorm": model.use_batchnorm,
        "bn_momentum": model.bn_momentum,
        "weights": [w.ravel().tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
        "gammas": [g.tolist() for g in model.gammas],
        "betas": [b.tolist() for b in model.betas],
        "running_mean": [m.tolist() for m in model.running_mean],
        "running_var": [v.tolist() for v in model.running_var],
    }
    Path(path).write_text(json.dumps(payload))


def load_model(path: str | Path) -> MlpModel:
    d = json.loads(Path(path).read_text())
    sizes = d["layer_sizes"]
    weights = [np.array(w, dtype=np.float64).reshape(di, do)
               for w, di, do in zip(d["weights"], sizes[:-1], sizes[1:])]
    return MlpModel(
        layer_sizes=sizes,
        weights=weights,
        biases=[np.array(b, dtype=np.float64) for b in d["biases"]],
        gammas=[np.array(g, dtype=np.float64) for g in d["gammas"]],
        betas=[np.array(b, dtype=np.float64) for b in d["betas"]],
        running_mean=[np.array(m, dtype=np.float64) for m in d["running_mean"]],
        running_var=[np.array(v, dtype=np.float64) for v in d["running_var"]],
        use_batchnorm=d["use_batchnorm"],
        bn_momentum=d["bn_momentum"],
    )
