"""Small softmax classifiers over flat parameter vectors.

Two families share one code path: multinomial logistic regression
(``hidden == 0``) and a one-hidden-layer network with a tanh
(default) or ReLU hidden layer. Parameters live in a
single flat float64 vector so a training run can be stored as a
``(epochs, num_params)`` array of snapshots.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class Architecture:
    dim: int
    num_classes: int
    hidden: int = 32
    activation: str = "tanh"

    def __post_init__(self):
        if self.dim < 1 or self.num_classes < 2 or self.hidden < 0 or self.activation not in _ACT:
            raise ValueError(f"invalid architecture {self}")

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        if self.hidden == 0:
            return [(self.dim, self.num_classes), (self.num_classes,)]
        return [
            (self.dim, self.hidden),
            (self.hidden,),
            (self.hidden, self.num_classes),
            (self.num_classes,),
        ]

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes)

    def unpack(self, theta: np.ndarray) -> list[np.ndarray]:
        if theta.shape != (self.num_params,):
            raise ValueError(f"expected {self.num_params} parameters, got {theta.shape}")
        out, pos = [], 0
        for shape in self.shapes:
            size = int(np.prod(shape))
            out.append(theta[pos : pos + size].reshape(shape))
            pos += size
        return out

    def init(self, rng: np.random.Generator) -> np.ndarray:
        """Glorot-uniform weights, zero biases."""
        parts = []
        for shape in self.shapes:
            if len(shape) == 2:
                limit = np.sqrt(6.0 / (shape[0] + shape[1]))
                parts.append(rng.uniform(-limit, limit, size=shape).ravel())
            else:
                parts.append(np.zeros(shape))
        return np.concatenate(parts)

    def to_dict(self) -> dict:
        return asdict(self)


_ACT = {
    "tanh": (np.tanh, lambda a: 1.0 - a * a),
    "relu": (lambda u: np.maximum(u, 0.0), lambda a: (a > 0).astype(np.float64)),
}


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def logits(arch: Architecture, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != arch.dim:
        raise ValueError(f"expected features of dimension {arch.dim}, got shape {X.shape}")
    if arch.hidden == 0:
        W, b = arch.unpack(theta)
        return X @ W + b
    W1, b1, W2, b2 = arch.unpack(theta)
    act, _ = _ACT[arch.activation]
    return act(X @ W1 + b1) @ W2 + b2


def predict(arch: Architecture, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum: ties go to the lowest class index
    return np.argmax(logits(arch, theta, X), axis=1)


def cross_entropy(arch: Architecture, theta: np.ndarray, X: np.ndarray, T: np.ndarray) -> float:
    """Mean cross-entropy against target distributions ``T`` (one row per sample)."""
    z = logits(arch, theta, X)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-(T * logp).sum(axis=1).mean())


def loss_and_grad(arch: Architecture, theta: np.ndarray, X: np.ndarray, T: np.ndarray):
    """Mean cross-entropy and its gradient with respect to ``theta``."""
    n = X.shape[0]
    if arch.hidden == 0:
        W, b = arch.unpack(theta)
        z = X @ W + b
        P = softmax(z)
        loss = -(T * np.log(np.clip(P, 1e-300, None))).sum() / n
        dz = (P - T) / n
        return loss, np.concatenate([(X.T @ dz).ravel(), dz.sum(axis=0)])
    W1, b1, W2, b2 = arch.unpack(theta)
    act, dact = _ACT[arch.activation]
    a = act(X @ W1 + b1)
    z = a @ W2 + b2
    P = softmax(z)
    loss = -(T * np.log(np.clip(P, 1e-300, None))).sum() / n
    dz = (P - T) / n
    da = (dz @ W2.T) * dact(a)
    grad = np.concatenate(
        [(X.T @ da).ravel(), da.sum(axis=0), (a.T @ dz).ravel(), dz.sum(axis=0)]
    )
    return loss, grad


def input_gradient(arch: Architecture, theta: np.ndarray, X: np.ndarray, classes) -> np.ndarray:
    """Gradient of ``-log p(class | x)`` with respect to each input row.

    ``classes`` may be an int or one label per row of ``X``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    classes = np.broadcast_to(np.asarray(classes, dtype=np.int64), (X.shape[0],))
    if (classes < 0).any() or (classes >= arch.num_classes).any():
        raise ValueError(f"class index out of range for {arch.num_classes} classes")
    T = np.zeros((X.shape[0], arch.num_classes))
    T[np.arange(X.shape[0]), classes] = 1.0
    if arch.hidden == 0:
        W, b = arch.unpack(theta)
        dz = softmax(X @ W + b) - T
        return dz @ W.T
    W1, b1, W2, b2 = arch.unpack(theta)
    act, dact = _ACT[arch.activation]
    a = act(X @ W1 + b1)
    dz = softmax(a @ W2 + b2) - T
    return ((dz @ W2.T) * dact(a)) @ W1.T
