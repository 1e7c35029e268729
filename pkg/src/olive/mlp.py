"""One-hidden-layer ReLU network with softmax cross-entropy and manual backprop.

Parameters live in one flat vector laid out as ``W1 (in x hidden), b1,
W2 (hidden x out), b2`` so the same vector is the FL global model and the
unit of sparsification.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TinyMlp:
    n_in: int
    n_hidden: int
    n_out: int
    dropout: float = 0.0

    @property
    def size(self):
        return self.n_in * self.n_hidden + self.n_hidden + self.n_hidden * self.n_out + self.n_out

    def unflatten(self, theta):
        i, h, o = self.n_in, self.n_hidden, self.n_out
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.size,):
            raise ValueError(f"expected {self.size} parameters, got {theta.shape}")
        a = i * h
        W1 = theta[:a].reshape(i, h)
        b1 = theta[a : a + h]
        W2 = theta[a + h : a + h + h * o].reshape(h, o)
        b2 = theta[a + h + h * o :]
        return W1, b1, W2, b2

    def init_params(self, rng):
        """He-normal weights, zero biases."""
        W1 = rng.normal(0.0, np.sqrt(2.0 / self.n_in), (self.n_in, self.n_hidden))
        W2 = rng.normal(0.0, np.sqrt(2.0 / self.n_hidden), (self.n_hidden, self.n_out))
        parts = [W1.ravel(), np.zeros(self.n_hidden), W2.ravel(), np.zeros(self.n_out)]
        return np.concatenate(parts).astype(np.float32)

    def logits(self, theta, X):
        W1, b1, W2, b2 = self.unflatten(theta)
        h = np.maximum(np.asarray(X, dtype=np.float64) @ W1 + b1, 0.0)
        return h @ W2 + b2

    def predict_proba(self, theta, X):
        return softmax(self.logits(theta, X))

    def predict(self, theta, X):
        return np.argmax(self.logits(theta, X), axis=1)

    def accuracy(self, theta, X, y):
        if len(y) == 0:
            return float("nan")
        return float(np.mean(self.predict(theta, X) == np.asarray(y)))

    def loss_and_grad(self, theta, X, y, rng=None):
        """Mean cross-entropy and its gradient (flat, float64).

        ``y`` holds integer labels or a row-stochastic target matrix. With
        ``rng`` given and ``dropout > 0`` an inverted-dropout mask is applied
        to the hidden layer.
        """
        W1, b1, W2, b2 = self.unflatten(theta)
        X = np.asarray(X, dtype=np.float64)
        n = len(X)
        z1 = X @ W1 + b1
        h = np.maximum(z1, 0.0)
        keep = None
        if rng is not None and self.dropout > 0:
            keep = (rng.random(h.shape) >= self.dropout) / (1.0 - self.dropout)
            h = h * keep
        p = softmax(h @ W2 + b2)
        target = _targets(y, self.n_out)
        loss = -np.sum(target * np.log(p + 1e-12)) / n
        dz2 = (p - target) / n
        dW2 = h.T @ dz2
        db2 = dz2.sum(axis=0)
        dh = dz2 @ W2.T
        if keep is not None:
            dh = dh * keep
        dz1 = dh * (z1 > 0)
        dW1 = X.T @ dz1
        db1 = dz1.sum(axis=0)
        return loss, np.concatenate([dW1.ravel(), db1, dW2.ravel(), db2])

    def fit(self, theta, X, y, lr, epochs, batch_size=None, rng=None):
        """Plain minibatch SGD; full batch when ``batch_size`` is None."""
        theta = np.asarray(theta, dtype=np.float64).copy()
        n = len(X)
        bs = n if batch_size is None else batch_size
        for _ in range(epochs):
            order = np.arange(n) if rng is None or bs >= n else rng.permutation(n)
            for s in range(0, n, bs):
                sel = order[s : s + bs]
                _, g = self.loss_and_grad(theta, X[sel], _take(y, sel), rng)
                theta -= lr * g
        return theta


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _targets(y, n_out):
    y = np.asarray(y)
    if y.ndim == 2:
        return y.astype(np.float64)
    return np.eye(n_out)[y]


def _take(y, sel):
    return np.asarray(y)[sel]
