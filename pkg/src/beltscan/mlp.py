"""Small dense regression network, plain numpy.

ReLU hidden layers, linear output, mean-squared-error loss, minibatch
stochastic gradient descent with momentum.  Everything is float64 and
seeded, so two runs with the same seed produce identical weights and the
JSON round trip is bit-exact.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, InvalidInputError


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 256
    learning_rate: float = 1e-3
    momentum: float = 0.9


@dataclass
class TrainReport:
    """Per-epoch training/validation losses plus the final validation MSE."""

    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)

    @property
    def final_val_mse(self):
        return self.val_loss[-1] if self.val_loss else float("nan")


class MLP:
    """Fully connected net: sizes = [n_in, hidden..., n_out]."""

    def __init__(self, sizes, seed=0):
        if len(sizes) < 2:
            raise InvalidInputError("need at least input and output sizes")
        self.sizes = [int(s) for s in sizes]
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
            # He initialization for the ReLU stack
            scale = np.sqrt(2.0 / n_in)
            self.weights.append(rng.normal(0.0, scale, size=(n_in, n_out)))
            self.biases.append(np.zeros(n_out))

    def forward(self, x):
        """Return the output and the per-layer activations for backprop."""
        acts = [x]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = acts[-1] @ w + b
            if i < len(self.weights) - 1:
                z = np.maximum(z, 0.0)
            acts.append(z)
        return acts[-1], acts

    def predict(self, x, dtype=np.float64):
        """Forward pass only; `dtype` sets the compute precision.

        float32 halves latency on wide pixel batches and stays
        deterministic; weights are stored in float64 regardless.
        """
        x = np.asarray(x, dtype=dtype)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        a = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = a @ w.astype(dtype) + b.astype(dtype)
            if i < last:
                np.maximum(a, 0.0, out=a)
        a = a.astype(np.float64)
        return a[0] if squeeze else a

    def _step(self, x, y, lr, momentum, velocity):
        out, acts = self.forward(x)
        n = x.shape[0]
        delta = 2.0 * (out - y) / (n * y.shape[1])
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.weights)
        for i in range(len(self.weights) - 1, -1, -1):
            grads_w[i] = acts[i].T @ delta
            grads_b[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i].T) * (acts[i] > 0.0)
        for i in range(len(self.weights)):
            vw, vb = velocity[i]
            vw *= momentum
            vw -= lr * grads_w[i]
            vb *= momentum
            vb -= lr * grads_b[i]
            self.weights[i] += vw
            self.biases[i] += vb
        return float(np.mean((out - y) ** 2))

    def fit(self, x_train, y_train, x_val=None, y_val=None,
            config=None, seed=0):
        """Train in place; returns a TrainReport with loss histories."""
        cfg = config or TrainConfig()
        x_train = np.asarray(x_train, dtype=np.float64)
        y_train = np.asarray(y_train, dtype=np.float64)
        rng = np.random.default_rng(seed)
        velocity = [(np.zeros_like(w), np.zeros_like(b))
                    for w, b in zip(self.weights, self.biases)]
        report = TrainReport()
        n = x_train.shape[0]
        for _ in range(cfg.epochs):
            order = rng.permutation(n)
            losses = []
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                losses.append(self._step(x_train[idx], y_train[idx],
                                         cfg.learning_rate, cfg.momentum,
                                         velocity))
            epoch_loss = float(np.mean(losses))
            if not np.isfinite(epoch_loss):
                raise DivergenceError(
                    "training loss is not finite; try a lower learning rate")
            report.train_loss.append(epoch_loss)
            if x_val is not None:
                pred = self.predict(x_val)
                report.val_loss.append(float(np.mean((pred - y_val) ** 2)))
        return report

    def to_dict(self):
        return {
            "sizes": self.sizes,
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d):
        net = cls(d["sizes"], seed=0)
        for i, (n_in, n_out) in enumerate(zip(net.sizes[:-1], net.sizes[1:])):
            net.weights[i] = np.array(d["weights"][i],
                                      dtype=np.float64).reshape(n_in, n_out)
            net.biases[i] = np.array(d["biases"][i], dtype=np.float64)
        return net


def split_indices(n, fractions=(0.6, 0.2, 0.2), seed=0):
    """Deterministic shuffled train/val/test index split."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise InvalidInputError("split fractions must sum to 1")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return (order[:n_train], order[n_train:n_train + n_val],
            order[n_train + n_val:])
