"""Client objectives with exact gradients and stochastic gradient oracles.

Three families are provided. A four-dimensional two-client construction
whose heterogeneity makes naive averaging drift, a quadratic with per-client
centers used as a closed-form oracle in tests, and multinomial logistic
regression over per-client datasets.
"""

from __future__ import annotations

import numpy as np

from .core import gaussians_from


class Objective:
    """Oracle interface for the per-client losses f_i and their average f."""

    dim: int
    n_clients: int

    def eval_local(self, client: int, x: np.ndarray) -> float:
        raise NotImplementedError

    def grad_local(self, client: int, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def stoch_grad_local(self, client: int, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """One stochastic gradient draw; consumes a fixed amount of the stream."""
        raise NotImplementedError

    def eval_global(self, x: np.ndarray) -> float:
        return float(np.mean([self.eval_local(i, x) for i in range(self.n_clients)]))

    def grad_global(self, x: np.ndarray) -> np.ndarray:
        total = np.zeros(self.dim)
        for i in range(self.n_clients):
            total += self.grad_local(i, x)
        return total / self.n_clients

    def test_metric(self, x: np.ndarray) -> float:
        """Held-out metric; NaN when the objective has no test set."""
        return float("nan")

    def _check_x(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError(f"expected parameter vector of shape ({self.dim},), got {x.shape}")
        return x

    def _check_client(self, client: int) -> None:
        if not 0 <= client < self.n_clients:
            raise ValueError(f"client index {client} out of range [0, {self.n_clients})")


class SyntheticHard(Objective):
    """Two-client nonsmooth construction on R^4.

    Both clients share three curved coordinates; the fourth is linear with
    opposite slopes (+kappa for client 0, -kappa for client 1), so the global
    objective is flat there while local steps pull hard in opposite
    directions. Coordinate 3 carries a one-sided quadratic [x]_+^2 and all
    gradient noise.
    """

    dim = 4
    n_clients = 2

    def __init__(self, h: float = 16.0, kappa: float = 16.0, sigma: float = 1.0,
                 c: float = 1.0, mu_pl: float = 2.0):
        if h <= 0 or mu_pl <= 0:
            raise ValueError("h and mu_pl must be > 0.")
        if sigma < 0 or kappa < 0:
            raise ValueError("sigma and kappa must be >= 0.")
        self.h = h
        self.kappa = kappa
        self.sigma = sigma
        self.c = c
        self.mu_pl = mu_pl
        self._x2_star = np.sqrt(mu_pl) * c / np.sqrt(h)

    def eval_local(self, client: int, x: np.ndarray) -> float:
        self._check_client(client)
        x = self._check_x(x)
        relu3 = max(x[2], 0.0)
        value = (
            0.5 * self.mu_pl * (x[0] - self.c) ** 2
            + 0.5 * self.h * (x[1] - self._x2_star) ** 2
            + 0.125 * self.h * (x[2] ** 2 + relu3 ** 2)
        )
        sign = 1.0 if client == 0 else -1.0
        return float(value + sign * self.kappa * x[3])

    def grad_local(self, client: int, x: np.ndarray) -> np.ndarray:
        self._check_client(client)
        x = self._check_x(x)
        g = np.empty(4)
        g[0] = self.mu_pl * (x[0] - self.c)
        g[1] = self.h * (x[1] - self._x2_star)
        # The one-sided square is differentiable at 0 with derivative 0, so
        # the strict inequality handles the kink.
        g[2] = 0.25 * self.h * x[2]
        if x[2] > 0:
            g[2] += 0.25 * self.h * x[2]
        g[3] = self.kappa if client == 0 else -self.kappa
        return g

    def stoch_grad_local(self, client: int, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        g = self.grad_local(client, x)
        g[2] += gaussians_from(rng, 1, self.sigma)[0]
        return g


class Quadratic(Objective):
    """f_i(x) = 0.5 * ||x - b_i||^2 with isotropic gradient noise."""

    def __init__(self, centers: np.ndarray, sigma: float = 0.0):
        centers = np.atleast_2d(np.asarray(centers, dtype=float))
        if centers.ndim != 2:
            raise ValueError("centers must be an (n_clients, dim) array.")
        if sigma < 0:
            raise ValueError("sigma must be >= 0.")
        self.centers = centers
        self.sigma = sigma
        self.n_clients = centers.shape[0]
        self.dim = centers.shape[1]

    def eval_local(self, client: int, x: np.ndarray) -> float:
        self._check_client(client)
        x = self._check_x(x)
        diff = x - self.centers[client]
        return float(0.5 * diff @ diff)

    def grad_local(self, client: int, x: np.ndarray) -> np.ndarray:
        self._check_client(client)
        x = self._check_x(x)
        return x - self.centers[client]

    def stoch_grad_local(self, client: int, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return self.grad_local(client, x) + gaussians_from(rng, self.dim, self.sigma)


class Logistic(Objective):
    """Multinomial softmax regression over per-client sample sets.

    Parameters are a (num_classes, num_features + 1) weight matrix stored
    flat; the trailing column is a bias fed by a constant 1 feature. The
    optional l2 penalty applies to weights only, never the bias. Stochastic
    gradients average `minibatch` uniformly drawn local samples and include
    the full penalty term.
    """

    def __init__(self, shards: list[tuple[np.ndarray, np.ndarray]], num_classes: int,
                 l2: float = 0.0, minibatch: int = 1,
                 test_set: tuple[np.ndarray, np.ndarray] | None = None):
        if not shards:
            raise ValueError("at least one client shard is required.")
        if l2 < 0:
            raise ValueError("l2 must be >= 0.")
        if minibatch < 1:
            raise ValueError("minibatch must be >= 1.")
        num_features = shards[0][0].shape[1]
        self._features = []
        self._labels = []
        for idx, (feats, labels) in enumerate(shards):
            if len(labels) == 0:
                raise ValueError(f"client {idx} has an empty dataset.")
            if feats.shape[1] != num_features:
                raise ValueError(f"client {idx} has {feats.shape[1]} features, expected {num_features}.")
            self._features.append(np.hstack([feats, np.ones((feats.shape[0], 1))]))
            self._labels.append(np.asarray(labels, dtype=int))
        self.num_classes = num_classes
        self.num_features = num_features
        self.l2 = l2
        self.minibatch = minibatch
        self.n_clients = len(shards)
        self.dim = num_classes * (num_features + 1)
        if test_set is not None:
            feats, labels = test_set
            self._test = (np.hstack([feats, np.ones((feats.shape[0], 1))]),
                          np.asarray(labels, dtype=int))
        else:
            self._test = None

    def _weights(self, x: np.ndarray) -> np.ndarray:
        return self._check_x(x).reshape(self.num_classes, self.num_features + 1)

    @staticmethod
    def _log_softmax(logits: np.ndarray) -> np.ndarray:
        shifted = logits - logits.max(axis=1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def _penalty(self, w: np.ndarray) -> float:
        if self.l2 == 0:
            return 0.0
        return 0.5 * self.l2 * float(np.sum(w[:, :-1] ** 2))

    def _penalty_grad(self, w: np.ndarray) -> np.ndarray:
        g = np.zeros_like(w)
        if self.l2:
            g[:, :-1] = self.l2 * w[:, :-1]
        return g

    def _loss_and_grad(self, w: np.ndarray, feats: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
        logp = self._log_softmax(feats @ w.T)
        n = len(labels)
        loss = -float(logp[np.arange(n), labels].mean())
        delta = np.exp(logp)
        delta[np.arange(n), labels] -= 1.0
        grad = delta.T @ feats / n
        return loss, grad

    def eval_local(self, client: int, x: np.ndarray) -> float:
        self._check_client(client)
        w = self._weights(x)
        loss, _ = self._loss_and_grad(w, self._features[client], self._labels[client])
        return loss + self._penalty(w)

    def grad_local(self, client: int, x: np.ndarray) -> np.ndarray:
        self._check_client(client)
        w = self._weights(x)
        _, grad = self._loss_and_grad(w, self._features[client], self._labels[client])
        return (grad + self._penalty_grad(w)).ravel()

    def stoch_grad_local(self, client: int, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        self._check_client(client)
        w = self._weights(x)
        n = len(self._labels[client])
        idx = np.minimum((rng.random(self.minibatch) * n).astype(np.int64), n - 1)
        _, grad = self._loss_and_grad(w, self._features[client][idx], self._labels[client][idx])
        return (grad + self._penalty_grad(w)).ravel()

    def test_metric(self, x: np.ndarray) -> float:
        if self._test is None:
            return float("nan")
        feats, labels = self._test
        predicted = np.argmax(feats @ self._weights(x).T, axis=1)
        return float(np.mean(predicted == labels))
