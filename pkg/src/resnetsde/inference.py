"""Weak training (kernel regression) and full training (GD/SGD/Adam).

Weak training evaluates the analytic prior kernel on the data and solves the
regularized least-squares system through a Cholesky factorization; with
one-hot targets the row-argmax of the posterior mean is the predicted class.

Full training runs the finite completed model: an input embedding, the
residual trunk, and a linear readout.  Gradients are taken with respect to
the standardized parameters (every scale enters through multiplication, not
through the initialization variance), which is the parametrization under
which the tangent-kernel correspondence holds.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .activations import Activation, require_smooth
from .kernels import KernelSpec, kernel_gram
from .rng import substream

__all__ = [
    "Dataset", "GramMatrix", "GramError", "TrainingDiverged", "make_one_hot",
    "build_gram", "cross_gram", "krr_predict", "classify", "accuracy",
    "krr_classify", "CompletedResNet", "train", "tune_learning_rate",
]


class GramError(np.linalg.LinAlgError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch


def make_one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


@dataclass(frozen=True)
class Dataset:
    """Inputs with one-hot targets; each target row has a single unit entry."""

    inputs: np.ndarray   # (N, Z)
    targets: np.ndarray  # (N, Y)
    split: str = "train"

    def __post_init__(self):
        inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        targets = np.atleast_2d(np.asarray(self.targets, dtype=float))
        if inputs.shape[0] != targets.shape[0]:
            raise ValueError("inputs and targets must have matching lengths")
        sums = targets.sum(axis=1)
        if not (np.allclose(sums, 1.0) and
                np.allclose(targets.max(axis=1), 1.0) and
                np.all((targets == 0) | (targets == 1))):
            raise ValueError("targets must be one-hot rows")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "targets", targets)

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.targets, axis=1)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, idx: np.ndarray, split: Optional[str] = None) -> "Dataset":
        return Dataset(self.inputs[idx], self.targets[idx], split or self.split)


@dataclass(frozen=True)
class GramMatrix:
    matrix: np.ndarray
    jitter: float


def build_gram(spec: KernelSpec, inputs: np.ndarray,
               jitter: Optional[float] = None) -> GramMatrix:
    """Kernel matrix over the training inputs; jitter defaults to 1/N."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    n = inputs.shape[0]
    if jitter is None:
        jitter = 1.0 / n
    return GramMatrix(kernel_gram(spec, inputs), jitter)


def cross_gram(spec: KernelSpec, train_inputs: np.ndarray,
               test_inputs: np.ndarray) -> np.ndarray:
    """(N_train, N_test) kernel values."""
    return kernel_gram(spec, train_inputs, test_inputs)


def krr_predict(gram: GramMatrix, train_targets: np.ndarray,
                cross: np.ndarray) -> np.ndarray:
    """Posterior-mean predictions cross^T (G + jitter I)^{-1} Y via Cholesky."""
    g = gram.matrix + gram.jitter * np.eye(gram.matrix.shape[0])
    try:
        factor = cho_factor(g, lower=True)
    except np.linalg.LinAlgError:
        min_eig = np.linalg.eigvalsh(g).min()
        raise GramError(
            f"Cholesky failed after jitter {gram.jitter:g}; "
            f"minimum eigenvalue {min_eig:.3e}") from None
    weights = cho_solve(factor, np.asarray(train_targets, dtype=float))
    residual = np.linalg.norm(g @ weights - train_targets)
    if residual > 1e-8 * max(np.linalg.norm(train_targets), 1e-300):
        raise GramError(f"solve residual too large: {residual:.3e}")
    return cross.T @ weights


def classify(predictions: np.ndarray) -> np.ndarray:
    # np.argmax takes the lowest index on ties
    return np.argmax(predictions, axis=1)


def accuracy(predicted_labels: np.ndarray, true_labels: np.ndarray) -> float:
    return float(np.mean(np.asarray(predicted_labels) == np.asarray(true_labels)))


def krr_classify(spec: KernelSpec, train: Dataset, test: Dataset,
                 jitter: Optional[float] = None) -> dict:
    """End-to-end kernel classification; returns predictions and test accuracy."""
    gram = build_gram(spec, train.inputs, jitter)
    cross = cross_gram(spec, train.inputs, test.inputs)
    preds = krr_predict(gram, train.targets, cross)
    labels = classify(preds)
    return {"predictions": preds, "labels": labels,
            "accuracy": accuracy(labels, test.labels), "jitter": gram.jitter}


# ---------------------------------------------------------------------------
# full training of the finite completed model
# ---------------------------------------------------------------------------

class CompletedResNet:
    """Finite-width completed model: embedding, residual trunk, readout.

    Parameters are standardized draws; the scales

        input  sqrt(sigma_z2),            trunk weights sigma_w sqrt(dt / D),
        output sqrt(sigma_y2 / D),        trunk biases  sigma_b sqrt(dt)

    multiply them at use time.  ``loss_and_grads`` returns the mean squared
    error over all target entries and its exact gradients.
    """

    def __init__(self, width: int, depth: int, n_inputs: int, n_outputs: int,
                 phi: Activation, sigma_w2: float = 1.0, sigma_b2: float = 0.01,
                 sigma_z2: Optional[float] = None, sigma_y2: float = 1.0,
                 horizon: float = 1.0, seed: int = 0):
        require_smooth(phi, "CompletedResNet")
        self.width = width
        self.depth = depth
        self.n_inputs = n_inputs
        self.n_outputs = n_outputs
        self.phi = phi
        self.sigma_w2 = sigma_w2
        self.sigma_b2 = sigma_b2
        self.sigma_z2 = 1.0 / n_inputs if sigma_z2 is None else sigma_z2
        self.sigma_y2 = sigma_y2
        self.horizon = horizon
        dt = horizon / depth
        self.in_scale = np.sqrt(self.sigma_z2)
        self.w_scale = np.sqrt(sigma_w2 * dt / width)
        self.b_scale = np.sqrt(sigma_b2 * dt)
        self.out_scale = np.sqrt(sigma_y2 / width)
        rng = substream(seed, 0)
        self.params = {
            "eps_in": rng.standard_normal((width, n_inputs)),
            "eps_w": rng.standard_normal((depth, width, width)),
            "eps_b": rng.standard_normal((depth, width)),
            "eps_out": rng.standard_normal((n_outputs, width)),
        }

    def kernel_spec(self) -> KernelSpec:
        """The analytic tangent kernel this model approaches as D = L grow."""
        return KernelSpec("completed_ntk", phi1=self.phi.d1_at_zero,
                          sigma_w2=self.sigma_w2, sigma_b2=self.sigma_b2,
                          horizon=self.horizon, sigma_z2=self.sigma_z2,
                          sigma_y2=self.sigma_y2)

    def forward(self, inputs: np.ndarray, keep_cache: bool = False):
        p = self.params
        x = inputs @ (self.in_scale * p["eps_in"]).T      # (N, D)
        states = [x]
        pres = []
        for t in range(self.depth):
            pre = x @ (self.w_scale * p["eps_w"][t]).T + self.b_scale * p["eps_b"][t]
            x = x + self.phi(pre)
            if keep_cache:
                pres.append(pre)
                states.append(x)
        out = x @ (self.out_scale * p["eps_out"]).T        # (N, Y)
        if keep_cache:
            return out, (states, pres)
        return out

    def loss(self, inputs: np.ndarray, targets: np.ndarray) -> float:
        out = self.forward(inputs)
        return float(np.mean((out - targets) ** 2))

    def loss_and_grads(self, inputs: np.ndarray, targets: np.ndarray):
        p = self.params
        out, (states, pres) = self.forward(inputs, keep_cache=True)
        err = out - targets
        loss = float(np.mean(err ** 2))
        scale = 2.0 / err.size
        d_out = scale * err                                # (N, Y)
        grads = {"eps_out": self.out_scale * (d_out.T @ states[-1])}
        dx = d_out @ (self.out_scale * p["eps_out"])       # (N, D)
        g_w = np.empty_like(p["eps_w"])
        g_b = np.empty_like(p["eps_b"])
        for t in range(self.depth - 1, -1, -1):
            d_pre = dx * self.phi.d1(pres[t])              # (N, D)
            g_w[t] = self.w_scale * (d_pre.T @ states[t])
            g_b[t] = self.b_scale * d_pre.sum(axis=0)
            dx = dx + d_pre @ (self.w_scale * p["eps_w"][t])
        grads["eps_w"] = g_w
        grads["eps_b"] = g_b
        grads["eps_in"] = self.in_scale * (dx.T @ inputs)
        return loss, grads

    def predict_labels(self, inputs: np.ndarray) -> np.ndarray:
        return classify(self.forward(inputs))


def _sgd_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train(model: CompletedResNet, data: Dataset, optimizer: str, lr: float,
          epochs: int, batch_size: Optional[int] = None, seed: int = 0,
          test_data: Optional[Dataset] = None,
          adam_beta1: float = 0.9, adam_beta2: float = 0.999,
          adam_eps: float = 1e-8) -> list[dict]:
    """Train in place; returns per-epoch records (train_loss, test_accuracy).

    ``gd`` uses the full batch every step; ``sgd`` shuffles mini-batches of
    ``batch_size``; ``adam`` is mini-batch with the usual bias-corrected
    moment estimates.  A non-finite loss aborts with the epoch index.
    """
    if optimizer not in ("gd", "sgd", "adam"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    n = len(data)
    if optimizer == "gd":
        batch_size = n
    elif batch_size is None:
        raise ValueError("batch_size is required for sgd/adam")
    rng = substream(seed, 1)
    slot_m = {k: np.zeros_like(v) for k, v in model.params.items()}
    slot_v = {k: np.zeros_like(v) for k, v in model.params.items()}
    step = 0
    history = []
    for epoch in range(epochs):
        epoch_loss = 0.0
        n_batches = 0
        for idx in _sgd_batches(n, batch_size, rng):
            loss, grads = model.loss_and_grads(data.inputs[idx], data.targets[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch)
            epoch_loss += loss
            n_batches += 1
            step += 1
            if optimizer == "adam":
                for key, grad in grads.items():
                    slot_m[key] = adam_beta1 * slot_m[key] + (1 - adam_beta1) * grad
                    slot_v[key] = adam_beta2 * slot_v[key] + (1 - adam_beta2) * grad ** 2
                    m_hat = slot_m[key] / (1 - adam_beta1 ** step)
                    v_hat = slot_v[key] / (1 - adam_beta2 ** step)
                    model.params[key] -= lr * m_hat / (np.sqrt(v_hat) + adam_eps)
            else:
                for key, grad in grads.items():
                    model.params[key] -= lr * grad
        record = {"epoch": epoch, "train_loss": epoch_loss / max(n_batches, 1)}
        if test_data is not None:
            record["test_accuracy"] = accuracy(model.predict_labels(test_data.inputs),
                                               test_data.labels)
        history.append(record)
    return history


def tune_learning_rate(model_factory: Callable[[], CompletedResNet],
                       data: Dataset, rates, optimizer: str = "gd",
                       epochs: int = 10, batch_size: Optional[int] = None,
                       seed: int = 0) -> float:
    """Short-horizon sweep; returns the rate with the lowest final train loss."""
    best_rate, best_loss = None, np.inf
    for lr in rates:
        model = model_factory()
        try:
            hist = train(model, data, optimizer, lr, epochs,
                         batch_size=batch_size, seed=seed)
        except TrainingDiverged:
            continue
        loss = hist[-1]["train_loss"]
        if np.isfinite(loss) and loss < best_loss:
            best_rate, best_loss = lr, loss
    if best_rate is None:
        raise TrainingDiverged(0)
    return best_rate
