"""Online orthogonalization: projecting a hidden layer during training.

A small dense ReLU network with sigmoid output is trained by minibatch SGD
with manual backpropagation on synthetic data in which a binary confounder
perfectly tracks the label on the training split but is independent of it on
the test split.  With correction enabled, the chosen hidden pre-activation
matrix H is replaced per batch by its projection onto the orthogonal
complement of span([1, protected rows]) before the ReLU; the backward pass
applies the same (symmetric, batch-constant) projector to the upstream
gradient.

At evaluation time the training-set regression of H on [1, protected] is
subtracted instead, which is the row-wise applicable form of the full
training-set projector.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidSpec, RankDeficient
from .evalmodel import evaluate_glm
from .glm import BERNOULLI, _sigmoid
from .linalg import build_projector, least_squares
from .synth import stream

logger = logging.getLogger(__name__)

# Label-flip rate of the signal channel; Bayes accuracy is 1 - DEFAULT_NOISE.
DEFAULT_NOISE = 0.15
CONFOUNDER_MAGNITUDE = 5.0


@dataclass
class ConfoundedDataset:
    """Synthetic tabular stand-in for a color-confounded image task."""

    features: np.ndarray
    protected: np.ndarray
    labels: np.ndarray
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray

    def rows(self, mask: np.ndarray):
        return self.features[mask], self.protected[mask], self.labels[mask]


def make_confounded_data(
    n_train: int,
    n_test: int,
    signal_dim: int = 8,
    noise: float = DEFAULT_NOISE,
    seed: int = 0,
) -> ConfoundedDataset:
    """Generate the confounded classification problem.

    The label is the quadrant sign of the first two (standard normal) signal
    columns, flipped with probability ``noise`` (so the signal-only Bayes
    accuracy is ``1 - noise``, 0.85 by default); remaining signal columns are
    pure noise.  This makes the label linearly neutral in the signal (no
    class mean shift) but nonlinearly decodable -- the tabular analogue of
    shape-versus-color structure.  The binary confounder equals the label on
    train/val rows and is an independent coin flip on test rows; it enters
    the feature matrix as a dominant-magnitude column, making it the
    preferred shortcut for an uncorrected model.
    """
    if n_train < 10 or n_test < 1:
        raise InvalidSpec("need n_train >= 10 and n_test >= 1")
    if signal_dim < 2 or not 0.0 <= noise < 0.5:
        raise InvalidSpec("signal_dim must be >= 2 and noise in [0, 0.5)")
    rng = stream(seed, 0xC0F)
    n = n_train + n_test
    signal = rng.standard_normal((n, signal_dim))
    quadrant = (signal[:, 0] * signal[:, 1] > 0.0).astype(np.float64)
    flips = (rng.random(n) < noise).astype(np.float64)
    labels = np.abs(quadrant - flips)
    confounder = labels.copy()
    confounder[n_train:] = (rng.random(n_test) < 0.5).astype(np.float64)
    features = np.column_stack([signal, CONFOUNDER_MAGNITUDE * confounder])
    n_val = max(1, n_train // 5)
    train_mask = np.zeros(n, dtype=bool)
    val_mask = np.zeros(n, dtype=bool)
    test_mask = np.zeros(n, dtype=bool)
    train_mask[: n_train - n_val] = True
    val_mask[n_train - n_val : n_train] = True
    test_mask[n_train:] = True
    return ConfoundedDataset(
        features=features,
        protected=confounder[:, None],
        labels=labels,
        train_mask=train_mask,
        val_mask=val_mask,
        test_mask=test_mask,
    )


@dataclass(frozen=True)
class MlpConfig:
    """Architecture and SGD settings; widths default to [input, 16, 8, 1]."""

    layer_widths: tuple | None = None
    learning_rate: float = 0.3
    batch_size: int = 128
    epochs: int = 60
    ortho_layer_index: int = 0
    seed: int = 0

    def widths(self, d_in: int) -> tuple:
        w = self.layer_widths or (d_in, 16, 8, 1)
        if w[0] != d_in:
            raise InvalidSpec(f"layer_widths[0]={w[0]} does not match inputs {d_in}")
        if w[-1] != 1:
            raise InvalidSpec("output layer must have width 1")
        if not 0 <= self.ortho_layer_index < len(w) - 2:
            raise InvalidSpec("ortho_layer_index must select a hidden layer")
        return tuple(int(v) for v in w)


def init_params(widths: tuple, rng: np.random.Generator) -> dict:
    weights, biases = [], []
    for a, b in zip(widths[:-1], widths[1:]):
        weights.append(rng.standard_normal((a, b)) * np.sqrt(2.0 / a))
        biases.append(np.zeros(b))
    return {"weights": weights, "biases": biases}


def _aug(protected: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(protected.shape[0]), protected])


def forward(
    params: dict,
    xb: np.ndarray,
    protected: np.ndarray | None = None,
    ortho_layer: int = 0,
    gamma_hat: np.ndarray | None = None,
):
    """Forward pass; returns (probabilities, cache for backprop).

    When ``protected`` is given, the pre-activation of hidden layer
    ``ortho_layer`` is orthogonalized: per batch through the exact projector,
    or, when ``gamma_hat`` (the training-set regression of H on
    [1, protected]) is supplied, by subtracting ``[1, protected] @ gamma_hat``.
    """
    weights, biases = params["weights"], params["biases"]
    n_layers = len(weights)
    cache = {"a": [xb], "mask": [], "proj": None}
    act = xb
    for layer in range(n_layers - 1):
        h = act @ weights[layer] + biases[layer]
        if layer == ortho_layer and protected is not None:
            xa = _aug(protected)
            if gamma_hat is not None:
                h = h - xa @ gamma_hat
            else:
                proj = build_projector(xa)
                h = proj.complement(h)
                cache["proj"] = proj
        mask = h > 0.0
        act = h * mask
        cache["mask"].append(mask)
        cache["a"].append(act)
    out = act @ weights[-1] + biases[-1]
    prob = _sigmoid(out[:, 0])
    cache["prob"] = prob
    return prob, cache


def backward(params: dict, cache: dict, yb: np.ndarray, ortho_layer: int = 0):
    """Mean binary cross-entropy gradients for all weights and biases."""
    weights = params["weights"]
    n_layers = len(weights)
    b = yb.shape[0]
    grads_w = [None] * n_layers
    grads_b = [None] * n_layers
    delta = ((cache["prob"] - yb) / b)[:, None]
    grads_w[-1] = cache["a"][-1].T @ delta
    grads_b[-1] = delta.sum(axis=0)
    upstream = delta @ weights[-1].T
    for layer in range(n_layers - 2, -1, -1):
        dh = upstream * cache["mask"][layer]
        if layer == ortho_layer and cache["proj"] is not None:
            dh = cache["proj"].complement(dh)
        grads_w[layer] = cache["a"][layer].T @ dh
        grads_b[layer] = dh.sum(axis=0)
        if layer > 0:
            upstream = dh @ weights[layer].T
    return grads_w, grads_b


def bce_loss(prob: np.ndarray, yb: np.ndarray) -> float:
    p = np.clip(prob, 1e-12, 1.0 - 1e-12)
    return float(-np.mean(yb * np.log(p) + (1.0 - yb) * np.log(1.0 - p)))


def _hidden_regression(params, x, protected, ortho_layer):
    """Training-set regression of the hidden pre-activation on [1, protected]."""
    act = x
    for layer in range(ortho_layer):
        h = act @ params["weights"][layer] + params["biases"][layer]
        act = np.maximum(h, 0.0)
    h = act @ params["weights"][ortho_layer] + params["biases"][ortho_layer]
    return least_squares(_aug(protected), h)


@dataclass
class TrainingResult:
    params: dict
    metrics: list = field(default_factory=list)
    gamma_hat: np.ndarray | None = None
    config: MlpConfig | None = None
    with_correction: bool = False
    skipped_batches: int = 0
    confounder_report: object = None

    def predict(self, features: np.ndarray, protected: np.ndarray | None = None):
        prot = protected if self.with_correction else None
        prob, _ = forward(
            self.params,
            features,
            protected=prot,
            ortho_layer=self.config.ortho_layer_index if self.config else 0,
            gamma_hat=self.gamma_hat if self.with_correction else None,
        )
        return prob


def train_mlp(
    data: ConfoundedDataset,
    cfg: MlpConfig | None = None,
    with_correction: bool = True,
) -> TrainingResult:
    """Minibatch SGD training with optional in-training orthogonalization.

    Metrics rows carry, per epoch and split, the accuracy and the constraint
    residual ``max |[1, X]^T H| / rows`` of the (possibly corrected) hidden
    pre-activation.  Batches whose protected submatrix is rank deficient
    (all-0 or all-1 confounder) skip the correction with a logged warning.
    Training always completes; a non-finite loss aborts with diagnostics.
    """
    cfg = cfg or MlpConfig()
    x_tr, prot_tr, y_tr = data.rows(data.train_mask)
    widths = cfg.widths(x_tr.shape[1])
    rng = stream(cfg.seed, 0x31A)
    params = init_params(widths, rng)
    ortho = cfg.ortho_layer_index

    n_tr = x_tr.shape[0]
    result = TrainingResult(
        params=params, config=cfg, with_correction=with_correction
    )
    for epoch in range(cfg.epochs):
        order = rng.permutation(n_tr)
        batch_residuals = []
        for start in range(0, n_tr, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = x_tr[idx], y_tr[idx]
            prot_b = None
            if with_correction:
                pb = prot_tr[idx]
                if np.ptp(pb[:, 0]) > 0:
                    prot_b = pb
                else:
                    result.skipped_batches += 1
                    logger.warning(
                        "epoch %d: batch protected column is constant; "
                        "skipping correction for this batch", epoch,
                    )
            try:
                prob, cache = forward(params, xb, prot_b, ortho)
            except RankDeficient:
                result.skipped_batches += 1
                prob, cache = forward(params, xb, None, ortho)
            loss = bce_loss(prob, yb)
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch}; last batch size {len(idx)}"
                )
            if prot_b is not None:
                h_c = cache["a"][ortho + 1]  # post-ReLU of corrected layer
                # orthogonality of the corrected pre-activation itself
                pre = cache["proj"].complement(
                    cache["a"][ortho] @ params["weights"][ortho]
                    + params["biases"][ortho]
                )
                batch_residuals.append(
                    float(np.max(np.abs(_aug(prot_b).T @ pre)) / len(idx))
                )
            grads_w, grads_b = backward(params, cache, yb, ortho)
            for layer in range(len(params["weights"])):
                params["weights"][layer] -= cfg.learning_rate * grads_w[layer]
                params["biases"][layer] -= cfg.learning_rate * grads_b[layer]

        gamma_hat = (
            _hidden_regression(params, x_tr, prot_tr, ortho)
            if with_correction
            else None
        )
        result.gamma_hat = gamma_hat
        epoch_residual = float(np.mean(batch_residuals)) if batch_residuals else None
        for split, mask in (
            ("train", data.train_mask),
            ("val", data.val_mask),
            ("test", data.test_mask),
        ):
            xs, ps, ys = data.rows(mask)
            prob = result.predict(xs, ps)
            acc = float(np.mean((prob > 0.5) == (ys > 0.5)))
            result.metrics.append(
                {
                    "epoch": epoch,
                    "split": split,
                    "accuracy": acc,
                    "loss": bce_loss(prob, ys),
                    "constraint_residual": epoch_residual,
                }
            )

    # Final check: does the confounder explain the test-split predictions?
    x_te, p_te, y_te = data.rows(data.test_mask)
    prob_te = result.predict(x_te, p_te)
    result.confounder_report = evaluate_glm(p_te, prob_te, BERNOULLI)
    return result


def accuracy_by_split(result: TrainingResult, epoch: int | None = None) -> dict:
    rows = [
        r
        for r in result.metrics
        if epoch is None or r["epoch"] == epoch
    ]
    last = {}
    for r in rows:
        last[r["split"]] = r["accuracy"]
    return last
