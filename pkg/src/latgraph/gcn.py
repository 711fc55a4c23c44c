"""Two-layer graph convolutional classifier written against plain numpy.

Layer l computes ``P_l = (dA @ H_{l-1}) @ W_l + b_l``; hidden layers apply ReLU
and (during training) inverted dropout, the last layer emits logits. The
loss is the masked mean cross-entropy plus ``weight_decay / 2 * sum ||W||^2``.

Two update paths are provided: a diagonal adaptive rule (Adam) on raw
gradients, and Kronecker-factored natural-gradient directions
``(V + c I)^-1 grad (U + c I)^-1`` with ``c = ngd_epsilon^-1/2``, applied by
heavy-ball SGD by default. Adam's per-coordinate scaling largely cancels the
preconditioner, so it is available as ``outer_rule="adam"`` but not the default.
For preconditioning each bias is folded into its weight matrix as an extra
input row fed by a constant 1.

Parameters are handled as a flat list ``[W_1, b_1, W_2, b_2, ...]``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeError, ValidationError
from .graph import LatencyGraph, renormalize


@dataclass
class GcnConfig:
    hidden: int = 16
    dropout: float = 0.5
    lr: float = 0.01
    weight_decay: float = 5e-4
    momentum: float = 0.9          # Adam beta1
    beta2: float = 0.999
    adam_eps: float = 1e-8
    optimizer: str = "ngd"         # "adam" | "ngd"
    outer_rule: str = "sgd"        # rule that consumes NGD directions: "sgd" | "adam"
    ngd_lambda: float = 0.0
    ngd_epsilon: float = 100.0
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0

    def validate(self) -> None:
        if self.optimizer not in ("adam", "ngd"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if self.outer_rule not in ("adam", "sgd"):
            raise ValidationError(f"unknown outer rule {self.outer_rule!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must lie in [0, 1)")
        if self.hidden < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ValidationError("hidden >= 1, max_epochs >= 0 and patience >= 1 required")
        if self.ngd_epsilon <= 0 or self.ngd_lambda < 0:
            raise ValidationError("ngd_epsilon must be > 0 and ngd_lambda >= 0")


@dataclass
class GcnModel:
    weights: list[np.ndarray]
    biases: list[np.ndarray] | None = None
    dropout: float = 0.5

    def __post_init__(self):
        if self.biases is None:
            self.biases = [np.zeros(w.shape[1]) for w in self.weights]

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [w.shape for w in self.weights]

    @property
    def params(self) -> list[np.ndarray]:
        return [p for wb in zip(self.weights, self.biases) for p in wb]

    @params.setter
    def params(self, values: list[np.ndarray]) -> None:
        self.weights = list(values[0::2])
        self.biases = list(values[1::2])

    def copy(self) -> "GcnModel":
        return GcnModel([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.dropout)


def glorot_init(dims: list[int], rng: np.random.Generator) -> list[np.ndarray]:
    out = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        out.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
    return out


def init_model(n_features: int, n_classes: int, config: GcnConfig, rng=None) -> GcnModel:
    """Glorot-uniform hidden layers and a zero output layer.

    The zero output layer makes the initial prediction exactly uniform; with
    dense positive RTT features a Glorot output layer starts far from it.
    """
    rng = np.random.default_rng([config.seed, 0]) if rng is None else rng
    weights = glorot_init([n_features, config.hidden, n_classes], rng)
    weights[-1] = np.zeros_like(weights[-1])
    return GcnModel(weights, dropout=config.dropout)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]        # H_{l-1}, the layer inputs before aggregation
    aggregated: list[np.ndarray]    # dA @ H_{l-1}
    preact: list[np.ndarray]        # P_l
    masks: list[np.ndarray | None]  # inverted-dropout multipliers for hidden layers
    logits: np.ndarray
    probs: np.ndarray


def softmax_rows(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def forward(model: GcnModel, prop: np.ndarray, x: np.ndarray, dropout_active: bool = False,
            rng: np.random.Generator | None = None) -> ForwardCache:
    n = prop.shape[0]
    if prop.shape != (n, n) or x.shape[0] != n:
        raise ShapeError(f"propagation {prop.shape} and features {x.shape} disagree")
    h = np.asarray(x, dtype=float)
    inputs, aggregated, preact, masks = [], [], [], []
    last = len(model.weights) - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        if h.shape[1] != w.shape[0]:
            raise ShapeError(f"layer {l + 1}: input width {h.shape[1]} vs weight {w.shape}")
        inputs.append(h)
        agg = prop @ h
        p = agg @ w + b
        aggregated.append(agg)
        preact.append(p)
        if l == last:
            masks.append(None)
            break
        h = np.maximum(p, 0.0)
        mask = None
        if dropout_active and model.dropout > 0.0:
            keep = 1.0 - model.dropout
            mask = (rng.random(h.shape) < keep) / keep
            h = h * mask
        masks.append(mask)
    return ForwardCache(inputs, aggregated, preact, masks, preact[-1], softmax_rows(preact[-1]))


def _check_mask(labels, mask) -> tuple[np.ndarray, np.ndarray]:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValidationError("mask selects no vertices")
    labels = np.asarray(labels, dtype=int)
    return labels, mask


def masked_cross_entropy(probs: np.ndarray, labels, mask) -> float:
    labels, mask = _check_mask(labels, mask)
    idx = np.nonzero(mask)[0]
    p = probs[idx, labels[idx]]
    return float(-np.mean(np.log(np.maximum(p, 1e-300))))


def accuracy(probs: np.ndarray, labels, mask) -> float:
    labels, mask = _check_mask(labels, mask)
    return float(np.mean(probs[mask].argmax(axis=1) == labels[mask]))


def loss_value(model: GcnModel, cache: ForwardCache, labels, mask, weight_decay: float) -> float:
    reg = 0.5 * weight_decay * sum(float(np.sum(p * p)) for p in model.params)
    return masked_cross_entropy(cache.probs, labels, mask) + reg


def _backprop(cache: ForwardCache, d_logits: np.ndarray, prop: np.ndarray, model: GcnModel):
    """Returns (dL/dP_l per layer, flat parameter gradients without decay)."""
    n_layers = len(model.weights)
    d_pre = [None] * n_layers
    d_params = [None] * (2 * n_layers)
    dp = d_logits
    for l in range(n_layers - 1, -1, -1):
        d_pre[l] = dp
        d_params[2 * l] = cache.aggregated[l].T @ dp
        d_params[2 * l + 1] = dp.sum(axis=0)
        if l == 0:
            break
        dh = prop.T @ (dp @ model.weights[l].T)
        if cache.masks[l - 1] is not None:
            dh = dh * cache.masks[l - 1]
        dp = dh * (cache.preact[l - 1] > 0)
    return d_pre, d_params


def backward(cache: ForwardCache, labels, mask, prop: np.ndarray, model: GcnModel,
             weight_decay: float = 0.0) -> list[np.ndarray]:
    """Exact gradients of ``loss_value`` with respect to ``model.params``."""
    labels, mask = _check_mask(labels, mask)
    if len(cache.preact) != len(model.weights) or any(
        p.shape != (prop.shape[0], w.shape[1]) for p, w in zip(cache.preact, model.weights)
    ):
        raise ValidationError("forward cache does not match model/propagation shapes")
    idx = np.nonzero(mask)[0]
    d_logits = np.zeros_like(cache.probs)
    d_logits[idx] = cache.probs[idx]
    d_logits[idx, labels[idx]] -= 1.0
    d_logits /= idx.size
    _, d_params = _backprop(cache, d_logits, prop, model)
    return [g + weight_decay * p for g, p in zip(d_params, model.params)]


@dataclass
class NgdState:
    mask: np.ndarray
    labels: np.ndarray
    lam: float = 1.0
    ngd_epsilon: float = 0.01

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.ngd_epsilon <= 0:
            raise ValidationError("ngd_epsilon must be positive")
        if self.lam < 0:
            raise ValidationError("lambda must be non-negative")

    @property
    def n_labeled(self) -> int:
        return int(self.mask.sum())

    @property
    def n(self) -> int:
        return int(self.mask.size)


def ngd_factors(cache: ForwardCache, prop: np.ndarray, model: GcnModel, state: NgdState):
    """Per-layer second-moment factors (V_l, U_l).

    ``V_l`` is built from the aggregated inputs augmented with a ones column
    (the bias row), ``u_i`` is row i of dL_fit/dP_l, i.e. the output-side gradient already
    multiplied by the activation derivative. ``L_fit`` sums per-vertex
    cross-entropies against the true label on training vertices and the
    model's own argmax prediction elsewhere, so both groups carry O(1)
    gradients; the rows are then weighted by ``z_i + (1 - z_i) * lam`` and
    normalised by ``n + lam * n_labeled``.
    """
    z = state.mask.astype(float)
    targets = np.where(state.mask, state.labels, cache.probs.argmax(axis=1))
    d_logits = cache.probs.copy()
    d_logits[np.arange(targets.size), targets] -= 1.0
    d_pre, _ = _backprop(cache, d_logits, prop, model)
    row_w = z + (1.0 - z) * state.lam
    denom = state.n + state.lam * state.n_labeled
    factors = []
    for agg, u in zip(cache.aggregated, d_pre):
        agg = np.hstack([agg, np.ones((agg.shape[0], 1))])
        v_l = (agg * row_w[:, None]).T @ agg / denom
        u_l = (u * row_w[:, None]).T @ u / denom
        factors.append((v_l, u_l))
    return factors


def ngd_precondition(grads: list[np.ndarray], cache: ForwardCache, prop: np.ndarray,
                     model: GcnModel, state: NgdState) -> list[np.ndarray]:
    """Precondition flat ``[W_1, b_1, ...]`` gradients layer by layer."""
    damping = state.ngd_epsilon ** -0.5
    out = []
    for l, (v_l, u_l) in enumerate(ngd_factors(cache, prop, model, state)):
        g = np.vstack([grads[2 * l], grads[2 * l + 1][None, :]])
        v_reg = v_l + damping * np.eye(v_l.shape[0])
        u_reg = u_l + damping * np.eye(u_l.shape[0])
        left = np.linalg.solve(v_reg, g)
        pre = np.linalg.solve(u_reg.T, left.T).T
        out += [pre[:-1], pre[-1]]
    return out


@dataclass
class OptimizerState:
    rule: str = "adam"
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decoupled_weight_decay: float = 0.0
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def optimizer_step(weights: list[np.ndarray], directions: list[np.ndarray],
                   state: OptimizerState) -> list[np.ndarray]:
    """Apply one update and return new weight arrays; ``state`` is advanced in place.

    ``adam`` is the bias-corrected first/second-moment rule; ``sgd`` is heavy-ball
    momentum with ``beta1`` as the momentum coefficient.
    """
    if len(directions) != len(weights) or any(d.shape != w.shape for d, w in zip(directions, weights)):
        raise ShapeError("update directions do not match weight shapes")
    if not state.m:
        state.m = [np.zeros_like(w) for w in weights]
        state.v = [np.zeros_like(w) for w in weights]
    state.step += 1
    t = state.step
    new = []
    for i, (w, g) in enumerate(zip(weights, directions)):
        w = w * (1.0 - state.lr * state.decoupled_weight_decay)
        if state.rule == "adam":
            state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
            state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
            m_hat = state.m[i] / (1.0 - state.beta1 ** t)
            v_hat = state.v[i] / (1.0 - state.beta2 ** t)
            w = w - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        elif state.rule == "sgd":
            state.m[i] = state.beta1 * state.m[i] + g
            w = w - state.lr * state.m[i]
        else:
            raise ValidationError(f"unknown update rule {state.rule!r}")
        new.append(w)
    return new


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float


@dataclass
class TrainResult:
    model: GcnModel
    history: list[EpochRecord]
    initial_val_loss: float
    best_val_loss: float
    best_epoch: int

    @property
    def epochs_run(self) -> int:
        return len(self.history)


def predict(model: GcnModel, prop: np.ndarray, x: np.ndarray) -> np.ndarray:
    return forward(model, prop, x).probs


def train(graph: LatencyGraph, prop: np.ndarray | None, config: GcnConfig, n_classes: int,
          init: GcnModel | None = None) -> TrainResult:
    """Full-batch training with early stopping on validation loss.

    Stops once validation loss has not improved for ``patience`` consecutive
    epochs and returns the weights from the best-validation epoch. The
    starting weights are not a candidate, so a warm-started model always
    takes at least one step.
    """
    config.validate()
    train_mask, val_mask = graph.masks["train"], graph.masks["val"]
    if not train_mask.any() or not val_mask.any():
        raise ValidationError("train and validation masks must be non-empty")
    if prop is None:
        prop = renormalize(graph.adjacency)
    x, labels = graph.features, graph.labels
    model = init.copy() if init is not None else init_model(x.shape[1], n_classes, config)
    model.dropout = config.dropout
    rng = np.random.default_rng([config.seed, 1])
    outer = config.outer_rule if config.optimizer == "ngd" else "adam"
    opt = OptimizerState(rule=outer, lr=config.lr, beta1=config.momentum, beta2=config.beta2,
                         eps=config.adam_eps)
    ngd = NgdState(train_mask, labels, config.ngd_lambda, config.ngd_epsilon) \
        if config.optimizer == "ngd" else None

    initial = masked_cross_entropy(predict(model, prop, x), labels, val_mask)
    best_loss, best_epoch, best = np.inf, 0, model.copy()
    history: list[EpochRecord] = []
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        cache = forward(model, prop, x, dropout_active=True, rng=rng)
        train_loss = masked_cross_entropy(cache.probs, labels, train_mask)
        grads = backward(cache, labels, train_mask, prop, model, config.weight_decay)
        if ngd is not None:
            grads = ngd_precondition(grads, cache, prop, model, ngd)
        model.params = optimizer_step(model.params, grads, opt)

        probs = predict(model, prop, x)
        val_loss = masked_cross_entropy(probs, labels, val_mask)
        history.append(EpochRecord(epoch, train_loss, val_loss, accuracy(probs, labels, val_mask)))
        if val_loss < best_loss:
            best_loss, best_epoch, best = val_loss, epoch, model.copy()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return TrainResult(best, history, initial, best_loss, best_epoch)


def save_checkpoint(path: str | Path, model: GcnModel, config: GcnConfig) -> None:
    payload = {
        "shapes": [list(s) for s in model.shapes],
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
        "hyper": asdict(config),
        "seed": config.seed,
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[GcnModel, GcnConfig]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    config = GcnConfig(**payload["hyper"])
    weights = [np.asarray(w, dtype=float).reshape(s) for w, s in zip(payload["weights"], payload["shapes"])]
    biases = [np.asarray(b, dtype=float) for b in payload["biases"]]
    return GcnModel(weights, biases, config.dropout), config


def write_history_csv(path: str | Path, history: list[EpochRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_acc"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_acc)])

