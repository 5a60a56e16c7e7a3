"""Fully-connected softmax classifier trained from scratch.

Architecture: ReLU hidden layers with inverted dropout, a softmax
output head, mean cross-entropy loss, and Adam updates. All randomness
(init, epoch shuffling, dropout masks) comes from named substreams of
one seed, so training is bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .ingest import AnnotatedDataset, ExpressionMatrix
from .rng import substream

DEFAULT_HIDDEN = ((1000, 0.5), (250, 0.4), (250, 0.4))
PROB_FLOOR = 1e-12

HIDDEN_ACTIVATIONS = ("relu", "identity")


@dataclass
class MlpConfig:
    input_dim: int
    output_dim: int
    hidden: tuple = DEFAULT_HIDDEN  # ((width, dropout_rate), ...)
    hidden_activation: str = "relu"
    epochs: int = 50
    batch_size: int = 30
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple((int(w), float(r)) for w, r in self.hidden)
        if self.input_dim < 1 or self.output_dim < 2:
            raise ConfigError("need input_dim >= 1 and output_dim >= 2")
        for width, rate in self.hidden:
            if width < 1:
                raise ConfigError(f"hidden width must be >= 1, got {width}")
            if not 0 <= rate < 1:
                raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ConfigError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("need epochs >= 0 and batch_size >= 1")

    def layer_dims(self) -> list[tuple[int, int]]:
        widths = [self.input_dim] + [w for w, _ in self.hidden] + [self.output_dim]
        return list(zip(widths[:-1], widths[1:]))


@dataclass
class Layer:
    weights: np.ndarray  # (n_out, n_in)
    biases: np.ndarray  # (n_out,)
    activation: str  # relu | identity | softmax
    dropout_rate: float = 0.0


@dataclass
class MlpModel:
    config: MlpConfig
    layers: list[Layer]
    class_names: list[str]

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.append(layer.weights)
            out.append(layer.biases)
        return out


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: list[np.ndarray]) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
        )


def init_model(config: MlpConfig, class_names: list[str] | None = None) -> MlpModel:
    """Glorot-uniform weights, zero biases, from the config seed."""
    if class_names is None:
        class_names = [str(k) for k in range(config.output_dim)]
    if len(class_names) != config.output_dim:
        raise ConfigError("class_names length must equal output_dim")
    rng = substream(config.seed, "mlp", "init")
    layers: list[Layer] = []
    dims = config.layer_dims()
    rates = [r for _, r in config.hidden] + [0.0]
    for i, (n_in, n_out) in enumerate(dims):
        limit = np.sqrt(6.0 / (n_in + n_out))
        weights = rng.uniform(-limit, limit, size=(n_out, n_in))
        last = i == len(dims) - 1
        layers.append(
            Layer(
                weights=weights,
                biases=np.zeros(n_out),
                activation="softmax" if last else config.hidden_activation,
                dropout_rate=rates[i],
            )
        )
    return MlpModel(config=config, layers=layers, class_names=list(class_names))


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]  # input to each layer
    pre_activations: list[np.ndarray]  # z = x W^T + b per layer
    dropout_masks: list  # scaled keep-mask per layer, or None
    probabilities: np.ndarray


def forward(
    model: MlpModel,
    batch: np.ndarray,
    mode: str = "infer",
    dropout_rng: np.random.Generator | None = None,
) -> ForwardCache:
    """Run the network; `train` mode applies inverted dropout after each
    hidden activation (mask/(1-rate)), so inference needs no rescaling."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.config.input_dim:
        raise DataError(
            f"batch has shape {x.shape}, expected (n, {model.config.input_dim})"
        )
    if mode not in ("train", "infer"):
        raise ConfigError(f"unknown forward mode {mode!r}")
    if mode == "train" and dropout_rng is None:
        raise ConfigError("train mode requires a dropout generator")

    inputs, pre_acts, masks = [], [], []
    for layer in model.layers:
        inputs.append(x)
        z = x @ layer.weights.T + layer.biases
        pre_acts.append(z)
        if layer.activation == "softmax":
            a = softmax(z)
        elif layer.activation == "relu":
            a = np.maximum(z, 0.0)
        else:
            a = z
        mask = None
        if mode == "train" and layer.dropout_rate > 0 and layer.activation != "softmax":
            keep = dropout_rng.random(a.shape) >= layer.dropout_rate
            mask = keep / (1.0 - layer.dropout_rate)
            a = a * mask
        masks.append(mask)
        x = a
    return ForwardCache(inputs, pre_acts, masks, x)


def logits(model: MlpModel, batch: np.ndarray) -> np.ndarray:
    """Pre-softmax output scores in infer mode."""
    return forward(model, batch).pre_activations[-1]


def loss(probabilities: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy; probabilities clamped away from 0 so the
    value stays finite."""
    labels = np.asarray(labels)
    p = probabilities[np.arange(len(labels)), labels]
    return float(np.mean(-np.log(np.maximum(p, PROB_FLOOR))))


def backward(model: MlpModel, cache: ForwardCache, labels: np.ndarray) -> list[np.ndarray]:
    """Gradients of mean cross-entropy for every parameter, ordered like
    model.parameters(). Dropout masks are treated as constants."""
    labels = np.asarray(labels)
    n = len(labels)
    # softmax + cross-entropy collapse to (p - onehot) / n at the logits
    delta = cache.probabilities.copy()
    delta[np.arange(n), labels] -= 1.0
    delta /= n

    grads: list[np.ndarray] = [None] * (2 * model.n_layers)
    for i in range(model.n_layers - 1, -1, -1):
        layer = model.layers[i]
        grads[2 * i] = delta.T @ cache.inputs[i]
        grads[2 * i + 1] = delta.sum(axis=0)
        if i == 0:
            break
        upstream = delta @ layer.weights
        prev = model.layers[i - 1]
        if cache.dropout_masks[i - 1] is not None:
            upstream = upstream * cache.dropout_masks[i - 1]
        if prev.activation == "relu":
            upstream = upstream * (cache.pre_activations[i - 1] > 0)
        delta = upstream
    return grads


def adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    learning_rate: float,
    beta1: float,
    beta2: float,
    epsilon: float,
) -> AdamState:
    """One bias-corrected Adam update, applied to params in place."""
    state.t += 1
    t = state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p -= learning_rate * m_hat / (np.sqrt(v_hat) + epsilon)
    return state


def train(data: AnnotatedDataset, config: MlpConfig) -> tuple[MlpModel, list[float]]:
    """Train on shuffled mini-batches; returns the model and per-epoch
    mean loss history. Aborts with a diagnostic if the loss diverges."""
    x = data.sample_major()
    y = data.labels
    if data.n_classes < 2:
        raise DataError("training requires at least 2 classes")
    if config.input_dim != x.shape[1]:
        raise ConfigError(
            f"config input_dim {config.input_dim} != data features {x.shape[1]}"
        )
    if config.output_dim != data.n_classes:
        raise ConfigError(
            f"config output_dim {config.output_dim} != data classes {data.n_classes}"
        )
    if x.size and (x.min() < -1e-9 or x.max() > 1 + 1e-9):
        raise DataError("training features must be scaled to [0, 1]")

    model = init_model(config, class_names=data.class_names)
    params = model.parameters()
    state = AdamState.for_params(params)
    dropout_rng = substream(config.seed, "mlp", "dropout")
    n = x.shape[0]
    history: list[float] = []
    for epoch in range(config.epochs):
        order = substream(config.seed, "mlp", "shuffle", epoch).permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            rows = order[start : start + config.batch_size]
            cache = forward(model, x[rows], mode="train", dropout_rng=dropout_rng)
            batch_loss = loss(cache.probabilities, y[rows])
            if not np.isfinite(batch_loss):
                raise NumericError(
                    f"loss diverged at epoch {epoch}, batch {start // config.batch_size}"
                )
            total += batch_loss * len(rows)
            grads = backward(model, cache, y[rows])
            adam_step(
                params,
                grads,
                state,
                config.learning_rate,
                config.beta1,
                config.beta2,
                config.epsilon,
            )
        history.append(total / n)
    return model, history


def predict(model: MlpModel, data) -> tuple[np.ndarray, np.ndarray]:
    """Probabilities and argmax class indices (ties -> lowest index).

    Accepts a (samples x features) array or an ExpressionMatrix.
    """
    if isinstance(data, ExpressionMatrix):
        if data.n_features != model.config.input_dim:
            raise DataError(
                f"matrix has {data.n_features} features, model expects "
                f"{model.config.input_dim}"
            )
        data = data.sample_major()
    probs = forward(model, data).probabilities
    return probs, probs.argmax(axis=1)


def model_to_dict(model: MlpModel) -> dict:
    cfg = model.config
    return {
        "format_version": 1,
        "kind": "mlp",
        "config": {
            "input_dim": cfg.input_dim,
            "output_dim": cfg.output_dim,
            "hidden": [[w, r] for w, r in cfg.hidden],
            "hidden_activation": cfg.hidden_activation,
            "epochs": cfg.epochs,
            "batch_size": cfg.batch_size,
            "learning_rate": cfg.learning_rate,
            "beta1": cfg.beta1,
            "beta2": cfg.beta2,
            "epsilon": cfg.epsilon,
            "seed": cfg.seed,
        },
        "class_names": list(model.class_names),
        "layers": [
            {
                "activation": layer.activation,
                "dropout_rate": layer.dropout_rate,
                "weights": layer.weights.tolist(),
                "biases": layer.biases.tolist(),
            }
            for layer in model.layers
        ],
    }


def model_from_dict(doc: dict) -> MlpModel:
    if doc.get("format_version") != 1 or doc.get("kind") != "mlp":
        raise DataError("not a version-1 mlp model document")
    cfg_doc = dict(doc["config"])
    cfg_doc["hidden"] = tuple((w, r) for w, r in cfg_doc["hidden"])
    config = MlpConfig(**cfg_doc)
    layers = [
        Layer(
            weights=np.array(ld["weights"], dtype=np.float64),
            biases=np.array(ld["biases"], dtype=np.float64),
            activation=ld["activation"],
            dropout_rate=ld["dropout_rate"],
        )
        for ld in doc["layers"]
    ]
    model = MlpModel(config=config, layers=layers, class_names=list(doc["class_names"]))
    dims = config.layer_dims()
    if len(layers) != len(dims):
        raise DataError("layer count does not match config")
    for layer, (n_in, n_out) in zip(layers, dims):
        if layer.weights.shape != (n_out, n_in) or layer.biases.shape != (n_out,):
            raise DataError("layer shapes do not chain with the config")
        if not (np.all(np.isfinite(layer.weights)) and np.all(np.isfinite(layer.biases))):
            raise DataError("model parameters contain non-finite values")
    return model


def serialize_model(model: MlpModel) -> str:
    return json.dumps(model_to_dict(model), sort_keys=True, separators=(",", ":"))


def deserialize_model(text: str) -> MlpModel:
    return model_from_dict(json.loads(text))
