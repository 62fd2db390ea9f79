"""Small shared-encoder multi-task classifier that produces real gradient traces.

The model is a shared encoder (one tanh hidden layer) with a softmax
classification head, trained jointly on every task with plain SGD. Tasks
take turns: within an epoch each task contributes one mini-batch per
round. For every (task, epoch) we keep the unweighted mean of that task's
step gradients, separately for the ``encoder`` and ``classifier`` layers.

Synthetic tasks come in planted clusters. Tasks in the same cluster label
their inputs with the same linear concept; concepts of different clusters
touch disjoint entries of the (input_dim x n_classes) weight matrix, so
their flattened cosine is exactly zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

import numpy as np

from gradgroup.errors import ConfigError, EmptyDataset, InconsistentDims
from gradgroup.similarity import GradientTrace, SimilarityMatrix

LAYERS = ("encoder", "classifier")


@dataclass(frozen=True)
class SyntheticTaskSpec:
    task: str
    cluster_id: int
    n_train: int
    input_dim: int
    n_classes: int
    noise_sigma: float
    seed: int

    def __post_init__(self):
        if not isinstance(self.task, str) or not self.task:
            raise ConfigError("task must be a non-empty string")
        for name in ("n_train", "input_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be at least 2")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 0.5
    hidden_dim: int = 16
    seed: int = 0
    # uniform per-task subsample used for gradient measurement
    sample_fraction: float = 1.0

    def __post_init__(self):
        for f in ("epochs", "batch_size", "hidden_dim"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{f} must be positive")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 < self.sample_fraction <= 1:
            raise ConfigError("sample_fraction must lie in (0, 1]")


@dataclass
class ModelParams:
    encoder_weight: np.ndarray   # (input_dim, hidden_dim)
    encoder_bias: np.ndarray     # (hidden_dim,)
    classifier_weight: np.ndarray  # (hidden_dim, n_classes)
    classifier_bias: np.ndarray  # (n_classes,)

    def __post_init__(self):
        d, h = self.encoder_weight.shape
        h2, c = self.classifier_weight.shape
        if self.encoder_bias.shape != (h,) or h2 != h or self.classifier_bias.shape != (c,):
            raise InconsistentDims("parameter shapes are inconsistent")

    @classmethod
    def init(cls, input_dim, hidden_dim, n_classes, rng) -> "ModelParams":
        return cls(
            rng.normal(0.0, 1.0 / np.sqrt(input_dim), size=(input_dim, hidden_dim)),
            np.zeros(hidden_dim),
            rng.normal(0.0, 1.0 / np.sqrt(hidden_dim), size=(hidden_dim, n_classes)),
            np.zeros(n_classes),
        )

    @classmethod
    def zeros(cls, input_dim, hidden_dim, n_classes) -> "ModelParams":
        return cls(np.zeros((input_dim, hidden_dim)), np.zeros(hidden_dim),
                   np.zeros((hidden_dim, n_classes)), np.zeros(n_classes))

    def copy(self) -> "ModelParams":
        return ModelParams(*(np.array(getattr(self, f.name)) for f in fields(self)))

    def layer_vector(self, layer: str) -> np.ndarray:
        """Flatten one layer: row-major weights, then bias."""
        if layer == "encoder":
            return np.concatenate([self.encoder_weight.ravel(), self.encoder_bias])
        if layer == "classifier":
            return np.concatenate([self.classifier_weight.ravel(), self.classifier_bias])
        raise KeyError(layer)


@dataclass
class Dataset:
    task: str
    x: np.ndarray
    y: np.ndarray  # integer class labels
    cluster_id: int = 0
    n_classes: int | None = None

    def __post_init__(self):
        if self.n_classes is None:
            self.n_classes = int(self.y.max()) + 1 if len(self.y) else 0

    def __len__(self):
        return len(self.y)


def _check_batch(params: ModelParams, x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.ndim != 2 or x.shape[1] != params.encoder_weight.shape[0]:
        raise InconsistentDims(f"batch features have shape {x.shape}, "
                               f"model expects (*, {params.encoder_weight.shape[0]})")
    if y.shape != (x.shape[0],) or x.shape[0] == 0:
        raise InconsistentDims("labels must be a non-empty vector matching the batch")
    return x, y


def _forward(params, x):
    hidden = np.tanh(x @ params.encoder_weight + params.encoder_bias)
    logits = hidden @ params.classifier_weight + params.classifier_bias
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return hidden, log_probs


def forward_loss(params: ModelParams, x, y) -> float:
    """Mean softmax cross-entropy of the batch."""
    x, y = _check_batch(params, x, y)
    _, log_probs = _forward(params, x)
    return float(-log_probs[np.arange(len(y)), y].mean())


def predict(params: ModelParams, x) -> np.ndarray:
    _, log_probs = _forward(params, np.asarray(x, dtype=np.float64))
    return log_probs.argmax(axis=1)


def backward_grads(params: ModelParams, x, y) -> dict[str, np.ndarray]:
    """Analytic gradient of ``forward_loss``, flattened per layer."""
    x, y = _check_batch(params, x, y)
    n = len(y)
    hidden, log_probs = _forward(params, x)
    dlogits = np.exp(log_probs)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    grad_cw = hidden.T @ dlogits
    grad_cb = dlogits.sum(axis=0)
    dpre = (dlogits @ params.classifier_weight.T) * (1.0 - hidden ** 2)
    grad_ew = x.T @ dpre
    grad_eb = dpre.sum(axis=0)
    return {
        "encoder": np.concatenate([grad_ew.ravel(), grad_eb]),
        "classifier": np.concatenate([grad_cw.ravel(), grad_cb]),
    }


def _unflatten(params: ModelParams, grads: dict[str, np.ndarray]) -> ModelParams:
    d, h = params.encoder_weight.shape
    c = params.classifier_bias.size
    enc, cls = grads["encoder"], grads["classifier"]
    return ModelParams(enc[:d * h].reshape(d, h), enc[d * h:],
                       cls[:h * c].reshape(h, c), cls[h * c:])


# -- synthetic data -------------------------------------------------------

def cluster_concepts(cluster_ids, input_dim, n_classes, concept_seed=0) -> dict[int, np.ndarray]:
    """One (input_dim, n_classes) concept matrix per cluster id.

    The flattened weight entries are shuffled and dealt round-robin to the
    clusters; each concept is Gaussian on its own entries and zero elsewhere.
    """
    ids = sorted(set(cluster_ids))
    n_entries = input_dim * n_classes
    if len(ids) > n_entries:
        raise ConfigError(f"{len(ids)} clusters need more than {n_entries} concept entries")
    rng = np.random.default_rng(concept_seed)
    order = rng.permutation(n_entries)
    concepts = {}
    for k, cid in enumerate(ids):
        w = np.zeros(n_entries)
        own = order[k::len(ids)]
        w[own] = rng.normal(size=own.size)
        concepts[cid] = w.reshape(input_dim, n_classes)
    return concepts


def generate_synthetic_tasks(specs, concept_seed: int = 0) -> list[Dataset]:
    specs = list(specs)
    if not specs:
        raise EmptyDataset("no task specs given")
    dims = {(s.input_dim, s.n_classes) for s in specs}
    if len(dims) != 1:
        raise InconsistentDims(f"tasks disagree on (input_dim, n_classes): {sorted(dims)}")
    if len({s.task for s in specs}) != len(specs):
        raise ConfigError("duplicate task labels")
    input_dim, n_classes = dims.pop()
    concepts = cluster_concepts([s.cluster_id for s in specs], input_dim, n_classes, concept_seed)
    out = []
    for s in specs:
        rng = np.random.default_rng(s.seed)
        x = rng.normal(size=(s.n_train, input_dim))
        logits = x @ concepts[s.cluster_id]
        logits = logits + s.noise_sigma * rng.normal(size=logits.shape)
        out.append(Dataset(s.task, x, logits.argmax(axis=1), s.cluster_id, n_classes))
    return out


def planted_similarity(datasets) -> SimilarityMatrix:
    """Indicator matrix: 1 for tasks sharing a planted cluster, else 0."""
    cid = np.array([d.cluster_id for d in datasets])
    return SimilarityMatrix(tuple(d.task for d in datasets),
                            (cid[:, None] == cid[None, :]).astype(float), "raw")


# -- training -------------------------------------------------------------

@dataclass
class TrainResult:
    traces: list
    params: ModelParams
    # epoch_losses[e][task] = mean training loss over that task's steps in epoch e
    epoch_losses: list = field(default_factory=list)


def train_and_capture(datasets, config: TrainConfig, init_params: ModelParams | None = None) -> TrainResult:
    datasets = list(datasets)
    if not datasets:
        raise EmptyDataset("no tasks to train")
    for d in datasets:
        if len(d) == 0:
            raise EmptyDataset(f"task {d.task!r} has no examples")
    dims = {d.x.shape[1] for d in datasets}
    if len(dims) != 1:
        raise InconsistentDims("tasks disagree on input_dim")
    input_dim = dims.pop()
    n_classes = max(d.n_classes for d in datasets)

    rng = np.random.default_rng(config.seed)
    if init_params is None:
        params = ModelParams.init(input_dim, config.hidden_dim, n_classes, rng)
    else:
        params = init_params.copy()

    if config.sample_fraction < 1.0:
        sub = []
        for d in datasets:
            m = max(1, int(round(config.sample_fraction * len(d))))
            idx = np.sort(rng.choice(len(d), size=m, replace=False))
            sub.append(Dataset(d.task, d.x[idx], d.y[idx], d.cluster_id, d.n_classes))
        datasets = sub

    traces = []
    epoch_losses = []
    bs = config.batch_size
    for epoch in range(config.epochs):
        batches = []
        for d in datasets:
            perm = rng.permutation(len(d))
            batches.append([perm[i:i + bs] for i in range(0, len(d), bs)])
        sums = [{layer: None for layer in LAYERS} for _ in datasets]
        losses = [[] for _ in datasets]
        for r in range(max(len(b) for b in batches)):
            for t, d in enumerate(datasets):
                if r >= len(batches[t]):
                    continue
                idx = batches[t][r]
                xb, yb = d.x[idx], d.y[idx]
                losses[t].append(forward_loss(params, xb, yb))
                grads = backward_grads(params, xb, yb)
                for layer in LAYERS:
                    acc = sums[t][layer]
                    sums[t][layer] = grads[layer].copy() if acc is None else acc + grads[layer]
                step = _unflatten(params, grads)
                params = ModelParams(
                    params.encoder_weight - config.learning_rate * step.encoder_weight,
                    params.encoder_bias - config.learning_rate * step.encoder_bias,
                    params.classifier_weight - config.learning_rate * step.classifier_weight,
                    params.classifier_bias - config.learning_rate * step.classifier_bias,
                )
        for t, d in enumerate(datasets):
            steps = len(batches[t])
            for layer in LAYERS:
                traces.append(GradientTrace(d.task, epoch, layer, sums[t][layer] / steps))
        epoch_losses.append({d.task: float(np.mean(losses[t])) for t, d in enumerate(datasets)})
    return TrainResult(traces, params, epoch_losses)


# -- config file ----------------------------------------------------------

_TOP_KEYS = {"train", "tasks", "concept_seed"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
_TASK_KEYS = {f.name for f in fields(SyntheticTaskSpec)}
_INT_FIELDS = {"epochs", "batch_size", "hidden_dim", "seed", "cluster_id", "n_train",
               "input_dim", "n_classes", "concept_seed"}


def _check_keys(obj, allowed, where, required=()):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected a JSON object")
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key {unknown[0]!r}")
    missing = sorted(set(required) - set(obj))
    if missing:
        raise ConfigError(f"{where}: missing key {missing[0]!r}")
    for k, v in obj.items():
        if k in _INT_FIELDS and (isinstance(v, bool) or not isinstance(v, int)):
            raise ConfigError(f"{where}: key {k!r} must be an integer")
        if k in {"learning_rate", "noise_sigma", "sample_fraction"} and (
                isinstance(v, bool) or not isinstance(v, (int, float))):
            raise ConfigError(f"{where}: key {k!r} must be a number")
        if k == "task" and not isinstance(v, str):
            raise ConfigError(f"{where}: key 'task' must be a string")


def parse_config(obj) -> tuple[TrainConfig, list[SyntheticTaskSpec], int]:
    """Validate a trainer config object; returns (train, task specs, concept_seed).

    Schema::

        {"concept_seed": int,             # optional, default 0
         "train": {"epochs", "batch_size", "learning_rate", "hidden_dim",
                   "seed", "sample_fraction"},   # all optional
         "tasks": [{"task", "cluster_id", "n_train", "input_dim",
                    "n_classes", "noise_sigma", "seed"}, ...]}
    """
    _check_keys(obj, _TOP_KEYS, "config", required=("tasks",))
    train = obj.get("train", {})
    _check_keys(train, _TRAIN_KEYS, "config.train")
    tasks = obj["tasks"]
    if not isinstance(tasks, list) or not tasks:
        raise ConfigError("config.tasks: expected a non-empty list")
    specs = []
    for i, t in enumerate(tasks):
        _check_keys(t, _TASK_KEYS, f"config.tasks[{i}]", required=_TASK_KEYS)
        specs.append(SyntheticTaskSpec(**t))
    return TrainConfig(**train), specs, obj.get("concept_seed", 0)


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from None
    return parse_config(obj)
