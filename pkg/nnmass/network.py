"""
A small numpy MLP engine with concatenation-type long-range links.

Every layer i of a cell computes s_i = phi(W_i x_{i-1} + b_i) where x_{i-1} is s_{i-1} followed by the long-range
    sources of the layer, sorted by (layer, unit). An input projection produces layer 0 of the first cell, layer 0 of
    every later cell reads the last layer of the cell before it, and a linear head reads only the final layer.

Layers are numbered globally in forward order, so for a single-cell model the global index of a layer is its index in
    the cell.
"""
import csv
import json
import logging
import math

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from scipy.special import log_softmax, softmax

from . import randmat
from .errors import DivergenceError, RangeError, ShapeError, StaleCacheError, UnsupportedConfigurationError, reading
from .topology import Activation, ArchitectureSpec, realize_topology
from .utils import classproperty, counters, generator

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ("epoch", "train_loss", "train_acc", "test_acc")


# region Activations
def _elu(h):
    return np.where(h > 0, h, np.expm1(np.minimum(h, 0)))


def _elu_grad(h, s):
    # for h <= 0, s = e^h - 1
    return np.where(h > 0, 1.0, s + 1.0)


ACTIVATIONS = {
    Activation.linear: (lambda h: h, lambda h, s: np.ones_like(h)),
    Activation.relu: (lambda h: np.maximum(h, 0), lambda h, s: (h > 0).astype(h.dtype)),
    Activation.elu: (_elu, _elu_grad),
}
# endregion


@dataclass(frozen=True)
class InitScheme:
    """
    Fan-in scaled Gaussian initialization: each weight of a layer is drawn from N(0, gain / fan_in), where fan_in is
        the layer's input column count including its long-range columns.

    Args:
        kind (str): Only "fan_in_scaled" is supported.
        gain (float, optional): Defaults to 2 for relu and 1 for elu and linear.
    """
    kind: str = "fan_in_scaled"
    gain: Optional[float] = None

    def __post_init__(self):
        if self.kind != "fan_in_scaled":
            raise RangeError(f"Unknown init scheme {self.kind!r}", kind=self.kind)
        if self.gain is not None and not self.gain > 0:
            raise RangeError(f"Init gain must be positive, got {self.gain}", gain=self.gain)

    def resolved_gain(self, activation):
        if self.gain is not None:
            return self.gain
        return 2.0 if Activation(activation) is Activation.relu else 1.0

    def to_dict(self):
        return {"kind": self.kind, "gain": self.gain}

    @classmethod
    def from_dict(cls, data):
        with reading("init scheme"):
            return cls(data.get("kind", "fan_in_scaled"), data.get("gain"))


@dataclass
class Layer:
    """One fully connected layer. `sources` groups the long-range inputs as (global layer, unit indices) runs."""
    cell: int
    index: int
    weight: np.ndarray
    bias: np.ndarray
    sources: Tuple[Tuple[int, np.ndarray], ...] = ()

    @property
    def n_sources(self):
        return sum(len(units) for _, units in self.sources)

    @property
    def previous_width(self):
        return self.weight.shape[1] - self.n_sources


class MlpModel(object):
    """
    The network built from an ArchitectureSpec and one of its TopologyRealizations.

    Attributes:
        layers (list): Layer objects in forward order. `layers[0]` is the input projection.
        head_weight (numpy.ndarray): (output_dim, final width).
        head_bias (numpy.ndarray): (output_dim,).
        version (int): Bumped on every parameter update, so caches from an older forward pass can be detected.
    """
    def __init__(self, spec, realization, layers, head_weight, head_bias, topo_seed, init_seed, init):
        self.spec = spec
        self.realization = realization
        self.layers = layers
        self.head_weight = head_weight
        self.head_bias = head_bias
        self.topo_seed = topo_seed
        self.init_seed = init_seed
        self.init = init
        self.version = 0
        self.activation, self.activation_grad = ACTIVATIONS[spec.activation]

    def parameters(self):
        """Every parameter array, in checkpoint order: each layer's weight then bias, then the head."""
        params = []
        for layer in self.layers:
            params.extend((layer.weight, layer.bias))
        params.extend((self.head_weight, self.head_bias))
        return params

    @property
    def param_count(self):
        return sum(param.size for param in self.parameters())

    def touch(self):
        """Mark the parameters as changed. Call after editing them in place."""
        self.version += 1


def _source_runs(realization, cell_index, layer, offset):
    """Group a layer's sorted (layer, unit) sources into runs sharing a source layer, with global layer indices."""
    runs = []
    for source_layer, unit in realization.sources_of(cell_index, layer):
        if runs and runs[-1][0] == offset + source_layer:
            runs[-1][1].append(unit)
        else:
            runs.append((offset + source_layer, [unit]))
    return tuple((layer_index, np.array(units, dtype=np.intp)) for layer_index, units in runs)


def build_model(spec, topo_seed, init_seed, init=InitScheme(), jacobian_experiment=False):
    """
    Build a freshly initialized model.

    Args:
        spec (ArchitectureSpec): The architecture.
        topo_seed (int): Seed of the long-range link realization.
        init_seed (int): Seed of the weights. Layer g draws from the stream (init_seed, g), the head from
            (init_seed, number of layers).
        init (InitScheme): Weight initialization. Biases always start at zero.
        jacobian_experiment (bool): Jacobian experiments are defined on a single cell only.

    Raises:
        UnsupportedConfigurationError: If `jacobian_experiment` is set for a multi-cell spec.
    """
    if jacobian_experiment and len(spec.cells) > 1:
        raise UnsupportedConfigurationError(
            "Jacobian experiments need a single-cell architecture", cells=len(spec.cells),
        )

    realization = realize_topology(spec, topo_seed)
    counters.increment("weight_allocations")
    gain = init.resolved_gain(spec.activation)

    layers = []
    previous_width = spec.input_dim
    for c, cell in enumerate(spec.cells):
        offset = len(layers)
        for i in range(cell.depth):
            sources = _source_runs(realization, c, i, offset)
            fan_in = previous_width + sum(len(units) for _, units in sources)
            weight = generator(init_seed, len(layers)).normal(0.0, math.sqrt(gain / fan_in), (cell.width, fan_in))
            layers.append(Layer(c, i, weight, np.zeros(cell.width), sources))
            previous_width = cell.width

    head_weight = generator(init_seed, len(layers)).normal(
        0.0, math.sqrt(gain / previous_width), (spec.output_dim, previous_width),
    )
    logger.debug("Built model with %d layers, shapes %s", len(layers), [layer.weight.shape for layer in layers])
    return MlpModel(spec, realization, layers, head_weight, np.zeros(spec.output_dim), topo_seed, init_seed, init)


@dataclass
class ForwardCache:
    inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]
    activations: List[np.ndarray]
    logits: np.ndarray
    version: int


def forward(model, batch):
    """
    Run a batch through the model.

    Args:
        model (MlpModel): The model.
        batch (numpy.ndarray): (n, input_dim) inputs.

    Returns:
        tuple: (logits of shape (n, output_dim), ForwardCache). The cache keeps every concatenated input x_{i-1},
            pre-activation h_i and activation s_i.

    Raises:
        ShapeError: If the batch is not (n, input_dim).
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != model.spec.input_dim:
        raise ShapeError(f"Expected a batch of shape (n, {model.spec.input_dim}), got {batch.shape}",
                         expected=model.spec.input_dim, shape=list(batch.shape))

    inputs, pre, post = [], [], []
    previous = batch
    for layer in model.layers:
        if layer.sources:
            x = np.concatenate([previous] + [post[source][:, units] for source, units in layer.sources], axis=1)
        else:
            x = previous
        h = x @ layer.weight.T + layer.bias
        previous = model.activation(h)
        inputs.append(x)
        pre.append(h)
        post.append(previous)

    logits = previous @ model.head_weight.T + model.head_bias
    return logits, ForwardCache(inputs, pre, post, logits, model.version)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy."""
    labels = np.asarray(labels, dtype=np.intp)
    return float(-np.mean(log_softmax(logits, axis=1)[np.arange(len(labels)), labels]))


def loss(model, batch, labels):
    return cross_entropy(forward(model, batch)[0], labels)


@dataclass
class Gradients:
    """Gradients in the same order as `MlpModel.parameters`, plus the gradient of the loss w.r.t. the batch."""
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    head_weight: np.ndarray
    head_bias: np.ndarray
    inputs: np.ndarray

    def parameters(self):
        params = []
        for weight, bias in zip(self.weights, self.biases):
            params.extend((weight, bias))
        params.extend((self.head_weight, self.head_bias))
        return params


def backward(model, cache, labels):
    """
    Backpropagate the mean cross-entropy through the model.

    The gradient of each concatenated input is split back: the first block flows to the previous layer and every
        long-range column flows to the unit that produced it.

    Raises:
        StaleCacheError: If the parameters changed since the forward pass that produced `cache`.
    """
    if cache.version != model.version:
        raise StaleCacheError("The forward cache is older than the model parameters",
                              cache_version=cache.version, model_version=model.version)

    labels = np.asarray(labels, dtype=np.intp)
    n = len(labels)
    d_logits = softmax(cache.logits, axis=1)
    d_logits[np.arange(n), labels] -= 1.0
    d_logits /= n

    head_weight = d_logits.T @ cache.activations[-1]
    head_bias = d_logits.sum(axis=0)

    d_post = [np.zeros_like(s) for s in cache.activations]
    d_post[-1] += d_logits @ model.head_weight

    weights, biases = [None] * len(model.layers), [None] * len(model.layers)
    d_inputs = None
    for g in reversed(range(len(model.layers))):
        layer = model.layers[g]
        d_h = d_post[g] * model.activation_grad(cache.pre_activations[g], cache.activations[g])
        weights[g] = d_h.T @ cache.inputs[g]
        biases[g] = d_h.sum(axis=0)

        d_x = d_h @ layer.weight
        width = layer.previous_width
        if g > 0:
            d_post[g - 1] += d_x[:, :width]
        else:
            d_inputs = d_x[:, :width]

        offset = width
        for source, units in layer.sources:
            d_post[source][:, units] += d_x[:, offset:offset + len(units)]
            offset += len(units)

    return Gradients(weights, biases, head_weight, head_bias, d_inputs)


# region Jacobians
@dataclass(frozen=True)
class LayerJacobian:
    layer: int
    cell: int
    cell_layer: int
    rows: int
    cols: int
    spectrum: randmat.SingularSpectrum
    mean_sv: float


@dataclass(frozen=True)
class JacobianReport:
    layers: Tuple[LayerJacobian, ...]
    mean_sv: float

    def to_dict(self):
        return {
            "mean_sv": self.mean_sv,
            "layers": [{"layer": j.layer, "cell": j.cell, "cell_layer": j.cell_layer, "rows": j.rows, "cols": j.cols,
                        "mean_sv": j.mean_sv, "singular_values": list(j.spectrum.values)} for j in self.layers],
        }


def _check_layer(model, layer):
    if not 1 <= layer < len(model.layers):
        raise RangeError(f"Layer {layer} has no layerwise Jacobian; valid layers are 1..{len(model.layers) - 1}",
                         layer=layer)


def layerwise_jacobian(model, sample, layer):
    """
    J_{i,i-1} = ds_i / dx_{i-1} = D_i W_i at one input sample.

    Args:
        model (MlpModel): The model.
        sample (numpy.ndarray): One input of length input_dim.
        layer (int): The global layer index i, at least 1.

    Returns:
        numpy.ndarray: (w_i, w_{i-1} + number of sources of layer i). D_i is diag(phi'(h_i)).
    """
    _check_layer(model, layer)
    _, cache = forward(model, np.asarray(sample, dtype=np.float64).reshape(1, -1))
    d = model.activation_grad(cache.pre_activations[layer][0], cache.activations[layer][0])
    return d[:, None] * model.layers[layer].weight


def default_probe(input_dim, n=16, seed=0):
    """Standard normal probe inputs for `ldi_report`."""
    return generator(seed, input_dim, n).standard_normal((n, input_dim))


def ldi_report(model, probe_batch):
    """
    Measure layerwise dynamical isometry: the singular values of every layerwise Jacobian over a batch of probes.

    The model is assumed to be at initialization; this is not checked.

    Returns:
        JacobianReport: Per layer, the probe-averaged sorted singular values and their mean. The network-wide `mean_sv`
            averages the layers that receive long-range links (cell layers 2 and up), or every layer if there are none.

    Raises:
        RangeError: If the probe batch is empty.
    """
    probe_batch = np.asarray(probe_batch, dtype=np.float64)
    if probe_batch.ndim != 2 or len(probe_batch) == 0:
        raise RangeError("The probe batch is empty", shape=list(probe_batch.shape))

    _, cache = forward(model, probe_batch)
    reports = []
    for g in range(1, len(model.layers)):
        layer = model.layers[g]
        d = model.activation_grad(cache.pre_activations[g], cache.activations[g])
        jacobians = d[:, :, None] * layer.weight[None, :, :]
        values = np.linalg.svd(jacobians, compute_uv=False)
        spectrum = randmat.SingularSpectrum(
            tuple(values.mean(axis=0).tolist()), float(values.mean()), float(np.mean(values ** 2)),
        )
        reports.append(LayerJacobian(g, layer.cell, layer.index, *layer.weight.shape, spectrum, spectrum.mean))

    shortcut_layers = [report.mean_sv for report in reports if report.cell_layer >= 2]
    summary = shortcut_layers or [report.mean_sv for report in reports]
    return JacobianReport(tuple(reports), float(np.mean(summary)))
# endregion


# region Training
@dataclass(frozen=True)
class TrainConfig:
    """
    Minibatch SGD hyperparameters.

    Args:
        epochs (int): Number of passes over the training set.
        batch_size (int): Samples per step.
        lr0 (float): Initial learning rate.
        schedule (str): "cosine" anneals per epoch from lr0 towards 0; "constant" keeps lr0.
        data_seed (int): Seed of the per-epoch shuffles.
    """
    epochs: int = 15
    batch_size: int = 128
    lr0: float = 0.1
    schedule: str = "cosine"
    data_seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise RangeError("Epochs and batch size must be positive", epochs=self.epochs,
                             batch_size=self.batch_size)
        if self.lr0 < 0:
            raise RangeError(f"Learning rate must be non-negative, got {self.lr0}", lr0=self.lr0)
        if self.schedule not in ("cosine", "constant"):
            raise RangeError(f"Unknown schedule {self.schedule!r}", schedule=self.schedule)

    @classproperty
    def desk(cls):
        return cls(epochs=15)

    @classproperty
    def full(cls):
        return cls(epochs=60)

    def learning_rate(self, epoch):
        if self.schedule == "constant":
            return self.lr0
        return 0.5 * self.lr0 * (1.0 + math.cos(math.pi * epoch / self.epochs))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        with reading("training config"):
            return cls(**data)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float


@dataclass
class TrainTrace:
    hyperparameters: dict
    epochs: List[EpochRecord] = field(default_factory=list)

    def write_csv(self, stream):
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for record in self.epochs:
            writer.writerow([record.epoch, record.train_loss, record.train_acc, record.test_acc])


def evaluate(model, dataset, chunk=4096):
    """The mean cross-entropy and accuracy of `model` on a dataset."""
    total_loss, correct = 0.0, 0
    for start in range(0, len(dataset.labels), chunk):
        features = dataset.features[start:start + chunk]
        labels = dataset.labels[start:start + chunk]
        logits, _ = forward(model, features)
        total_loss += cross_entropy(logits, labels) * len(labels)
        correct += int(np.sum(np.argmax(logits, axis=1) == labels))
    return total_loss / len(dataset.labels), correct / len(dataset.labels)


def _check_compatible(model, dataset):
    if dataset.features.shape[1] != model.spec.input_dim:
        raise ShapeError("Dataset features do not match the model input",
                         expected=model.spec.input_dim, got=dataset.features.shape[1])
    if dataset.n_classes > model.spec.output_dim:
        raise ShapeError("Dataset has more classes than the model outputs",
                         expected=model.spec.output_dim, got=dataset.n_classes)


def train(model, train_set, test_set, config=TrainConfig()):
    """
    Train `model` in place with minibatch SGD on the mean cross-entropy.

    Args:
        model (MlpModel): The model to train.
        train_set (Dataset): Training data.
        test_set (Dataset): Evaluated after every epoch.
        config (TrainConfig): Hyperparameters. The shuffle of epoch e uses the stream (data_seed, e).

    Returns:
        TrainTrace: One EpochRecord per completed epoch. `train_loss` and `train_acc` are accumulated over the
            minibatches of the epoch.

    Raises:
        DivergenceError: If a loss becomes NaN or infinite. `last_finite_epoch` is the last completed epoch.
    """
    _check_compatible(model, train_set)
    _check_compatible(model, test_set)

    hyperparameters = dict(config.to_dict(), topo_seed=model.topo_seed, init_seed=model.init_seed)
    trace = TrainTrace(hyperparameters)
    n = len(train_set.labels)

    for epoch in range(config.epochs):
        lr = config.learning_rate(epoch)
        order = generator(config.data_seed, epoch).permutation(n)
        epoch_loss, correct = 0.0, 0
        for start in range(0, n, config.batch_size):
            index = order[start:start + config.batch_size]
            labels = train_set.labels[index]
            logits, cache = forward(model, train_set.features[index])
            batch_loss = cross_entropy(logits, labels)
            if not math.isfinite(batch_loss):
                raise DivergenceError(f"Loss became {batch_loss} in epoch {epoch}", last_finite_epoch=epoch - 1)

            epoch_loss += batch_loss * len(index)
            correct += int(np.sum(np.argmax(logits, axis=1) == labels))

            if lr:
                for param, grad in zip(model.parameters(), backward(model, cache, labels).parameters()):
                    param -= lr * grad
                model.touch()

        _, test_acc = evaluate(model, test_set)
        record = EpochRecord(epoch, epoch_loss / n, correct / n, test_acc)
        trace.epochs.append(record)
        logger.info("Epoch %d: lr %.5f, train loss %.5f, train acc %.4f, test acc %.4f",
                    epoch, lr, record.train_loss, record.train_acc, record.test_acc)

    return trace
# endregion


# region Checkpoints
def save_checkpoint(model, path):
    """
    Write a JSON header line followed by every parameter as little-endian float64, in `parameters()` order, each
        array row-major.
    """
    blob = np.concatenate([param.ravel() for param in model.parameters()]).astype("<f8")
    header = {
        "spec": model.spec.to_dict(),
        "topo_seed": model.topo_seed,
        "init_seed": model.init_seed,
        "init": model.init.to_dict(),
        "n_values": int(blob.size),
    }
    with open(path, "wb") as wb:
        wb.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        wb.write(blob.tobytes())


def load_checkpoint(path):
    """Rebuild the model a checkpoint was saved from, realization included, and load its parameters."""
    with open(path, "rb") as rb:
        header = json.loads(rb.readline().decode("utf-8"))
        blob = np.frombuffer(rb.read(), dtype="<f8")

    model = build_model(ArchitectureSpec.from_dict(header["spec"]), header["topo_seed"], header["init_seed"],
                        InitScheme.from_dict(header["init"]))
    if blob.size != header["n_values"] or blob.size != model.param_count:
        raise ShapeError("Checkpoint size does not match its architecture", expected=model.param_count,
                         got=int(blob.size))

    offset = 0
    for param in model.parameters():
        param[...] = blob[offset:offset + param.size].reshape(param.shape)
        offset += param.size
    model.touch()
    return model
# endregion
