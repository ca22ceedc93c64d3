"""Small feed-forward networks with hand-written reverse-mode gradients.

Tensors are plain numpy arrays. Every layer acts on the last axis except
``meanpool``, which averages over the time axis (second to last). A forward
pass returns a :class:`Tape` holding the activations; :func:`backward`
consumes it, so concurrent passes never share state.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import MalformedHeaderError, MissingArtifactError, PreconditionError, ShapeError

AFFINE = "affine"
TANH = "tanh"
RELU = "relu"
MEANPOOL = "meanpool"
L2NORM = "l2norm"
LOGSOFTMAX = "logsoftmax"

LAYER_KINDS = (AFFINE, TANH, RELU, MEANPOOL, L2NORM, LOGSOFTMAX)

MAGIC = b"VSDN"
FORMAT_VERSION = 1


@dataclass
class Layer:
    kind: str
    weight: np.ndarray | None = None  # (in, out)
    bias: np.ndarray | None = None  # (out,)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise PreconditionError(f"unknown layer kind {self.kind!r}")
        if self.kind == AFFINE:
            if self.weight is None or self.bias is None:
                raise PreconditionError("affine layer needs weight and bias")
            self.weight = np.asarray(self.weight, dtype=np.float64)
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
                raise ShapeError(f"affine weight {self.weight.shape} / bias {self.bias.shape} mismatch")
            if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
                raise PreconditionError("affine parameters must be finite")

    @property
    def has_params(self) -> bool:
        return self.kind == AFFINE

    def copy(self) -> "Layer":
        if self.has_params:
            return Layer(self.kind, self.weight.copy(), self.bias.copy())
        return Layer(self.kind)


class Network:
    def __init__(self, layers):
        self.layers = [layer if isinstance(layer, Layer) else Layer(*layer) for layer in layers]
        dims = [(i, l.weight.shape) for i, l in enumerate(self.layers) if l.has_params]
        for (i, a), (j, b) in zip(dims, dims[1:]):
            if a[1] != b[0]:
                raise ShapeError(f"layer {i} outputs {a[1]} features but layer {j} expects {b[0]}")

    def __repr__(self):
        parts = []
        for l in self.layers:
            parts.append(f"{l.kind}({l.weight.shape[0]}->{l.weight.shape[1]})" if l.has_params else l.kind)
        return f"Network[{', '.join(parts)}]"

    @property
    def params(self) -> dict:
        """Parameter store keyed by layer index."""
        return {i: {"weight": l.weight, "bias": l.bias} for i, l in enumerate(self.layers) if l.has_params}

    @property
    def input_dim(self) -> int | None:
        for l in self.layers:
            if l.has_params:
                return l.weight.shape[0]
        return None

    @property
    def output_dim(self) -> int | None:
        for l in reversed(self.layers):
            if l.has_params:
                return l.weight.shape[1]
        return None

    def copy(self) -> "Network":
        return Network([l.copy() for l in self.layers])

    def rounded(self) -> "Network":
        """Copy with parameters rounded to float32, i.e. exactly what a save/load round trip yields."""
        out = self.copy()
        for l in out.layers:
            if l.has_params:
                l.weight = l.weight.astype(np.float32).astype(np.float64)
                l.bias = l.bias.astype(np.float32).astype(np.float64)
        return out

    def slice(self, start: int, stop: int | None = None) -> "Network":
        return Network([l.copy() for l in self.layers[start:stop]])

    def __call__(self, x) -> np.ndarray:
        return forward(self, x).output

    def same_parameters(self, other: "Network") -> bool:
        if len(self.layers) != len(other.layers):
            return False
        for a, b in zip(self.layers, other.layers):
            if a.kind != b.kind:
                return False
            if a.has_params and not (np.array_equal(a.weight, b.weight) and np.array_equal(a.bias, b.bias)):
                return False
        return True


@dataclass
class Tape:
    network_id: int
    inputs: list = field(default_factory=list)  # input to each layer
    output: np.ndarray | None = None


@dataclass
class GradRecord:
    input: np.ndarray
    params: dict  # {layer index: {"weight": dW, "bias": db}}


def _logsoftmax(x):
    m = np.max(x, axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def _l2norm(x):
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


def forward(net: Network, x) -> Tape:
    x = np.asarray(x, dtype=np.float64)
    tape = Tape(id(net))
    for i, layer in enumerate(net.layers):
        tape.inputs.append(x)
        k = layer.kind
        if k == AFFINE:
            if x.shape[-1] != layer.weight.shape[0]:
                raise ShapeError(f"layer {i} expects {layer.weight.shape[0]} features, got {x.shape[-1]}")
            x = x @ layer.weight + layer.bias
        elif k == TANH:
            x = np.tanh(x)
        elif k == RELU:
            x = np.maximum(x, 0.0)
        elif k == MEANPOOL:
            if x.ndim < 2:
                raise ShapeError(f"layer {i} mean-pools over time but input has shape {x.shape}")
            x = x.mean(axis=-2)
        elif k == L2NORM:
            x = _l2norm(x)
        elif k == LOGSOFTMAX:
            x = _logsoftmax(x)
    tape.output = x
    return tape


def backward(net: Network, tape: Tape | None, upstream) -> GradRecord:
    """Pull ``upstream`` (d loss / d output) back through the network."""
    if tape is None or tape.output is None or len(tape.inputs) != len(net.layers):
        raise PreconditionError("backward called without a matching forward pass")
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != tape.output.shape:
        raise ShapeError(f"upstream shape {g.shape} does not match output shape {tape.output.shape}")
    grads = {}
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        x = tape.inputs[i]
        k = layer.kind
        if k == AFFINE:
            x2 = x.reshape(-1, x.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            grads[i] = {"weight": x2.T @ g2, "bias": g2.sum(axis=0)}
            g = g @ layer.weight.T
        elif k == TANH:
            g = g * (1.0 - np.tanh(x) ** 2)
        elif k == RELU:
            g = g * (x > 0)
        elif k == MEANPOOL:
            t = x.shape[-2]
            g = np.repeat(np.expand_dims(g, -2), t, axis=-2) / t
        elif k == L2NORM:
            n = np.linalg.norm(x, axis=-1, keepdims=True)
            y = np.divide(x, n, out=np.zeros_like(x), where=n > 0)
            proj = g - y * np.sum(y * g, axis=-1, keepdims=True)
            g = np.divide(proj, n, out=np.zeros_like(x), where=n > 0)
        elif k == LOGSOFTMAX:
            p = np.exp(_logsoftmax(x))
            g = g - p * np.sum(g, axis=-1, keepdims=True)
    return GradRecord(g, dict(sorted(grads.items())))


def vjp(net: Network, x, upstream) -> tuple[np.ndarray, GradRecord]:
    tape = forward(net, x)
    return tape.output, backward(net, tape, upstream)


# ---------------------------------------------------------------- construction

def affine(n_in: int, n_out: int, rng: np.random.Generator, scale: float | None = None) -> Layer:
    scale = np.sqrt(1.0 / n_in) if scale is None else scale
    return Layer(AFFINE, rng.standard_normal((n_in, n_out)) * scale, np.zeros(n_out))


def mlp(sizes, rng: np.random.Generator, activation: str = TANH, final: tuple = ()) -> Network:
    """Affine layers of the given sizes joined by ``activation``; ``final`` kinds are appended."""
    layers = []
    for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
        layers.append(affine(a, b, rng))
        if i < len(sizes) - 2:
            layers.append(Layer(activation))
    layers.extend(Layer(k) for k in final)
    return Network(layers)


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckEntry:
    name: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float
    ok: bool


@dataclass
class GradCheckReport:
    entries: list

    @property
    def passed(self) -> bool:
        return all(e.ok for e in self.entries)

    @property
    def failures(self) -> list:
        return [e for e in self.entries if not e.ok]

    @property
    def max_rel_error(self) -> float:
        return max((e.rel_error for e in self.entries), default=0.0)


def relative_error(a, n, floor=1e-4) -> float:
    return float(abs(a - n) / max(abs(a), abs(n), floor))


def grad_check(net: Network, x, step: float = 1e-5, tol: float = 1e-4, seed: int = 0, backward_fn=None) -> GradCheckReport:
    """Compare analytic gradients with central differences for every input coordinate and parameter.

    The scalar probed is ``sum(output * r)`` for a seeded standard-normal ``r``.
    ``backward_fn`` replaces :func:`backward` (used for fault injection).
    """
    if step <= 0:
        raise PreconditionError("step must be positive")
    backward_fn = backward_fn or backward
    x = np.array(x, dtype=np.float64)
    tape = forward(net, x)
    r = np.random.default_rng(seed).standard_normal(tape.output.shape)
    rec = backward_fn(net, tape, r)

    def loss(model, inp):
        return float(np.sum(forward(model, inp).output * r))

    entries = []
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xp[idx] += step
        xm = x.copy()
        xm[idx] -= step
        num = (loss(net, xp) - loss(net, xm)) / (2 * step)
        err = relative_error(rec.input[idx], num)
        entries.append(GradCheckEntry("input", idx, float(rec.input[idx]), num, err, err < tol))
    probe = net.copy()
    for i, layer in enumerate(probe.layers):
        if not layer.has_params:
            continue
        for pname in ("weight", "bias"):
            arr = getattr(layer, pname)
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + step
                lp = loss(probe, x)
                arr[idx] = orig - step
                lm = loss(probe, x)
                arr[idx] = orig
                num = (lp - lm) / (2 * step)
                a = float(rec.params[i][pname][idx])
                err = relative_error(a, num)
                entries.append(GradCheckEntry(f"layer{i}.{pname}", idx, a, num, err, err < tol))
    return GradCheckReport(entries)


# ---------------------------------------------------------------- training

def nll_loss(log_probs: np.ndarray, labels: np.ndarray) -> float:
    return float(-np.mean(log_probs[np.arange(labels.shape[0]), labels]))


def train_classifier(
    net: Network,
    inputs,
    labels,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int | None = None,
    frozen=(),
) -> tuple[Network, list]:
    """Plain minibatch gradient descent on mean negative log-likelihood.

    ``net`` must end in a log-softmax layer. Returns the trained copy
    (parameters rounded to float32 so saved files reproduce it exactly) and
    the full-dataset loss before training and after each epoch.
    """
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.shape[0] == 0:
        raise PreconditionError("empty dataset")
    if epochs < 1:
        raise PreconditionError("epochs must be >= 1")
    if net.layers[-1].kind != LOGSOFTMAX:
        raise PreconditionError("classifier must end in a log-softmax layer")
    n_classes = net.output_dim
    if y.min() < 0 or y.max() >= n_classes:
        raise PreconditionError(f"labels must lie in [0, {n_classes})")
    rng = np.random.default_rng(seed)
    model = net.copy()
    frozen = set(frozen)
    bs = batch_size or x.shape[0]
    curve = [nll_loss(model(x), y)]
    for _ in range(epochs):
        order = rng.permutation(x.shape[0])
        for start in range(0, x.shape[0], bs):
            idx = order[start : start + bs]
            tape = forward(model, x[idx])
            up = np.zeros_like(tape.output)
            up[np.arange(idx.shape[0]), y[idx]] = -1.0 / idx.shape[0]
            rec = backward(model, tape, up)
            for i, g in rec.params.items():
                if i in frozen:
                    continue
                model.layers[i].weight -= lr * g["weight"]
                model.layers[i].bias -= lr * g["bias"]
        curve.append(nll_loss(model(x), y))
    return model.rounded(), curve


def accuracy(net: Network, inputs, labels) -> float:
    pred = np.argmax(net(np.asarray(inputs, dtype=np.float64)), axis=-1)
    return float(np.mean(pred == np.asarray(labels)))


# ---------------------------------------------------------------- persistence

_KIND_CODES = {k: i for i, k in enumerate(LAYER_KINDS)}


def save_network(net: Network, path) -> None:
    """Write the binary parameter file and a ``.manifest`` text sidecar."""
    path = os.fspath(path)
    chunks = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(net.layers))]
    lines = [f"format {MAGIC.decode()} v{FORMAT_VERSION}", f"layers {len(net.layers)}"]
    for i, layer in enumerate(net.layers):
        chunks.append(struct.pack("<BB", _KIND_CODES[layer.kind], int(layer.has_params)))
        if layer.has_params:
            n_in, n_out = layer.weight.shape
            chunks.append(struct.pack("<II", n_in, n_out))
            chunks.append(layer.weight.astype("<f4").tobytes())
            chunks.append(layer.bias.astype("<f4").tobytes())
            lines.append(f"{i} {layer.kind} weight {n_in}x{n_out} bias {n_out}")
        else:
            lines.append(f"{i} {layer.kind}")
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))
    with open(path + ".manifest", "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_network(path) -> Network:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise MissingArtifactError(f"network file not found: {path}")
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC or len(blob) < 10:
        raise MalformedHeaderError(f"{path}: not a network parameter file")
    version, n_layers = struct.unpack("<HI", blob[4:10])
    if version != FORMAT_VERSION:
        raise MalformedHeaderError(f"{path}: unsupported format version {version}")
    pos = 10
    layers = []
    try:
        for _ in range(n_layers):
            code, has = struct.unpack("<BB", blob[pos : pos + 2])
            pos += 2
            kind = LAYER_KINDS[code]
            if has:
                n_in, n_out = struct.unpack("<II", blob[pos : pos + 8])
                pos += 8
                w = np.frombuffer(blob, dtype="<f4", count=n_in * n_out, offset=pos).reshape(n_in, n_out)
                pos += 4 * n_in * n_out
                b = np.frombuffer(blob, dtype="<f4", count=n_out, offset=pos)
                pos += 4 * n_out
                layers.append(Layer(kind, w.astype(np.float64), b.astype(np.float64)))
            else:
                layers.append(Layer(kind))
    except (struct.error, ValueError, IndexError) as exc:
        raise MalformedHeaderError(f"{path}: truncated or corrupt parameter file ({exc})") from exc
    return Network(layers)
