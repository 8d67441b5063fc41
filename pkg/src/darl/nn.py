"""Dense multilayer perceptrons in plain numpy.

Instances are stored as *columns*: a batch of ``n`` inputs of dimension
``d`` is a ``(d, n)`` array.  Every layer computes ``W @ a + b`` with
``W`` of shape ``(out, in)``.

Gradients are plain lists of arrays ordered like :meth:`ParamSet.arrays`,
i.e. ``[dW0, db0, dW1, db1, ...]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import DimensionError, IntegrityError, NumericError

HIDDEN_ACTIVATIONS = ("relu", "tanh")
OUTPUT_ACTIVATIONS = ("linear", "softmax")
LOSS_KINDS = ("cross_entropy", "squared_error")

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a fully connected network.

    Parameters
    ----------
    layer_widths : tuple of int
        Input width followed by the width of every layer, so a net with
        ``L`` weight matrices has ``L + 1`` widths.
    hidden_activation : {'relu', 'tanh'}
    output_activation : {'linear', 'softmax'}
    """

    layer_widths: tuple
    hidden_activation: str = "relu"
    output_activation: str = "linear"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError("an MlpSpec needs at least two widths")
        if min(widths) < 1:
            raise ValueError(f"layer widths must be >= 1, got {widths}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"hidden_activation must be one of {HIDDEN_ACTIVATIONS}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"output_activation must be one of {OUTPUT_ACTIVATIONS}")

    @property
    def n_layers(self):
        return len(self.layer_widths) - 1

    @property
    def in_dim(self):
        return self.layer_widths[0]

    @property
    def out_dim(self):
        return self.layer_widths[-1]


@dataclass
class ParamSet:
    """Weights, biases and Adam moments of one network."""

    weights: list
    biases: list
    adam_m: list = field(default=None)
    adam_v: list = field(default=None)
    step_count: int = 0

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise DimensionError("weights and biases have different lengths")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise DimensionError(f"layer {k}: weight {w.shape} and bias {b.shape} do not match")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise DimensionError(
                    f"layer {k} expects {w.shape[1]} inputs but layer {k - 1} "
                    f"produces {self.weights[k - 1].shape[0]}"
                )
        if self.adam_m is None:
            self.adam_m = [np.zeros_like(a) for a in self.arrays()]
        if self.adam_v is None:
            self.adam_v = [np.zeros_like(a) for a in self.arrays()]
        for name, moments in (("adam_m", self.adam_m), ("adam_v", self.adam_v)):
            if [m.shape for m in moments] != [a.shape for a in self.arrays()]:
                raise DimensionError(f"{name} does not match parameter shapes")
        if self.step_count < 0:
            raise ValueError("step_count must be >= 0")

    def arrays(self):
        """Parameters interleaved as ``[W0, b0, W1, b1, ...]`` (views, not copies)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @property
    def widths(self):
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    def copy(self):
        return ParamSet(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            adam_m=[m.copy() for m in self.adam_m],
            adam_v=[v.copy() for v in self.adam_v],
            step_count=self.step_count,
        )

    def equals(self, other):
        """Bit-exact comparison of parameters, moments and step count."""
        pairs = zip(
            self.arrays() + self.adam_m + self.adam_v,
            other.arrays() + other.adam_m + other.adam_v,
        )
        return self.step_count == other.step_count and all(
            a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in pairs
        )


def init_params(spec, rng):
    """Glorot-uniform weights and zero biases for ``spec``."""
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return ParamSet(weights, biases)


def zeros_like_grads(params):
    return [np.zeros_like(a) for a in params.arrays()]


def softmax(logits, axis=0):
    """Numerically stable softmax along ``axis`` (columns by default)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _activate(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activation_grad(z, a, kind):
    if kind == "relu":
        return (z > 0).astype(np.float64)
    return 1.0 - a * a


def _check_input(spec, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] != spec.in_dim:
        raise DimensionError(f"input has shape {x.shape}, expected ({spec.in_dim}, n)")
    return x


def forward(params, spec, x):
    """Run the network on a batch of column inputs.

    Returns
    -------
    output : ndarray of shape (out_dim, n)
    cache : dict
        Inputs, pre-activations and activations of every layer; enough
        for :func:`backward`.
    """
    x = _check_input(spec, x)
    if params.widths != spec.layer_widths:
        raise DimensionError(f"params have widths {params.widths}, spec says {spec.layer_widths}")
    acts = [x]
    pre = []
    a = x
    last = spec.n_layers - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        # non-finite values are reported below with the layer index
        with np.errstate(invalid="ignore", over="ignore"):
            z = w @ a + b[:, None]
        pre.append(z)
        if k < last:
            a = _activate(z, spec.hidden_activation)
        elif spec.output_activation == "softmax":
            a = softmax(z)
        else:
            a = z
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite activation in layer {k}", layer=k)
        acts.append(a)
    return a, {"acts": acts, "pre": pre}


def backward(params, spec, cache, dlogits):
    """Backpropagate a gradient on the last layer's pre-activation.

    ``dlogits`` is dL/dz for the final affine output ``z`` (before any
    softmax).  Use :func:`output_delta` to obtain it from a loss.

    Returns
    -------
    grads : list of ndarray
        Ordered like :meth:`ParamSet.arrays`.
    dinput : ndarray
        Gradient with respect to the network input.
    """
    acts, pre = cache["acts"], cache["pre"]
    grads = [None] * (2 * spec.n_layers)
    delta = dlogits
    for k in range(spec.n_layers - 1, -1, -1):
        grads[2 * k] = delta @ acts[k].T
        grads[2 * k + 1] = delta.sum(axis=1)
        dprev = params.weights[k].T @ delta
        if k > 0:
            delta = dprev * _activation_grad(pre[k - 1], acts[k], spec.hidden_activation)
    return grads, dprev


def output_delta(spec, output, targets, loss_kind, mask=None):
    """Loss value and dL/dlogits for a batch of outputs.

    Cross-entropy is only defined for softmax heads.  Squared error is the
    mean over the batch of ``sum_i mask_i (y_i - t_i)^2``; ``mask`` (same
    shape as ``output``) restricts which output slots contribute.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != output.shape:
        raise DimensionError(f"targets {targets.shape} do not match output {output.shape}")
    n = output.shape[1]
    if loss_kind == "cross_entropy":
        if spec.output_activation != "softmax":
            raise ValueError("cross_entropy requires a softmax output layer")
        logp = np.log(np.maximum(output, PROB_FLOOR))
        loss = -np.sum(targets * logp) / n
        delta = (output * targets.sum(axis=0, keepdims=True) - targets) / n
    elif loss_kind == "squared_error":
        if spec.output_activation != "linear":
            raise ValueError("squared_error requires a linear output layer")
        diff = output - targets
        if mask is not None:
            diff = diff * mask
        loss = np.sum(diff * diff) / n
        delta = 2.0 * diff / n
    else:
        raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")
    if not np.isfinite(loss):
        raise NumericError("non-finite loss", layer=spec.n_layers - 1)
    return float(loss), delta


def loss_and_grad(params, spec, x, targets, loss_kind, mask=None):
    """Mean batch loss and its gradient with respect to every parameter."""
    out, cache = forward(params, spec, x)
    loss, delta = output_delta(spec, out, targets, loss_kind, mask)
    grads, _ = backward(params, spec, cache, delta)
    return loss, grads


def loss_value(params, spec, x, targets, loss_kind, mask=None):
    out, _ = forward(params, spec, x)
    return output_delta(spec, out, targets, loss_kind, mask)[0]


def adam_step(params, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, applied in place.  Returns ``params``."""
    if lr <= 0:
        raise ValueError("lr must be > 0")
    arrays = params.arrays()
    if len(grads) != len(arrays) or any(g.shape != a.shape for g, a in zip(grads, arrays)):
        raise DimensionError("gradients do not match parameter shapes")
    params.step_count += 1
    t = params.step_count
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for a, g, m, v in zip(arrays, grads, params.adam_m, params.adam_v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        a -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


def finite_diff(fn, arrays, h=1e-5):
    """Central-difference gradient of the scalar ``fn()`` w.r.t. ``arrays``.

    Entries are perturbed in place and restored, so ``fn`` must read the
    arrays it is differentiated against.
    """
    if h <= 0:
        raise ValueError("h must be > 0")
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = fn()
            flat[i] = old - h
            down = fn()
            flat[i] = old
            gflat[i] = (up - down) / (2.0 * h)
        out.append(g)
    return out


def finite_diff_grad(params, spec, x, targets, loss_kind, h=1e-5, mask=None):
    """Numeric counterpart of :func:`loss_and_grad` (test oracle)."""
    return finite_diff(
        lambda: loss_value(params, spec, x, targets, loss_kind, mask), params.arrays(), h
    )


def max_relative_error(analytic, numeric, floor=1e-6):
    """Largest entrywise ``|a - n| / max(|a|, |n|, floor)`` over two gradient lists."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


# -- checkpoints -----------------------------------------------------------

_MANIFEST_KEYS = ("network", "widths", "hidden_activation", "output_activation", "step_count", "blob")


def save_params(params, spec, directory, name):
    """Write ``<name>.manifest`` and ``<name>.bin`` into ``directory``.

    The blob holds little-endian float64 values in manifest order: all
    weights and biases (interleaved by layer), then the Adam first moments,
    then the second moments.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob = directory / f"{name}.bin"
    values = np.concatenate([a.ravel() for a in params.arrays() + params.adam_m + params.adam_v])
    blob.write_bytes(values.astype("<f8").tobytes())
    lines = [
        f"network {name}",
        "widths " + " ".join(str(w) for w in spec.layer_widths),
        f"hidden_activation {spec.hidden_activation}",
        f"output_activation {spec.output_activation}",
        f"step_count {params.step_count}",
        f"blob {blob.name} {values.size}",
    ]
    (directory / f"{name}.manifest").write_text("\n".join(lines) + "\n")


def load_params(directory, name):
    """Inverse of :func:`save_params`.  Returns ``(params, spec)``.

    Raises :class:`IntegrityError` without returning anything partial when
    the manifest is malformed or the blob size disagrees with the shapes.
    """
    directory = Path(directory)
    manifest = directory / f"{name}.manifest"
    try:
        fields = dict(line.split(" ", 1) for line in manifest.read_text().splitlines() if line)
    except (OSError, ValueError) as exc:
        raise IntegrityError(f"{manifest}: unreadable manifest ({exc})") from exc
    missing = [k for k in _MANIFEST_KEYS if k not in fields]
    if missing:
        raise IntegrityError(f"{manifest}: missing keys {missing}")
    try:
        spec = MlpSpec(
            tuple(int(w) for w in fields["widths"].split()),
            fields["hidden_activation"],
            fields["output_activation"],
        )
        step_count = int(fields["step_count"])
        blob_name, declared = fields["blob"].split()
        declared = int(declared)
    except ValueError as exc:
        raise IntegrityError(f"{manifest}: {exc}") from exc
    shapes = []
    for fan_in, fan_out in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
        shapes.extend(((fan_out, fan_in), (fan_out,)))
    expected = 3 * sum(int(np.prod(s)) for s in shapes)
    if declared != expected:
        raise IntegrityError(
            f"{manifest}: blob declares {declared} values but widths {spec.layer_widths} need {expected}"
        )
    raw = (directory / blob_name).read_bytes()
    if len(raw) != expected * 8:
        raise IntegrityError(
            f"{directory / blob_name}: {len(raw)} bytes, widths {spec.layer_widths} need {expected * 8}"
        )
    values = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    chunks, pos = [], 0
    for _ in range(3):
        for s in shapes:
            size = int(np.prod(s))
            chunks.append(values[pos:pos + size].reshape(s).copy())
            pos += size
    n = len(shapes)
    arrays, m, v = chunks[:n], chunks[n:2 * n], chunks[2 * n:]
    params = ParamSet(arrays[0::2], arrays[1::2], m, v, step_count)
    return params, spec
