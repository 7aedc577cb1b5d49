"""A small numpy feed-forward network: dense, batch norm, PReLU, dropout, Adam.

Hidden layers run affine -> batch norm -> PReLU -> dropout. The output layer
is a plain affine map. A dense layer followed by batch norm carries no bias
(the batch-norm shift makes it redundant).
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import BatchNormError, ConfigError, StateError, TrainingAbort

CHECKPOINT_FORMAT = "swnn-checkpoint/1"
BN_MOMENTUM = 0.9
BN_EPS = 1e-5
PRELU_INIT = 0.25


@dataclass(frozen=True)
class LayerSpec:
    width: int
    batchnorm: bool = True
    dropout_keep: float = 0.9
    activation: str = "prelu"

    def __post_init__(self):
        if int(self.width) != self.width or self.width < 1:
            raise ConfigError(f"layer width must be a positive integer, got {self.width}")
        if not 0.0 < self.dropout_keep <= 1.0:
            raise ConfigError(f"dropout keep probability must lie in (0, 1], got {self.dropout_keep}")
        if self.activation not in ("prelu", "linear"):
            raise ConfigError(f"activation must be 'prelu' or 'linear', got {self.activation!r}")


def hidden_layers(widths, batchnorm=True, dropout_keep=0.9):
    return [LayerSpec(int(w), batchnorm, dropout_keep, "prelu") for w in widths]


@dataclass
class TrainConfig:
    """Optimizer and stopping settings. One "epoch" is one mini-batch step."""

    learning_rate: float = 10 ** -2.95
    adam_beta1: float = 0.8
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 128
    max_epochs: int = 90_000
    warmup_epochs: int = 30_000
    patience_epochs: int = 9_000
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if not self.adam_eps > 0:
            raise ConfigError("adam_eps must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 (batch norm)")
        if self.max_epochs < 1 or self.warmup_epochs < 0 or self.patience_epochs < 1:
            raise ConfigError("need max_epochs >= 1, warmup_epochs >= 0, patience_epochs >= 1")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be at least 1")

    @classmethod
    def full(cls, seed=0):
        return cls(seed=seed)

    @classmethod
    def desk(cls, seed=0):
        return cls(batch_size=64, max_epochs=3000, warmup_epochs=500, patience_epochs=300, seed=seed)

    def to_dict(self):
        return asdict(self)


@dataclass
class Net:
    specs: list
    input_width: int
    params: dict
    buffers: dict
    rng: np.random.Generator
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    step: int = 0
    version: int = 0

    @property
    def output_width(self):
        return self.specs[-1].width

    def param_names(self):
        return list(self.params)

    def copy_state(self):
        return {k: v.copy() for k, v in self.params.items()}, {k: v.copy() for k, v in self.buffers.items()}

    def load_state(self, state):
        params, buffers = state
        for k, v in params.items():
            self.params[k][...] = v
        for k, v in buffers.items():
            self.buffers[k][...] = v
        self.version += 1


def init_net(layers, input_width, output_width, seed):
    """He-normal weights, zero biases, PReLU slopes 0.25, batch norm gamma=1 beta=0."""
    if int(input_width) < 1 or int(output_width) < 1:
        raise ConfigError("input and output widths must be positive")
    specs = list(layers) + [LayerSpec(int(output_width), False, 1.0, "linear")]
    rng = np.random.default_rng(seed)
    params, buffers = {}, {}
    fan_in = int(input_width)
    for l, spec in enumerate(specs):
        params[f"{l}.W"] = rng.standard_normal((fan_in, spec.width)) * math.sqrt(2.0 / fan_in)
        if spec.batchnorm:
            params[f"{l}.gamma"] = np.ones(spec.width)
            params[f"{l}.beta"] = np.zeros(spec.width)
            buffers[f"{l}.mean"] = np.zeros(spec.width)
            buffers[f"{l}.var"] = np.ones(spec.width)
        else:
            params[f"{l}.b"] = np.zeros(spec.width)
        if spec.activation == "prelu":
            params[f"{l}.alpha"] = np.full(spec.width, PRELU_INIT)
        fan_in = spec.width
    return Net(specs=specs, input_width=int(input_width), params=params, buffers=buffers, rng=rng)


@dataclass
class Cache:
    mode: str
    version: int
    layers: list


def forward(net, batch, mode="infer"):
    """Run the network; returns ``(output, cache)``.

    ``mode="train"`` uses batch statistics (and updates the running ones) and
    applies inverted dropout; ``"infer"`` uses running statistics, no dropout.
    """
    h = np.asarray(batch, dtype=float)
    if h.ndim != 2 or h.shape[1] != net.input_width:
        raise ConfigError(f"batch must have {net.input_width} columns, got shape {h.shape}")
    train = mode == "train"
    if mode not in ("train", "infer"):
        raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
    if train and h.shape[0] < 2 and any(s.batchnorm for s in net.specs):
        raise BatchNormError("train-mode batch norm needs at least 2 rows")
    P = net.params
    caches = []
    for l, spec in enumerate(net.specs):
        c = {"h": h}
        z = h @ P[f"{l}.W"]
        if spec.batchnorm:
            if train:
                mu = z.mean(axis=0)
                var = z.var(axis=0)
                nb = z.shape[0]
                net.buffers[f"{l}.mean"] *= BN_MOMENTUM
                net.buffers[f"{l}.mean"] += (1 - BN_MOMENTUM) * mu
                net.buffers[f"{l}.var"] *= BN_MOMENTUM
                net.buffers[f"{l}.var"] += (1 - BN_MOMENTUM) * var * nb / (nb - 1)
            else:
                mu = net.buffers[f"{l}.mean"]
                var = net.buffers[f"{l}.var"]
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            zhat = (z - mu) * inv_std
            c["zhat"] = zhat
            c["inv_std"] = inv_std
            u = zhat * P[f"{l}.gamma"] + P[f"{l}.beta"]
        else:
            u = z + P[f"{l}.b"]
        if spec.activation == "prelu":
            c["u"] = u
            a = np.where(u > 0, u, P[f"{l}.alpha"] * u)
        else:
            a = u
        if train and spec.dropout_keep < 1.0:
            mask = (net.rng.random(a.shape) < spec.dropout_keep) / spec.dropout_keep
            c["mask"] = mask
            a = a * mask
        caches.append(c)
        h = a
    return h, Cache(mode=mode, version=net.version, layers=caches)


def backward(net, cache, loss_grad):
    """Gradients of the loss for every parameter, given d(loss)/d(output)."""
    if cache.version != net.version:
        raise StateError("activation cache is stale: parameters changed since the forward pass")
    if cache.mode != "train":
        raise StateError("backward needs activations from a train-mode forward pass")
    P = net.params
    grads = {}
    g = np.asarray(loss_grad, dtype=float)
    for l in range(len(net.specs) - 1, -1, -1):
        spec = net.specs[l]
        c = cache.layers[l]
        if "mask" in c:
            g = g * c["mask"]
        if spec.activation == "prelu":
            u = c["u"]
            pos = u > 0
            grads[f"{l}.alpha"] = np.sum(np.where(pos, 0.0, u * g), axis=0)
            g = np.where(pos, g, P[f"{l}.alpha"] * g)
        if spec.batchnorm:
            zhat = c["zhat"]
            grads[f"{l}.gamma"] = np.sum(g * zhat, axis=0)
            grads[f"{l}.beta"] = np.sum(g, axis=0)
            gz = g * P[f"{l}.gamma"]
            nb = gz.shape[0]
            g = c["inv_std"] / nb * (nb * gz - gz.sum(axis=0) - zhat * np.sum(gz * zhat, axis=0))
        else:
            grads[f"{l}.b"] = np.sum(g, axis=0)
        grads[f"{l}.W"] = c["h"].T @ g
        if l > 0:
            g = g @ P[f"{l}.W"].T
    return grads


def adam_step(net, grads, config):
    """One bias-corrected Adam update, in place; returns the net."""
    for name, gr in grads.items():
        if not np.all(np.isfinite(gr)):
            raise TrainingAbort(f"non-finite gradient for parameter {name} at step {net.step + 1}")
    net.step += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    c1 = 1.0 - b1**net.step
    c2 = 1.0 - b2**net.step
    for name, gr in grads.items():
        m = net.adam_m.get(name)
        if m is None:
            m = net.adam_m[name] = np.zeros_like(gr)
            net.adam_v[name] = np.zeros_like(gr)
        v = net.adam_v[name]
        m *= b1
        m += (1 - b1) * gr
        v *= b2
        v += (1 - b2) * gr * gr
        net.params[name] -= config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
    net.version += 1
    return net


@dataclass
class History:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_steps: list = field(default_factory=list)
    best_step: int = 0
    best_val: float = math.inf
    stopped_step: int = 0
    reason: str = ""

    def to_dict(self):
        return asdict(self)


def train_loop(net, batches, loss_fn, val_eval, config):
    """Mini-batch training with validation early stopping.

    ``batches`` yields ``(inputs, payload)``; ``loss_fn(output, payload)``
    returns ``(loss, d_loss/d_output)``, with a ``None`` gradient meaning
    "skip this step"; ``val_eval(net)`` returns the validation loss.

    After ``warmup_epochs`` steps, training stops once the validation loss
    has not improved for ``patience_epochs`` steps. The net is left holding
    the parameters of the best validation step.
    """
    hist = History()
    best_state = net.copy_state()
    it = iter(batches)
    step = 0
    for step in range(1, config.max_epochs + 1):
        xb, payload = next(it)
        out, cache = forward(net, xb, "train")
        loss, dout = loss_fn(out, payload)
        loss = float(loss)
        if not math.isfinite(loss):
            hist.reason = f"non-finite training loss at step {step}"
            break
        hist.train_loss.append(loss)
        if dout is not None:
            try:
                adam_step(net, backward(net, cache, dout), config)
            except TrainingAbort as exc:
                hist.reason = str(exc)
                break
        if step % config.eval_every == 0 or step == config.max_epochs:
            val = float(val_eval(net))
            hist.val_loss.append(val)
            hist.val_steps.append(step)
            if not math.isfinite(val):
                hist.reason = f"non-finite validation loss at step {step}"
                break
            if val < hist.best_val:
                hist.best_val = val
                hist.best_step = step
                best_state = net.copy_state()
        if step > config.warmup_epochs and step - hist.best_step >= config.patience_epochs:
            hist.reason = "early stop"
            break
    else:
        hist.reason = "max epochs"
    hist.stopped_step = step
    net.load_state(best_state)
    return net, hist


class MiniBatches:
    """Endless shuffled mini-batches of row indices.

    Each pass over the rows is a fresh permutation; a trailing batch smaller
    than 2 rows is folded into the one before it.
    """

    def __init__(self, n, batch_size, rng):
        if n < 2:
            raise ConfigError("need at least 2 rows to form mini-batches")
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng

    def __iter__(self):
        while True:
            perm = self.rng.permutation(self.n)
            bounds = list(range(0, self.n, self.batch_size)) + [self.n]
            if len(bounds) > 2 and bounds[-1] - bounds[-2] < 2:
                del bounds[-2]
            for lo, hi in zip(bounds[:-1], bounds[1:]):
                yield perm[lo:hi]


def _arr(a):
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _unarr(d):
    return np.asarray(d["data"], dtype=float).reshape(d["shape"])


def checkpoint_dict(net):
    return {
        "format": CHECKPOINT_FORMAT,
        "input_width": net.input_width,
        "layers": [asdict(s) for s in net.specs],
        "params": {k: _arr(v) for k, v in net.params.items()},
        "buffers": {k: _arr(v) for k, v in net.buffers.items()},
        "adam_m": {k: _arr(v) for k, v in net.adam_m.items()},
        "adam_v": {k: _arr(v) for k, v in net.adam_v.items()},
        "step": net.step,
        "rng": net.rng.bit_generator.state,
    }


def net_from_dict(d):
    if d.get("format") != CHECKPOINT_FORMAT:
        raise StateError(f"unsupported checkpoint format {d.get('format')!r}")
    rng = np.random.default_rng()
    rng.bit_generator.state = d["rng"]
    return Net(
        specs=[LayerSpec(**s) for s in d["layers"]],
        input_width=int(d["input_width"]),
        params={k: _unarr(v) for k, v in d["params"].items()},
        buffers={k: _unarr(v) for k, v in d["buffers"].items()},
        rng=rng,
        adam_m={k: _unarr(v) for k, v in d["adam_m"].items()},
        adam_v={k: _unarr(v) for k, v in d["adam_v"].items()},
        step=int(d["step"]),
    )


def save_checkpoint(net, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint_dict(net), fh)


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        return net_from_dict(json.load(fh))


def clone(net):
    return copy.deepcopy(net)
