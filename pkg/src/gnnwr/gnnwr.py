"""GNNWR: a network maps distances-to-anchors to per-location coefficient weights.

Prediction at location i is ``sum_k w_k(i) * beta_k * x_ik`` where ``beta`` is
the global OLR estimate on the training design and ``w(i)`` is the network
output for the distance vector from i to every training anchor.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular

from .errors import ConfigError, DatasetError, ShapeError, StateError
from .geodata import TEST, NormalizationParams, SpatialDataset, distance_matrix, fit_normalization, format_float
from .olr import lstsq_qr
from .swnn import (
    History,
    LayerSpec,
    MiniBatches,
    TrainConfig,
    checkpoint_dict,
    forward,
    hidden_layers,
    init_net,
    net_from_dict,
    train_loop,
)

MANIFEST_FORMAT = "gnnwr-bundle/1"
_INFER_CHUNK = 4096


def olr_projector(X):
    """(X^T X)^{-1} X^T, shape (p+1, n), from the pivoted QR factor of X."""
    _, Q, R, perm = lstsq_qr(X, np.zeros(X.shape[0]))
    A = np.empty((X.shape[1], X.shape[0]))
    A[perm] = solve_triangular(R, Q.T)
    return A


@dataclass
class GnnwrModel:
    net: object
    anchors: np.ndarray
    olr_beta: np.ndarray
    dist_scale: float
    names: tuple
    norm: NormalizationParams | None = None
    layers: list = field(default_factory=list)
    config: TrainConfig | None = None
    X_train: np.ndarray | None = None
    y_train: np.ndarray | None = None
    anchor_ids: np.ndarray | None = None
    history: History | None = None

    @property
    def p(self):
        return len(self.olr_beta) - 1

    @property
    def n_anchors(self):
        return self.anchors.shape[0]

    def anchor_fingerprint(self):
        return hashlib.sha256(np.ascontiguousarray(self.anchors).tobytes()).hexdigest()

    def check_training_rows(self, ds_train):
        if ds_train.coords is None or ds_train.coords.shape != self.anchors.shape:
            raise StateError("training dataset does not match the model's anchor set")
        if not np.array_equal(ds_train.coords, self.anchors):
            raise StateError("training rows are not in the model's anchor order")
        if ds_train.p != self.p:
            raise ShapeError(f"model has p={self.p} covariates, dataset has {ds_train.p}")

    def training_weights(self, ds_train):
        self.check_training_rows(ds_train)
        return swnn_weights(self, ds_train.coords)

    def olr_projector(self, ds_train):
        self.check_training_rows(ds_train)
        return olr_projector(ds_train.X)

    def hat_matrix(self, ds_train):
        return hat_matrix(self, ds_train)


def _coords(points):
    if isinstance(points, SpatialDataset):
        if points.coords is None:
            raise StateError("query dataset is not projected")
        return points.coords
    return np.asarray(points, dtype=float)


def swnn_weights(model, query_points, anchors=None):
    """Coefficient weights, one row per query point (diagonal of W(u_i, v_i)).

    Passing ``anchors`` checks that the caller's anchor order matches the
    model's; the network input layer is tied to that order.
    """
    if anchors is not None:
        anchors = np.asarray(anchors, dtype=float)
        if anchors.shape != model.anchors.shape or not np.array_equal(anchors, model.anchors):
            raise StateError("anchor order differs from the one the network was trained with")
    q = _coords(query_points)
    out = np.empty((q.shape[0], model.p + 1))
    for lo in range(0, q.shape[0], _INFER_CHUNK):
        D = distance_matrix(q[lo : lo + _INFER_CHUNK], model.anchors) / model.dist_scale
        out[lo : lo + _INFER_CHUNK], _ = forward(model.net, D, "infer")
    return out


def predict_gnnwr(model, query_points, X_new, denormalize=True):
    """Predictions for rows of ``X_new`` (scaled with the model's normalization).

    Returned in raw target units when the model carries normalization
    parameters and ``denormalize`` is true.
    """
    X_new = np.asarray(X_new, dtype=float)
    if X_new.ndim != 2 or X_new.shape[1] != model.p + 1:
        raise ShapeError(f"X_new must have {model.p + 1} columns, got {X_new.shape}")
    W = swnn_weights(model, query_points)
    if W.shape[0] != X_new.shape[0]:
        raise ShapeError("query points and X_new differ in row count")
    y_hat = np.sum(W * model.olr_beta * X_new, axis=1)
    if denormalize and model.norm is not None:
        return model.norm.denormalize_y(y_hat)
    return y_hat


def hat_matrix(model, ds_train):
    """S with row i = x_i^T W(u_i, v_i) (X^T X)^{-1} X^T on the training rows."""
    if ds_train.X.shape[1] != model.p + 1:
        raise ShapeError(f"dataset has {ds_train.X.shape[1]} design columns, model expects {model.p + 1}")
    weights = model.training_weights(ds_train)
    A = olr_projector(ds_train.X)
    return (weights * ds_train.X) @ A


def _rmse_loss(out, payload):
    XB, yb = payload
    r = np.sum(out * XB, axis=1) - yb
    loss = math.sqrt(float(r @ r) / r.size)
    if loss == 0.0:
        return loss, None
    return loss, (r / (r.size * loss))[:, None] * XB


def fit_gnnwr(train, val, layers, config, init_weight=1.0):
    """Train on already-scaled datasets ``train`` and ``val``.

    Distances are divided by the largest training pairwise distance. The
    output bias starts at ``init_weight`` so the untrained model sits near
    the global OLR fit.
    """
    if train.n < train.p + 2:
        raise DatasetError(f"need at least p+2={train.p + 2} training rows, got {train.n}")
    if train.coords is None or val.coords is None:
        raise StateError("datasets must be projected")
    beta, *_ = lstsq_qr(train.X, train.y, names=["intercept", *train.names])
    D_train = distance_matrix(train, train)
    scale = float(D_train.max())
    if not scale > 0:
        raise DatasetError("training points all coincide")
    D_train /= scale
    D_val = distance_matrix(val, train) / scale
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    net = init_net(layers, train.n, train.p + 1, seed=seeds[0])
    net.params[f"{len(net.specs) - 1}.b"][:] = init_weight
    XB_train = train.X * beta
    XB_val = val.X * beta

    def batches():
        for idx in MiniBatches(train.n, config.batch_size, np.random.default_rng(seeds[1])):
            yield D_train[idx], (XB_train[idx], train.y[idx])

    def val_eval(n):
        out, _ = forward(n, D_val, "infer")
        r = np.sum(out * XB_val, axis=1) - val.y
        return math.sqrt(float(r @ r) / r.size)

    net, hist = train_loop(net, batches(), _rmse_loss, val_eval, config)
    return GnnwrModel(
        net=net,
        anchors=train.coords.copy(),
        olr_beta=beta,
        dist_scale=scale,
        names=tuple(train.names),
        norm=train.norm,
        layers=list(layers),
        config=config,
        X_train=train.X.copy(),
        y_train=train.y.copy(),
        anchor_ids=train.row_ids.copy(),
        history=hist,
    )


def train_gnnwr(ds, val_fold, layers=None, config=None, normalization="min-max", init_weight=1.0):
    """Train on every fold except ``val_fold`` and early-stop on ``val_fold``.

    TEST rows are ignored. When ``ds`` is unscaled, scaling is fitted on the
    training folds only and applied to the validation fold.
    """
    if ds.folds is None:
        raise DatasetError("dataset has no fold labels; run split_folds first")
    if val_fold not in set(ds.folds.tolist()) or val_fold == TEST:
        raise DatasetError(f"validation fold {val_fold} not present")
    layers = hidden_layers([512, 128, 64, 16]) if layers is None else layers
    config = TrainConfig.full() if config is None else config
    train_idx = np.flatnonzero((ds.folds != val_fold) & (ds.folds != TEST))
    val_idx = np.flatnonzero(ds.folds == val_fold)
    train, val = ds.subset(train_idx), ds.subset(val_idx)
    if ds.norm is None and normalization != "none":
        norm = fit_normalization(train, normalization)
        train = replace(train, X=norm.normalize_X(train.X), y=norm.normalize_y(train.y), norm=norm)
        val = replace(val, X=norm.normalize_X(val.X), y=norm.normalize_y(val.y), norm=norm)
    return fit_gnnwr(train, val, layers, config, init_weight=init_weight)


@dataclass
class CoefficientSurface:
    coords: np.ndarray
    beta: np.ndarray
    names: tuple

    def summary(self):
        """Mean, max, min and sample standard deviation of each coefficient column."""
        out = {}
        for j, name in enumerate(("intercept", *self.names)):
            col = self.beta[:, j]
            out[name] = {
                "mean": float(np.mean(col)),
                "max": float(np.max(col)),
                "min": float(np.min(col)),
                "sd": float(np.std(col, ddof=1)) if col.size > 1 else 0.0,
            }
        return out

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "intercept", *self.names])
            for (cx, cy), row in zip(self.coords, self.beta):
                w.writerow([format_float(cx), format_float(cy), *map(format_float, row)])


def export_surfaces(model, points, X=None):
    """Effective coefficients w_k(i) * beta_k at each point, in scaled units.

    ``X`` is only used to check the design width.
    """
    coords = _coords(points)
    if X is not None and np.asarray(X).shape[1] != model.p + 1:
        raise ShapeError(f"X must have {model.p + 1} columns")
    W = swnn_weights(model, coords)
    return CoefficientSurface(coords=coords.copy(), beta=W * model.olr_beta, names=model.names)


def permute_anchors(model, perm):
    """Same model with anchors reordered and the input layer permuted to match."""
    perm = np.asarray(perm)
    d = checkpoint_dict(model.net)
    net = net_from_dict(d)
    net.params["0.W"] = net.params["0.W"][perm]
    if "0.W" in net.adam_m:
        net.adam_m["0.W"] = net.adam_m["0.W"][perm]
        net.adam_v["0.W"] = net.adam_v["0.W"][perm]
    return replace(
        model,
        net=net,
        anchors=model.anchors[perm],
        X_train=None if model.X_train is None else model.X_train[perm],
        y_train=None if model.y_train is None else model.y_train[perm],
        anchor_ids=None if model.anchor_ids is None else model.anchor_ids[perm],
    )


def training_dataset(model):
    """Rebuild the (scaled) training dataset stored in a model."""
    if model.X_train is None or model.y_train is None:
        raise StateError("model carries no training design")
    return SpatialDataset(
        X=model.X_train,
        y=model.y_train,
        names=model.names,
        coords=model.anchors,
        norm=model.norm,
        row_ids=model.anchor_ids,
    )


def save_bundle(model, directory):
    """Write ``checkpoint.json`` and ``manifest.json`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "checkpoint.json", "w", encoding="utf-8") as fh:
        json.dump(checkpoint_dict(model.net), fh)
    manifest = {
        "format": MANIFEST_FORMAT,
        "names": list(model.names),
        "anchors": model.anchors.tolist(),
        "anchor_ids": None if model.anchor_ids is None else [int(i) for i in model.anchor_ids],
        "olr_beta": model.olr_beta.tolist(),
        "dist_scale": model.dist_scale,
        "normalization": None if model.norm is None else model.norm.to_dict(),
        "layers": [asdict(s) for s in model.layers],
        "config": None if model.config is None else model.config.to_dict(),
        "X_train": None if model.X_train is None else model.X_train.tolist(),
        "y_train": None if model.y_train is None else model.y_train.tolist(),
        "data_fingerprint": _fingerprint(model),
        "history": None if model.history is None else {
            "best_step": model.history.best_step,
            "best_val": model.history.best_val,
            "stopped_step": model.history.stopped_step,
            "reason": model.history.reason,
        },
    }
    with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True)


def _fingerprint(model):
    h = hashlib.sha256()
    for arr in (model.anchors, model.X_train, model.y_train):
        if arr is not None:
            h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def load_bundle(directory):
    directory = Path(directory)
    with open(directory / "manifest.json", encoding="utf-8") as fh:
        m = json.load(fh)
    if m.get("format") != MANIFEST_FORMAT:
        raise StateError(f"unsupported bundle format {m.get('format')!r}")
    with open(directory / "checkpoint.json", encoding="utf-8") as fh:
        net = net_from_dict(json.load(fh))
    model = GnnwrModel(
        net=net,
        anchors=np.asarray(m["anchors"], dtype=float),
        olr_beta=np.asarray(m["olr_beta"], dtype=float),
        dist_scale=float(m["dist_scale"]),
        names=tuple(m["names"]),
        norm=None if m["normalization"] is None else NormalizationParams.from_dict(m["normalization"]),
        layers=[LayerSpec(**s) for s in m["layers"]],
        config=None if m["config"] is None else TrainConfig(**m["config"]),
        X_train=None if m["X_train"] is None else np.asarray(m["X_train"], dtype=float),
        y_train=None if m["y_train"] is None else np.asarray(m["y_train"], dtype=float),
        anchor_ids=None if m["anchor_ids"] is None else np.asarray(m["anchor_ids"]),
    )
    if m.get("data_fingerprint") and m["data_fingerprint"] != _fingerprint(model):
        raise StateError("bundle data fingerprint does not match its contents")
    return model


def pin_weights(model, value=1.0):
    """Force the network to output the constant ``value`` for every weight.

    Zeroes the output layer's weight matrix and sets its bias, so the
    output is exactly ``value`` whatever the hidden activations are.
    """
    last = len(model.net.specs) - 1
    model.net.params[f"{last}.W"][...] = 0.0
    model.net.params[f"{last}.b"][...] = value
    model.net.version += 1
    return model


def untrained_model(train, layers=(), seed=0, init_weight=1.0):
    """A GNNWR model with an untrained network; used for tests and inspection."""
    if train.coords is None:
        raise StateError("dataset must be projected")
    beta, *_ = lstsq_qr(train.X, train.y, names=["intercept", *train.names])
    D = distance_matrix(train, train)
    scale = float(D.max()) or 1.0
    layers = list(layers)
    if any(not isinstance(s, LayerSpec) for s in layers):
        raise ConfigError("layers must be LayerSpec instances")
    net = init_net(layers, train.n, train.p + 1, seed=seed)
    net.params[f"{len(net.specs) - 1}.b"][:] = init_weight
    return GnnwrModel(
        net=net,
        anchors=train.coords.copy(),
        olr_beta=beta,
        dist_scale=scale,
        names=tuple(train.names),
        norm=train.norm,
        layers=layers,
        X_train=train.X.copy(),
        y_train=train.y.copy(),
        anchor_ids=train.row_ids.copy(),
    )
