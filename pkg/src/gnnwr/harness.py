"""Cross-validated comparison of OLR, GWR and GNNWR.

Protocol: hold out a test share, split the rest into k folds, train every
model on k-1 folds and validate on the remaining one, merge the validation
predictions, pick each model's best fold by validation RMSE, evaluate that
fold's model on the test rows, and run the non-stationarity tests on the
best and worst GNNWR folds.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import synthgen
from .diagnostics import aicc, error_report, f1_test, f2_test, metric_panel, write_error_report
from .errors import ConfigError, GnnwrError
from .geodata import (
    TEST,
    Schema,
    apply_normalization,
    fit_normalization,
    format_float,
    ingest_csv,
    split_folds,
)
from .gnnwr import fit_gnnwr, hat_matrix, predict_gnnwr, save_bundle
from .gwr import KernelSpec, fit_gwr, golden_search_bandwidth, predict_gwr
from .olr import fit_olr, predict_olr
from .swnn import TrainConfig, hidden_layers

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

MODELS = ("olr", "gwr", "gnnwr")


@dataclass
class ExperimentConfig:
    """Everything that determines an experiment run.

    ``data`` is either ``{"csv": path, "schema": {...}}`` or
    ``{"synthetic": {"n": ..., "noise_sd": ..., "stationary": ..., "seed": ...}}``.
    """

    data: dict = field(default_factory=lambda: {"synthetic": {}})
    seed: int = 0
    test_frac: float = 0.15
    k: int = 10
    normalization: str = "min-max"
    gwr_family: str = "bisquare"
    gwr_lo: int = 100
    gwr_hi: int | None = None
    layers: tuple = (512, 128, 64, 16)
    dropout_keep: float = 0.9
    batchnorm: bool = True
    train: TrainConfig = field(default_factory=TrainConfig.full)
    alpha: float = 0.05
    f1_tail: str = "left"
    threads: int = 1

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        self.layers = tuple(int(w) for w in self.layers)
        if self.k < 2:
            raise ConfigError("k must be at least 2")
        if not 0 < self.test_frac < 1:
            raise ConfigError("test_frac must lie strictly between 0 and 1")
        if self.f1_tail not in ("left", "right"):
            raise ConfigError("f1_tail must be 'left' or 'right'")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        if not ("csv" in self.data or "synthetic" in self.data):
            raise ConfigError("data must name a 'csv' file or a 'synthetic' generator")

    @classmethod
    def desk(cls, seed=0, **overrides):
        """Laptop-scale profile: small network, short training, n=600 synthetic data."""
        base = dict(
            data={"synthetic": {"n": 600, "noise_sd": 1.7, "seed": seed}},
            seed=seed,
            gwr_lo=20,
            layers=(64, 16),
            train=TrainConfig.desk(seed=seed),
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        d = asdict(self)
        d["layers"] = list(self.layers)
        return d


_SECTION_KEYS = {
    "split": ("seed", "test_frac", "k", "normalization"),
    "gwr": ("gwr_family", "gwr_lo", "gwr_hi"),
    "gnnwr": ("layers", "dropout_keep", "batchnorm"),
    "diagnosis": ("alpha", "f1_tail"),
}


def load_config(path, overrides=()):
    """Read an experiment config from TOML.

    Top-level ``profile = "desk"`` starts from the desk-scale defaults.
    Sections: ``[data]``, ``[split]``, ``[gwr]`` (``family``, ``lo``, ``hi``),
    ``[gnnwr]`` (``layers``, ``dropout_keep``, ``batchnorm``), ``[train]``
    (TrainConfig fields), ``[diagnosis]`` (``alpha``, ``f1_tail``).
    ``overrides`` are ``"section.key=value"`` strings parsed as TOML values.
    """
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    for item in overrides:
        key, _, value = item.partition("=")
        if not _:
            raise ConfigError(f"override {item!r} is not key=value")
        parsed = parse_value(value)
        node = raw
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = parsed
    return config_from_mapping(raw, base_dir=Path(path).parent)


def parse_value(text):
    """A TOML scalar or array if ``text`` parses as one, else the raw string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def config_from_mapping(raw, base_dir=None):
    raw = dict(raw)
    profile = raw.pop("profile", "full")
    seed = raw.get("split", {}).get("seed", raw.get("seed", 0))
    if profile == "desk":
        cfg = ExperimentConfig.desk(seed=seed).to_dict()
    elif profile == "full":
        cfg = ExperimentConfig(seed=seed).to_dict()
    else:
        raise ConfigError(f"unknown profile {profile!r}")
    if "data" in raw:
        data = dict(raw.pop("data"))
        if "csv" in data and base_dir is not None and not Path(data["csv"]).is_absolute():
            data["csv"] = str(Path(base_dir) / data["csv"])
        cfg["data"] = data
    for section, keys in _SECTION_KEYS.items():
        for key, value in raw.pop(section, {}).items():
            name = key if key in keys else f"{section}_{key}"
            if name not in keys:
                raise ConfigError(f"unknown key {section}.{key}")
            cfg[name] = value
    if "train" in raw:
        cfg["train"] = {**cfg["train"], **raw.pop("train")}
    if "threads" in raw:
        cfg["threads"] = raw.pop("threads")
    raw.pop("seed", None)
    if raw:
        raise ConfigError(f"unknown config sections: {sorted(raw)}")
    return ExperimentConfig(**cfg)


def load_dataset(config):
    data = config.data
    if "csv" in data:
        schema = data.get("schema")
        if schema is None:
            raise ConfigError("csv data source needs a [data.schema] table")
        return ingest_csv(data["csv"], Schema.from_mapping(schema))
    syn = dict(data["synthetic"])
    spec = synthgen.desk_spec(
        seed=syn.get("seed", config.seed),
        n=syn.get("n", 600),
        noise_sd=syn.get("noise_sd", 1.7),
        stationary=syn.get("stationary", False),
    )
    return synthgen.generate(spec)[0]


def fold_seed(seed, fold):
    return int(np.random.SeedSequence([int(seed), int(fold)]).generate_state(1)[0])


@dataclass
class ModelFold:
    name: str
    train_ids: list
    train_metrics: dict | None = None
    val_pred: np.ndarray | None = None
    test_pred: np.ndarray | None = None
    val_rmse: float = math.nan
    info: dict = field(default_factory=dict)
    error: str | None = None


@dataclass
class FoldResult:
    fold: int
    train_ids: np.ndarray
    val_ids: np.ndarray
    y_val: np.ndarray
    models: dict
    gnnwr_model: object = None
    train_ds: object = None
    olr_rss: float = math.nan


def _train_panel(y, y_hat, trace):
    n = y.size
    rss = float(np.sum((y - y_hat) ** 2))
    try:
        score = aicc(n, rss / n, trace)
    except GnnwrError:
        score = math.nan
    return metric_panel(y, y_hat, aicc=score, warn=False).to_dict()


def _run_fold(ds, config, f, test_idx):
    train_idx = np.flatnonzero((ds.folds != f) & (ds.folds != TEST))
    val_idx = np.flatnonzero(ds.folds == f)
    train, val, test = ds.subset(train_idx), ds.subset(val_idx), ds.subset(test_idx)
    norm = fit_normalization(train, config.normalization)
    trn, van, tsn = (apply_normalization(d, norm) for d in (train, val, test))
    ids = [int(i) for i in train.row_ids]
    res = FoldResult(fold=f, train_ids=train.row_ids, val_ids=val.row_ids, y_val=val.y, models={})

    def finish(mf, fitted, trace, pv, pt):
        mf.train_metrics = _train_panel(trn.y, fitted, trace)
        mf.val_pred = norm.denormalize_y(pv)
        mf.test_pred = norm.denormalize_y(pt) if pt is not None else None
        mf.val_rmse = math.sqrt(float(np.mean((mf.val_pred - val.y) ** 2)))

    mf = ModelFold("olr", ids)
    try:
        olr = fit_olr(trn)
        res.olr_rss = olr.rss
        finish(mf, predict_olr(olr, trn.X), olr.hat_trace, predict_olr(olr, van.X), predict_olr(olr, tsn.X))
        mf.info = olr.to_dict()
    except GnnwrError as exc:
        mf.error = str(exc)
    res.models["olr"] = mf

    mf = ModelFold("gwr", ids)
    try:
        lo = max(config.gwr_lo, trn.p + 2)
        hi = trn.n - 1 if config.gwr_hi is None else min(config.gwr_hi, trn.n - 1)
        m, _ = golden_search_bandwidth(trn, config.gwr_family, min(lo, hi), hi)
        gwr = fit_gwr(trn, KernelSpec.adaptive(m, config.gwr_family))
        pt = predict_gwr(gwr, tsn, tsn.X) if tsn.n else None
        finish(mf, gwr.fitted, gwr.trace, predict_gwr(gwr, van, van.X), pt)
        mf.info = {**gwr.to_dict(), "neighbors": m}
    except GnnwrError as exc:
        mf.error = str(exc)
    res.models["gwr"] = mf

    mf = ModelFold("gnnwr", ids)
    try:
        tc = TrainConfig(**{**config.train.to_dict(), "seed": fold_seed(config.seed, f)})
        layers = hidden_layers(config.layers, config.batchnorm, config.dropout_keep)
        model = fit_gnnwr(trn, van, layers, tc)
        S = hat_matrix(model, trn)
        fitted = predict_gnnwr(model, trn, trn.X, denormalize=False)
        pt = predict_gnnwr(model, tsn, tsn.X, denormalize=False) if tsn.n else None
        finish(mf, fitted, float(np.trace(S)), predict_gnnwr(model, van, van.X, denormalize=False), pt)
        mf.info = {
            "best_step": model.history.best_step,
            "stopped_step": model.history.stopped_step,
            "stop_reason": model.history.reason,
            "best_val_loss": model.history.best_val,
            "olr_beta": model.olr_beta.tolist(),
            "seed": tc.seed,
            "hat_trace": float(np.trace(S)),
        }
        res.gnnwr_model = model
        res.train_ds = trn
    except GnnwrError as exc:
        mf.error = str(exc)
    res.models["gnnwr"] = mf
    return res


@dataclass
class ExperimentResult:
    config: dict
    split: dict
    folds: list
    merged: dict
    best_fold: dict
    test: dict
    diagnosis: dict
    failures: list
    merged_rows: dict
    test_rows: dict

    def to_dict(self):
        folds = []
        for fr in self.folds:
            folds.append(
                {
                    "fold": fr.fold,
                    "n_train": int(fr.train_ids.size),
                    "n_val": int(fr.val_ids.size),
                    "models": {
                        name: {
                            "train": mf.train_metrics,
                            "val_rmse": mf.val_rmse,
                            "info": mf.info,
                            "error": mf.error,
                        }
                        for name, mf in fr.models.items()
                    },
                }
            )
        return _jsonable(
            {
                "config": self.config,
                "split": self.split,
                "folds": folds,
                "merged_validation": self.merged,
                "best_fold": self.best_fold,
                "test": self.test,
                "diagnosis": self.diagnosis,
                "failures": self.failures,
            }
        )


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        obj = float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def assert_no_leakage(result):
    """Every validation/test row is predicted by a model that never trained on it."""
    test_ids = set(result.test_rows.get("row_id", []))
    for fr in result.folds:
        val = {int(i) for i in fr.val_ids}
        for name, mf in fr.models.items():
            train = set(mf.train_ids)
            if train & val:
                raise AssertionError(f"fold {fr.fold} {name}: validation rows in training set")
            if train & test_ids:
                raise AssertionError(f"fold {fr.fold} {name}: test rows in training set")
        if fr.gnnwr_model is not None:
            anchors = {int(i) for i in fr.gnnwr_model.anchor_ids}
            if anchors != set(fr.models["gnnwr"].train_ids) or anchors & (val | test_ids):
                raise AssertionError(f"fold {fr.fold}: GNNWR anchors do not match its training rows")
    return True


def _diagnose(fr, config):
    model, trn = fr.gnnwr_model, fr.train_ds
    S = hat_matrix(model, trn)
    fitted = S @ trn.y
    rss = float(np.sum((trn.y - fitted) ** 2))
    f1 = f1_test(rss, S, fr.olr_rss, trn.n, trn.p, config.alpha, config.f1_tail)
    f2 = [f2_test(model, trn, k, config.alpha, S=S).to_dict() for k in range(trn.p + 1)]
    return {"fold": fr.fold, "rss_model": rss, "rss_olr": fr.olr_rss, "f1": f1.to_dict(), "f2": f2}


def run_experiment(config, out_dir=None, dataset=None):
    """Run the full protocol; optionally write artifacts under ``out_dir``."""
    ds = load_dataset(config) if dataset is None else dataset
    ds = split_folds(ds, config.test_frac, config.k, config.seed)
    test_idx = np.flatnonzero(ds.folds == TEST)
    folds = list(range(config.k))
    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            fold_results = list(pool.map(lambda f: _run_fold(ds, config, f, test_idx), folds))
    else:
        fold_results = [_run_fold(ds, config, f, test_idx) for f in folds]
    fold_results.sort(key=lambda r: r.fold)

    failures = [
        {"fold": fr.fold, "model": name, "error": mf.error}
        for fr in fold_results
        for name, mf in fr.models.items()
        if mf.error
    ]
    for item in failures:
        log.warning("fold %d %s failed: %s", item["fold"], item["model"], item["error"])

    merged, merged_rows, best_fold, test, test_rows = {}, {}, {}, {}, {}
    val_ids = np.concatenate([fr.val_ids for fr in fold_results]) if fold_results else np.array([])
    order = np.argsort(val_ids, kind="stable")
    merged_rows["row_id"] = val_ids[order].astype(int).tolist()
    merged_rows["fold"] = np.concatenate(
        [np.full(fr.val_ids.size, fr.fold) for fr in fold_results]
    )[order].astype(int).tolist() if fold_results else []
    y_val = np.concatenate([fr.y_val for fr in fold_results])[order] if fold_results else np.array([])
    merged_rows["y"] = y_val
    test_rows["row_id"] = ds.row_ids[test_idx].astype(int).tolist()
    test_rows["y"] = ds.y[test_idx]
    for name in MODELS:
        ok = [fr for fr in fold_results if fr.models[name].error is None]
        if len(ok) == len(fold_results) and ok:
            pred = np.concatenate([fr.models[name].val_pred for fr in fold_results])[order]
            merged_rows[name] = pred
            merged[name] = metric_panel(y_val, pred).to_dict()
        if ok:
            best = min(ok, key=lambda fr: (fr.models[name].val_rmse, fr.fold))
            worst = max(ok, key=lambda fr: (fr.models[name].val_rmse, -fr.fold))
            best_fold[name] = {"best": best.fold, "worst": worst.fold}
            tp = best.models[name].test_pred
            if tp is not None and tp.size >= 2:
                test_rows[name] = tp
                test[name] = metric_panel(ds.y[test_idx], tp).to_dict()

    diagnosis = {}
    if "gnnwr" in best_fold:
        by_fold = {fr.fold: fr for fr in fold_results}
        for which in ("best", "worst"):
            fr = by_fold[best_fold["gnnwr"][which]]
            try:
                diagnosis[which] = _diagnose(fr, config)
            except GnnwrError as exc:
                diagnosis[which] = {"fold": fr.fold, "error": str(exc)}

    result = ExperimentResult(
        config=config.to_dict(),
        split=ds.split_meta,
        folds=fold_results,
        merged=merged,
        best_fold=best_fold,
        test=test,
        diagnosis=diagnosis,
        failures=failures,
        merged_rows=merged_rows,
        test_rows=test_rows,
    )
    assert_no_leakage(result)
    if out_dir is not None:
        write_results(result, out_dir)
    return result


def _write_table(path, rows, columns):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        n = len(rows[columns[0]])
        for i in range(n):
            out = []
            for c in columns:
                v = rows[c][i]
                out.append(str(v) if isinstance(v, (int, np.integer)) else format_float(v))
            w.writerow(out)


def _dump(path, obj):
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_results(result, out_dir):
    """Lay out ``folds/<f>/<model>.json``, CSV tables, diagnosis and summary files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for fr in result.folds:
        fdir = out / "folds" / str(fr.fold)
        fdir.mkdir(parents=True, exist_ok=True)
        for name, mf in fr.models.items():
            _dump(
                fdir / f"{name}.json",
                {"train": mf.train_metrics, "val_rmse": mf.val_rmse, "info": mf.info, "error": mf.error},
            )
        if fr.gnnwr_model is not None:
            save_bundle(fr.gnnwr_model, fdir / "gnnwr_bundle")
    cols = ["row_id", "fold", "y"] + [m for m in MODELS if m in result.merged_rows]
    _write_table(out / "merged_validation.csv", result.merged_rows, cols)
    cols = ["row_id", "y"] + [m for m in MODELS if m in result.test_rows]
    _write_table(out / "test.csv", result.test_rows, cols)
    _dump(out / "diagnosis.json", result.diagnosis)
    y = np.asarray(result.merged_rows.get("y", []), dtype=float)
    preds = {m: result.merged_rows[m] for m in ("gwr", "gnnwr") if m in result.merged_rows}
    if len(preds) == 2 and y.size and np.all(y != 0):
        # relative errors need non-zero targets; skipped otherwise
        write_error_report(error_report(y, preds), out / "errors")
    text, data = summarize(result)
    (out / "summary.md").write_text(text, encoding="utf-8")
    _dump(out / "summary.json", data)
    _dump(out / "result.json", result.to_dict())


def _fmt(v, digits=4):
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return "-"
    return f"{v:.{digits}f}"


def _panel_row(label, panel):
    return (
        f"| {label} | {_fmt(panel['r2'])} | {_fmt(panel['rmse'])} | {_fmt(panel['mae'])} | "
        f"{_fmt(panel['mape'] * 100 if panel['mape'] is not None else None, 2)} | "
        f"{_fmt(panel['pearson'])} | {_fmt(panel['mean_error'])} |"
    )


_PANEL_HEAD = "| Model | R2 | RMSE | MAE | MAPE % | Pearson | Mean error |\n|---|---|---|---|---|---|---|"


def summarize(result):
    """Markdown tables plus a machine-readable dict of the headline numbers."""
    data = {
        "n_folds": len(result.folds),
        "merged_validation": result.merged,
        "test": result.test,
        "best_fold": result.best_fold,
        "folds": [],
        "diagnosis": {},
        "failures": result.failures,
    }
    lines = ["# Experiment summary", ""]
    if not result.folds:
        lines.append("No folds completed.")
        return "\n".join(lines) + "\n", _jsonable(data)
    if result.merged:
        lines += ["## Merged validation set", "", _PANEL_HEAD]
        lines += [_panel_row(name.upper(), p) for name, p in result.merged.items()]
        lines.append("")
    lines += ["## Per-fold training and validation", ""]
    lines += ["| Fold | Model | Train R2 | Train AICc | Val RMSE |", "|---|---|---|---|---|"]
    for fr in result.folds:
        row = {"fold": fr.fold}
        for name, mf in fr.models.items():
            label = name.upper()
            if name == "gwr" and "neighbors" in mf.info:
                label = f"GWR({mf.info['neighbors']})"
            tm = mf.train_metrics or {}
            lines.append(
                f"| {fr.fold} | {label} | {_fmt(tm.get('r2'))} | {_fmt(tm.get('aicc'), 2)} | "
                f"{_fmt(mf.val_rmse)} |"
            )
            row[name] = {"train": mf.train_metrics, "val_rmse": mf.val_rmse, "label": label}
        data["folds"].append(row)
    lines.append("")
    if result.test:
        lines += ["## Test set (best fold per model)", "", _PANEL_HEAD]
        lines += [
            _panel_row(f"{name.upper()} (fold {result.best_fold[name]['best']})", p)
            for name, p in result.test.items()
        ]
        lines.append("")
    if result.diagnosis:
        lines += ["## Non-stationarity diagnosis (GNNWR)", ""]
        for which, diag in result.diagnosis.items():
            if "error" in diag:
                lines.append(f"- {which} fold {diag['fold']}: {diag['error']}")
                continue
            f1 = diag["f1"]
            lines.append(
                f"- {which} fold {diag['fold']}: F1 = {_fmt(f1['f1'])} "
                f"(df {_fmt(f1['df_num'], 2)}, {_fmt(f1['df_den'], 0)}; p = {f1['p_value']:.3g}; "
                f"{'significant' if f1['significant'] else 'not significant'})"
            )
            for f2 in diag["f2"]:
                lines.append(
                    f"  - {f2['name']}: F2 = {_fmt(f2['f2'], 2)}, p = {f2['p_value']:.3g}"
                    f"{' *' if f2['significant'] else ''}"
                )
            data["diagnosis"][which] = {
                "fold": diag["fold"],
                "f1": f1["f1"],
                "f1_significant": f1["significant"],
                "f2": {f2["name"]: f2["f2"] for f2 in diag["f2"]},
            }
        lines.append("")
    if result.failures:
        lines += ["## Failures", ""]
        lines += [f"- fold {x['fold']} {x['model']}: {x['error']}" for x in result.failures]
        lines.append("")
    return "\n".join(lines), _jsonable(data)
