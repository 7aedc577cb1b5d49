"""Point-referenced tabular data: ingestion, projection, scaling, distances, splits."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    DatasetError,
    DomainError,
    NormalizationError,
    ProjectionStateError,
    SchemaError,
    SplitError,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

TEST = -1

# WGS84
WGS84_A = 6378137.0
WGS84_F = 1 / 298.257223563
UTM_K0 = 0.9996
UTM_FALSE_EASTING = 500000.0
UTM_FALSE_NORTHING_SOUTH = 10000000.0

# Shenzhen residential listing profile. NB is accepted by the schema but left
# out of the default regression because the reported models use nine covariates.
SHENZHEN_COVARIATES = ("AB", "NPS", "MF", "GR", "PR", "SD", "QAPS", "NSS", "DSS")
SHENZHEN_OPTIONAL = ("NB",)


@dataclass(frozen=True)
class GeoPoint:
    lon: float | None = None
    lat: float | None = None
    x: float | None = None
    y: float | None = None

    def __post_init__(self):
        if self.lon is not None and not -180.0 <= self.lon <= 180.0:
            raise DomainError(f"longitude {self.lon} outside [-180, 180]")
        if self.lat is not None and not -90.0 <= self.lat <= 90.0:
            raise DomainError(f"latitude {self.lat} outside [-90, 90]")

    @property
    def projected(self):
        return self.x is not None and self.y is not None

    def project(self, zone):
        if self.projected:
            raise ProjectionStateError("point is already projected")
        if self.lon is None or self.lat is None:
            raise ProjectionStateError("point has no geographic coordinates")
        x, y = project_utm(self.lon, self.lat, zone)
        return replace(self, x=float(x), y=float(y))


@dataclass(frozen=True)
class Schema:
    """Column mapping from semantic role to CSV header name."""

    target: str
    covariates: tuple[str, ...]
    x: str | None = None
    y: str | None = None
    lon: str | None = None
    lat: str | None = None
    zone: int | None = None
    id: str | None = None

    def __post_init__(self):
        if not self.target:
            raise SchemaError("schema must name a target column")
        if not self.covariates:
            raise SchemaError("schema must name at least one covariate")
        has_xy = self.x is not None and self.y is not None
        has_ll = self.lon is not None and self.lat is not None
        if not (has_xy or has_ll):
            raise SchemaError("schema must name coordinate columns (x/y or lon/lat)")

    @classmethod
    def from_mapping(cls, mapping):
        mapping = dict(mapping)
        covs = mapping.pop("covariates", None)
        if isinstance(covs, str):
            covs = [c.strip() for c in covs.split(",") if c.strip()]
        known = {"target", "x", "y", "lon", "lat", "zone", "id"}
        unknown = set(mapping) - known
        if unknown:
            raise SchemaError(f"unknown schema keys: {sorted(unknown)}")
        if "target" not in mapping:
            raise SchemaError("schema must name a target column")
        return cls(covariates=tuple(covs or ()), **mapping)

    def to_mapping(self):
        d = {k: v for k, v in asdict(self).items() if v is not None}
        d["covariates"] = list(self.covariates)
        return d

    @classmethod
    def shenzhen(cls, include_nb=False, zone=50):
        covs = SHENZHEN_COVARIATES + (SHENZHEN_OPTIONAL if include_nb else ())
        return cls(target="Price", covariates=covs, lon="lon", lat="lat", zone=zone)


def load_schema(path):
    """Read a schema from a TOML file (either top level or a ``[schema]`` table)."""
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    return Schema.from_mapping(data.get("schema", data))


@dataclass(frozen=True)
class NormalizationParams:
    """Per-column affine scaling: ``stored = (raw - a) / b``.

    ``x_a``/``x_b`` cover the p covariates (the intercept is never scaled);
    ``y_a``/``y_b`` cover the target.
    """

    kind: str
    x_a: np.ndarray
    x_b: np.ndarray
    y_a: float
    y_b: float

    def normalize_X(self, X):
        X = np.array(X, dtype=float, copy=True)
        X[:, 1:] = (X[:, 1:] - self.x_a) / self.x_b
        return X

    def denormalize_X(self, X):
        X = np.array(X, dtype=float, copy=True)
        X[:, 1:] = X[:, 1:] * self.x_b + self.x_a
        return X

    def normalize_y(self, y):
        return (np.asarray(y, dtype=float) - self.y_a) / self.y_b

    def denormalize_y(self, y):
        return np.asarray(y, dtype=float) * self.y_b + self.y_a

    def to_dict(self):
        return {
            "kind": self.kind,
            "x_a": self.x_a.tolist(),
            "x_b": self.x_b.tolist(),
            "y_a": self.y_a,
            "y_b": self.y_b,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            kind=d["kind"],
            x_a=np.asarray(d["x_a"], dtype=float),
            x_b=np.asarray(d["x_b"], dtype=float),
            y_a=float(d["y_a"]),
            y_b=float(d["y_b"]),
        )

    @classmethod
    def identity(cls, p):
        return cls("none", np.zeros(p), np.ones(p), 0.0, 1.0)


@dataclass
class SpatialDataset:
    X: np.ndarray
    y: np.ndarray
    names: tuple[str, ...]
    coords: np.ndarray | None = None
    lonlat: np.ndarray | None = None
    norm: NormalizationParams | None = None
    folds: np.ndarray | None = None
    row_ids: np.ndarray | None = None
    rejected: list = field(default_factory=list)
    split_meta: dict | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        n = self.X.shape[0]
        if self.X.ndim != 2 or self.X.shape[1] != len(self.names) + 1:
            raise DatasetError(
                f"design matrix must be n x (p+1) with p={len(self.names)}, got {self.X.shape}"
            )
        if self.y.shape != (n,):
            raise DatasetError(f"target length {self.y.shape} does not match n={n}")
        if not np.all(self.X[:, 0] == 1.0):
            raise DatasetError("first design column must be the all-ones intercept")
        if n < self.p + 2:
            raise DatasetError(f"need at least p+2={self.p + 2} rows, got {n}")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise DatasetError("design matrix or target contains non-finite values")
        if self.row_ids is None:
            self.row_ids = np.arange(n)

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.X.shape[1] - 1

    @property
    def projected(self):
        return self.coords is not None

    def points(self):
        out = []
        for i in range(self.n):
            lon = lat = x = y = None
            if self.lonlat is not None:
                lon, lat = map(float, self.lonlat[i])
            if self.coords is not None:
                x, y = map(float, self.coords[i])
            out.append(GeoPoint(lon, lat, x, y))
        return out

    def subset(self, idx):
        idx = np.asarray(idx)
        return replace(
            self,
            X=self.X[idx],
            y=self.y[idx],
            coords=None if self.coords is None else self.coords[idx],
            lonlat=None if self.lonlat is None else self.lonlat[idx],
            folds=None if self.folds is None else self.folds[idx],
            row_ids=self.row_ids[idx],
            rejected=[],
        )

    def fingerprint(self):
        """Stable hash of the numeric content and row identities."""
        h = hashlib.sha256()
        for arr in (self.X, self.y, self.row_ids, self.coords):
            if arr is not None:
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def _parse_float(text):
    text = text.strip()
    if not text:
        raise ValueError("empty cell")
    v = float(text)
    if not math.isfinite(v):
        raise ValueError(f"non-finite value {text!r}")
    return v


def ingest_csv(path, schema):
    """Read a CSV into a :class:`SpatialDataset`.

    Rows with empty or non-numeric cells in any used column are skipped and
    listed in ``dataset.rejected`` as ``(row_number, reason)``, where
    ``row_number`` counts data rows from 1 (the header is row 0).
    """
    if not isinstance(schema, Schema):
        schema = Schema.from_mapping(schema)
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"no such file: {path}")
    geographic = schema.x is None or schema.y is None
    coord_cols = [schema.lon, schema.lat] if geographic else [schema.x, schema.y]
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        needed = [schema.target, *schema.covariates, *coord_cols]
        missing = [c for c in needed if c not in header]
        if missing:
            raise SchemaError(f"missing columns in {path.name}: {missing}")
        rows, coords, targets, ids, rejected = [], [], [], [], []
        for rowno, rec in enumerate(reader, start=1):
            try:
                vals = []
                for c in schema.covariates:
                    try:
                        vals.append(_parse_float(rec[c] or ""))
                    except ValueError as exc:
                        raise ValueError(f"column {c}: {exc}") from None
                try:
                    t = _parse_float(rec[schema.target] or "")
                except ValueError as exc:
                    raise ValueError(f"column {schema.target}: {exc}") from None
                cc = []
                for c in coord_cols:
                    try:
                        cc.append(_parse_float(rec[c] or ""))
                    except ValueError as exc:
                        raise ValueError(f"column {c}: {exc}") from None
                if geographic:
                    GeoPoint(lon=cc[0], lat=cc[1])
            except (ValueError, DomainError) as exc:
                rejected.append((rowno, str(exc)))
                continue
            rows.append(vals)
            targets.append(t)
            coords.append(cc)
            ids.append(rowno)
    p = len(schema.covariates)
    if len(rows) < p + 2:
        raise DatasetError(f"only {len(rows)} valid rows; need at least p+2={p + 2}")
    X = np.column_stack([np.ones(len(rows)), np.asarray(rows, dtype=float)])
    cc = np.asarray(coords, dtype=float)
    ds = SpatialDataset(
        X=X,
        y=np.asarray(targets, dtype=float),
        names=tuple(schema.covariates),
        coords=None if geographic else cc,
        lonlat=cc if geographic else None,
        row_ids=np.asarray(ids),
        rejected=rejected,
    )
    if geographic and schema.zone is not None:
        ds = project_dataset(ds, schema.zone)
    return ds


def _kruger_alpha(n):
    # Series coefficients for the Gauss-Krüger forward map, 6th order in n.
    n2, n3, n4, n5, n6 = n**2, n**3, n**4, n**5, n**6
    return (
        n / 2 - 2 * n2 / 3 + 5 * n3 / 16 + 41 * n4 / 180 - 127 * n5 / 288 + 7891 * n6 / 37800,
        13 * n2 / 48 - 3 * n3 / 5 + 557 * n4 / 1440 + 281 * n5 / 630 - 1983433 * n6 / 1935360,
        61 * n3 / 240 - 103 * n4 / 140 + 15061 * n5 / 26880 + 167603 * n6 / 181440,
        49561 * n4 / 161280 - 179 * n5 / 168 + 6601661 * n6 / 7257600,
        34729 * n5 / 80640 - 3418889 * n6 / 1995840,
        212378941 * n6 / 319334400,
    )


def project_utm(lon, lat, zone):
    """Forward UTM on the WGS84 ellipsoid. Accepts scalars or arrays.

    Southern-hemisphere latitudes get the usual 10 000 km false northing.
    """
    lon = np.asarray(lon, dtype=float)
    lat = np.asarray(lat, dtype=float)
    if not isinstance(zone, (int, np.integer)) or not 1 <= zone <= 60:
        raise DomainError(f"UTM zone must be an integer in 1..60, got {zone!r}")
    if np.any(~np.isfinite(lat)) or np.any((lat <= -80.0) | (lat >= 84.0)):
        raise DomainError("latitude must lie in (-80, 84) for UTM")
    if np.any(~np.isfinite(lon)) or np.any((lon < -180.0) | (lon > 180.0)):
        raise DomainError("longitude must lie in [-180, 180]")
    f = WGS84_F
    n = f / (2 - f)
    big_a = WGS84_A / (1 + n) * (1 + n**2 / 4 + n**4 / 64 + n**6 / 256)
    e = math.sqrt(f * (2 - f))
    lon0 = math.radians(6 * zone - 183)
    phi = np.radians(lat)
    lam = np.radians(lon) - lon0
    lam = (lam + math.pi) % (2 * math.pi) - math.pi
    sphi = np.sin(phi)
    t = np.sinh(np.arctanh(sphi) - e * np.arctanh(e * sphi))
    xi_p = np.arctan2(t, np.cos(lam))
    eta_p = np.arctanh(np.sin(lam) / np.sqrt(1 + t * t))
    xi = xi_p.copy()
    eta = eta_p.copy()
    for j, a_j in enumerate(_kruger_alpha(n), start=1):
        xi = xi + a_j * np.sin(2 * j * xi_p) * np.cosh(2 * j * eta_p)
        eta = eta + a_j * np.cos(2 * j * xi_p) * np.sinh(2 * j * eta_p)
    x = UTM_FALSE_EASTING + UTM_K0 * big_a * eta
    y = UTM_K0 * big_a * xi
    y = np.where(lat < 0, y + UTM_FALSE_NORTHING_SOUTH, y)
    if x.ndim == 0:
        return float(x), float(y)
    return x, y


def project_dataset(ds, zone):
    if ds.projected:
        raise ProjectionStateError("dataset is already projected; refusing to project twice")
    if ds.lonlat is None:
        raise ProjectionStateError("dataset has no geographic coordinates to project")
    x, y = project_utm(ds.lonlat[:, 0], ds.lonlat[:, 1], zone)
    return replace(ds, coords=np.column_stack([x, y]))


_SCHOOL_POINTS = {
    "junior-high": {"ordinary": 1.0, "district": 2.0, "city": 3.0, "provincial": 4.0},
    "elementary": {"ordinary": 1.5, "district": 2.5, "city": 3.5, "provincial": 4.5},
}


def school_quality_score(schools):
    """Score of the best school available to a listing; 0 when there is none."""
    best = 0.0
    for level, tier in schools:
        if level not in _SCHOOL_POINTS:
            raise DomainError(f"unknown school level {level!r}")
        points = _SCHOOL_POINTS[level]
        if tier not in points:
            raise DomainError(f"unknown key tier {tier!r}")
        best = max(best, points[tier])
    return best


def _column_params(col, kind, name):
    if kind == "min-max":
        a, b = float(col.min()), float(col.max() - col.min())
    elif kind == "z-score":
        a, b = float(col.mean()), float(col.std())
    elif kind == "none":
        return 0.0, 1.0
    else:
        raise NormalizationError(f"unknown normalization kind {kind!r}")
    if not b > 0:
        raise NormalizationError(f"column {name!r} is constant; cannot apply {kind} scaling")
    return a, b


def fit_normalization(ds, kind="min-max"):
    params = [_column_params(ds.X[:, j + 1], kind, nm) for j, nm in enumerate(ds.names)]
    y_a, y_b = _column_params(ds.y, kind, "target")
    return NormalizationParams(
        kind=kind,
        x_a=np.array([a for a, _ in params]),
        x_b=np.array([b for _, b in params]),
        y_a=y_a,
        y_b=y_b,
    )


def apply_normalization(ds, norm):
    if ds.norm is not None:
        raise NormalizationError("dataset is already normalized")
    return replace(ds, X=norm.normalize_X(ds.X), y=norm.normalize_y(ds.y), norm=norm)


def normalize(ds, kind="min-max"):
    """Rescale covariates and target; the intercept column is left alone."""
    return apply_normalization(ds, fit_normalization(ds, kind))


def denormalize(ds):
    if ds.norm is None:
        return ds
    return replace(ds, X=ds.norm.denormalize_X(ds.X), y=ds.norm.denormalize_y(ds.y), norm=None)


def _as_coords(obj, role):
    if isinstance(obj, SpatialDataset):
        if not obj.projected:
            raise ProjectionStateError(f"{role} dataset is not projected")
        return obj.coords
    if isinstance(obj, (list, tuple)) and obj and isinstance(obj[0], GeoPoint):
        if not all(pt.projected for pt in obj):
            raise ProjectionStateError(f"{role} points are not projected")
        return np.array([[pt.x, pt.y] for pt in obj], dtype=float)
    arr = np.asarray(obj, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ProjectionStateError(f"{role} must be projected (n, 2) coordinates")
    return arr


def distance_matrix(queries, anchors):
    """Euclidean distances in meters, shape (n_query, n_anchor)."""
    q = _as_coords(queries, "query")
    a = _as_coords(anchors, "anchor")
    diff = q[:, None, :] - a[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def split_folds(ds, test_frac=0.15, k=10, seed=0):
    """Label each row TEST (-1) or a fold in 0..k-1.

    ``round(n * test_frac)`` rows go to the test set; the rest are dealt
    round-robin over a seeded permutation so fold sizes differ by at most one.
    """
    if k < 2:
        raise SplitError(f"need k >= 2 folds, got {k}")
    if not 0.0 < test_frac < 1.0:
        raise SplitError(f"test_frac must lie strictly between 0 and 1, got {test_frac}")
    n = ds.n
    n_test = int(math.floor(n * test_frac + 0.5))
    n_rest = n - n_test
    if k > n_rest:
        raise SplitError(f"{k} folds requested but only {n_rest} non-test rows")
    perm = np.random.default_rng(seed).permutation(n)
    labels = np.empty(n, dtype=int)
    labels[perm[:n_test]] = TEST
    labels[perm[n_test:]] = np.arange(n_rest) % k
    counts = {"test": n_test, "folds": [int(np.sum(labels == f)) for f in range(k)]}
    meta = {"seed": int(seed), "test_frac": float(test_frac), "k": int(k), "counts": counts}
    return replace(ds, folds=labels, split_meta=meta)


def write_snapshot(ds, csv_path, json_path=None):
    """Write projected coordinates, scaled columns and fold labels, plus a JSON sidecar."""
    csv_path = Path(csv_path)
    header = ["row_id"]
    cols = [ds.row_ids.astype(float)]
    if ds.coords is not None:
        header += ["x", "y"]
        cols += [ds.coords[:, 0], ds.coords[:, 1]]
    if ds.lonlat is not None:
        header += ["lon", "lat"]
        cols += [ds.lonlat[:, 0], ds.lonlat[:, 1]]
    header += list(ds.names) + ["target"]
    cols += [ds.X[:, j + 1] for j in range(ds.p)] + [ds.y]
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header + (["fold"] if ds.folds is not None else []))
        for i in range(ds.n):
            row = [format_float(c[i]) for c in cols]
            row[0] = str(int(ds.row_ids[i]))
            if ds.folds is not None:
                row.append("TEST" if ds.folds[i] == TEST else str(int(ds.folds[i])))
            w.writerow(row)
    if json_path is not None:
        meta = {
            "n": ds.n,
            "p": ds.p,
            "names": list(ds.names),
            "normalization": None if ds.norm is None else ds.norm.to_dict(),
            "split": ds.split_meta,
            "rejected": [{"row": r, "reason": why} for r, why in ds.rejected],
        }
        Path(json_path).write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")


def format_float(v):
    """17 significant digits: enough to round-trip any binary64 value."""
    return format(float(v), ".17g")
