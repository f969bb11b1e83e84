"""Datasets, model configuration and the CSV / config file formats."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from .errors import InputError

ESTIMATORS = ("ss_dr", "cc_ipw", "cc_reg", "cc_dr", "ss_naive", "ss_prepost", "cc_naive")
SIMULATION_ESTIMATORS = ("cc_ipw", "cc_reg", "cc_dr", "ss_naive", "ss_prepost", "ss_dr")


@dataclass
class Dataset:
    """Pooled sample; ``y`` is NaN on unlabeled rows."""

    y: np.ndarray
    t: np.ndarray
    x: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        N = self.y.shape[0]
        self.x = np.asarray(self.x, dtype=float).reshape(N, -1)
        self.w = np.asarray(self.w, dtype=float).reshape(N, -1)
        if self.t.shape[0] != N:
            raise InputError("treatment and outcome lengths differ")
        if not np.all((self.t == 0) | (self.t == 1)):
            raise InputError("treatment must be coded 0/1")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.w))):
            raise InputError("covariates and surrogates must be finite")
        if np.any(np.isinf(self.y)):
            raise InputError("outcome values must be finite")

    @property
    def labeled(self) -> np.ndarray:
        return ~np.isnan(self.y)

    @property
    def n(self) -> int:
        return int(self.labeled.sum())

    @property
    def N(self) -> int:
        return int(self.y.shape[0])

    @property
    def p_x(self) -> int:
        return int(self.x.shape[1])

    @property
    def p_w(self) -> int:
        return int(self.w.shape[1])

    @property
    def v(self) -> np.ndarray:
        """Surrogates then baseline covariates, one row per observation."""
        return np.hstack([self.w, self.x])

    def take(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.y[rows], self.t[rows], self.x[rows], self.w[rows])

    def count_columns(self) -> tuple:
        """Indices into ``v`` of columns holding nonnegative integers."""
        V = self.v
        return tuple(
            int(j) for j in range(V.shape[1]) if np.all(V[:, j] >= 0) and np.all(V[:, j] == np.floor(V[:, j]))
        )

    def with_log_counts(self) -> "Dataset":
        """Apply ``u -> log(1 + u)`` to every count column of ``v``."""
        V = self.v.copy()
        cols = list(self.count_columns())
        V[:, cols] = np.log1p(V[:, cols])
        return Dataset(self.y, self.t, V[:, self.p_w :], V[:, : self.p_w])


@dataclass(frozen=True)
class ModelConfig:
    link_outcome: str = "logistic"
    link_imputation: str = "logistic"
    spline_knots: int = 6
    kernel_order: int = 4
    bandwidth_alpha: float = 0.15
    bandwidth_scale: float = 0.25
    ps_truncation: float = 0.01
    cv_folds: int = 5
    n_perturb: int = 1000
    perturb_dist: str = "scaled_beta"
    ci_level: float = 0.95
    seed: int = 0
    count_log_transform: bool = False
    ps_perturbation: str = "printed"
    imputation_interactions: bool = False
    cc_reg_population: str = "labeled"
    cc_ipw_form: str = "hajek"

    def __post_init__(self):
        for name in ("link_outcome", "link_imputation"):
            if getattr(self, name) not in ("logistic", "identity"):
                raise InputError(f"{name} must be 'logistic' or 'identity'")
        if self.spline_knots < 0:
            raise InputError("spline_knots must be nonnegative")
        if self.kernel_order < 4 or self.kernel_order % 2:
            raise InputError("kernel_order must be an even integer >= 4")
        if not 0.0 < self.bandwidth_alpha < 0.25:
            raise InputError("bandwidth_alpha must lie in (0, 0.25)")
        if not self.bandwidth_scale > 0:
            raise InputError("bandwidth_scale must be positive")
        if not 0.0 < self.ps_truncation < 0.5:
            raise InputError("ps_truncation must lie in (0, 0.5)")
        if self.cv_folds < 2:
            raise InputError("cv_folds must be at least 2")
        if self.n_perturb < 1:
            raise InputError("n_perturb must be positive")
        if self.perturb_dist not in ("scaled_beta", "multinomial_bootstrap"):
            raise InputError("perturb_dist must be 'scaled_beta' or 'multinomial_bootstrap'")
        if not 0.0 < self.ci_level < 1.0:
            raise InputError("ci_level must lie in (0, 1)")
        if self.ps_perturbation not in ("printed", "full"):
            raise InputError("ps_perturbation must be 'printed' or 'full'")
        if self.cc_reg_population not in ("labeled", "all"):
            raise InputError("cc_reg_population must be 'labeled' or 'all'")
        if self.cc_ipw_form not in ("hajek", "unnormalized"):
            raise InputError("cc_ipw_form must be 'hajek' or 'unnormalized'")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    estimators: tuple = ("ss_dr",)

    def as_dict(self) -> dict:
        out = {"estimators": list(self.estimators)}
        out.update(self.model.as_dict())
        return out


_MODEL_KEYS = {f.name: f.type for f in fields(ModelConfig)}


def parse_estimators(value) -> tuple:
    if isinstance(value, str):
        items = [v.strip() for v in value.split(",") if v.strip()]
    else:
        items = [str(v).strip() for v in value]
    if not items:
        raise InputError("no estimators requested")
    bad = [v for v in items if v not in ESTIMATORS]
    if bad:
        raise InputError(f"unknown estimator(s) {bad}; choose from {list(ESTIMATORS)}")
    return tuple(dict.fromkeys(items))


def _coerce(name: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise InputError(f"config key {name!r} must be true/false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not (isinstance(value, int) or (isinstance(value, float) and value.is_integer())):
            raise InputError(f"config key {name!r} must be an integer")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InputError(f"config key {name!r} must be a number")
        return float(value)
    if not isinstance(value, str):
        raise InputError(f"config key {name!r} must be a string")
    return value


def run_config_from_mapping(raw: dict, *, require_seed: bool = True) -> RunConfig:
    if not isinstance(raw, dict):
        raise InputError("config must be a key-value mapping")
    unknown = sorted(set(raw) - set(_MODEL_KEYS) - {"estimators"})
    if unknown:
        raise InputError(f"unknown config key(s): {unknown}")
    if require_seed and "seed" not in raw:
        raise InputError("config key 'seed' is required")
    defaults = ModelConfig()
    kwargs = {k: _coerce(k, v, getattr(defaults, k)) for k, v in raw.items() if k != "estimators"}
    estimators = parse_estimators(raw.get("estimators", ["ss_dr"]))
    return RunConfig(ModelConfig(**kwargs), estimators)


def load_run_config(path: str | os.PathLike) -> RunConfig:
    """Read a JSON object of config keys; unknown keys are rejected."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise InputError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}: invalid config: {exc.msg}") from None
    return run_config_from_mapping(raw)


# ---------------------------------------------------------------------------
# CSV


def _header_columns(header: Sequence[str], path) -> tuple[list[str], list[str]]:
    names = [h.strip() for h in header]
    if len(set(names)) != len(names):
        raise InputError(f"{path}:1: duplicate column names")
    for required in ("y", "t"):
        if required not in names:
            raise InputError(f"{path}:1: missing required column {required!r}")
    xs, ws = [], []
    for name in names:
        if name in ("y", "t"):
            continue
        if name[:1] in ("x", "w") and name[1:].isdigit():
            (xs if name[0] == "x" else ws).append(name)
        else:
            raise InputError(f"{path}:1: unexpected column {name!r}")
    for prefix, cols in (("x", xs), ("w", ws)):
        expected = [f"{prefix}{i}" for i in range(1, len(cols) + 1)]
        if sorted(cols, key=lambda c: int(c[1:])) != expected:
            raise InputError(f"{path}:1: {prefix}-columns must be numbered {prefix}1..{prefix}{len(cols)}")
    if not xs:
        raise InputError(f"{path}:1: at least one baseline covariate column x1 is required")
    return xs, ws


def read_csv(path: str | os.PathLike) -> Dataset:
    """Parse the pooled-sample CSV; an empty ``y`` cell marks an unlabeled row."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except FileNotFoundError:
        raise InputError(f"data file not found: {path}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}:1: empty file, header row required") from None
        except UnicodeDecodeError:
            raise InputError(f"{path}: not valid UTF-8") from None
        xs, ws = _header_columns(header, path)
        names = [h.strip() for h in header]
        idx = {name: i for i, name in enumerate(names)}
        xcols = [idx[c] for c in sorted(xs, key=lambda c: int(c[1:]))]
        wcols = [idx[c] for c in sorted(ws, key=lambda c: int(c[1:]))]
        ys, ts, X, W = [], [], [], []
        try:
            for row in reader:
                line = reader.line_num
                if not row or all(not c.strip() for c in row):
                    continue
                if len(row) != len(names):
                    raise InputError(f"{path}:{line}: expected {len(names)} fields, found {len(row)}")
                cell = row[idx["y"]].strip()
                ys.append(_number(cell, path, line, "y") if cell else math.nan)
                tv = _number(row[idx["t"]].strip(), path, line, "t")
                if tv not in (0.0, 1.0):
                    raise InputError(f"{path}:{line}: column 't' must be 0 or 1, found {row[idx['t']]!r}")
                ts.append(tv)
                X.append([_number(row[j].strip(), path, line, names[j]) for j in xcols])
                W.append([_number(row[j].strip(), path, line, names[j]) for j in wcols])
        except UnicodeDecodeError:
            raise InputError(f"{path}: not valid UTF-8") from None
    if not ys:
        raise InputError(f"{path}: no data rows")
    N = len(ys)
    return Dataset(np.array(ys), np.array(ts), np.array(X).reshape(N, len(xcols)), np.array(W).reshape(N, len(wcols)))


def _number(text: str, path, line: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise InputError(f"{path}:{line}: column {column!r} is not a number: {text!r}") from None
    if not math.isfinite(value):
        raise InputError(f"{path}:{line}: column {column!r} is not finite: {text!r}")
    return value


def write_csv(data: Dataset, path: str | os.PathLike) -> None:
    """Write ``data`` losslessly (shortest round-trip float repr)."""
    header = ["y", "t"] + [f"x{i + 1}" for i in range(data.p_x)] + [f"w{i + 1}" for i in range(data.p_w)]
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(data.N):
            yv = "" if math.isnan(data.y[i]) else repr(float(data.y[i]))
            writer.writerow(
                [yv, str(int(data.t[i]))] + [repr(float(v)) for v in data.x[i]] + [repr(float(v)) for v in data.w[i]]
            )
    os.replace(tmp, path)


def with_config(config: ModelConfig, **changes) -> ModelConfig:
    return replace(config, **changes)
