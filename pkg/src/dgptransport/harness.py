"""Datasets, the training loop, evaluation metrics, checkpoints and sweeps."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps
from scipy.special import logsumexp

from . import diffcore as dc
from .bridge import BridgeParams
from .model import OBJECTIVES, build_model
from .nn import Adam
from .gp import dgp_forward
from .transport import objective_loss, sample_inducing

COVERAGE_LEVELS = (0.50, 0.80, 0.90, 0.95, 0.99)
CHECKPOINT_FORMAT = "dgptransport-checkpoint"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """A configuration failed schema validation."""


class ParseError(ValueError):
    def __init__(self, line, msg):
        super().__init__(f"line {line}: {msg}")
        self.line = line


class TrainingDiverged(ArithmeticError):
    def __init__(self, epoch, step, value):
        super().__init__(f"non-finite training loss {value} at epoch {epoch}, step {step}")
        self.epoch, self.step = epoch, step


# ---------------------------------------------------------------------------
# data


@dataclass
class Dataset:
    """Standardised train/test split. Stats map back to raw units."""

    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float = 0.0
    y_std: float = 1.0
    task: str = "regression"
    name: str = "data"
    meta: dict = field(default_factory=dict)

    @property
    def n_train(self):
        return len(self.y_train)

    def standardize_x(self, X):
        return (np.asarray(X, dtype=np.float64) - self.x_mean) / self.x_std

    def unstandardize_x(self, Xs):
        return np.asarray(Xs) * self.x_std + self.x_mean

    def standardize_y(self, y):
        return (np.asarray(y, dtype=np.float64) - self.y_mean) / self.y_std

    def unstandardize_y(self, ys):
        return np.asarray(ys) * self.y_std + self.y_mean

    def stats(self):
        return {"x_mean": self.x_mean.tolist(), "x_std": self.x_std.tolist(),
                "y_mean": self.y_mean, "y_std": self.y_std, "task": self.task}


def make_dataset(X, y, seed=0, task="regression", test_frac=0.2, name="data", meta=None):
    """Seeded 80/20 split, standardised on training statistics.

    Constant features get unit scale so they map to zeros.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.ndim == 1:
        X = X[:, None]
    if len(X) != len(y):
        raise dc.DimensionError(f"{len(X)} feature rows vs {len(y)} targets")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("dataset contains NaN or inf")
    if task not in ("regression", "classification"):
        raise ValueError(f"unknown task {task!r}")
    if task == "classification" and not np.all(np.isin(y, (0.0, 1.0))):
        raise ValueError("classification targets must be 0 or 1")
    n = len(y)
    perm = np.random.default_rng(seed).permutation(n)
    n_test = int(round(test_frac * n))
    test_idx, train_idx = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    xm = X[train_idx].mean(axis=0)
    xs = X[train_idx].std(axis=0)
    xs = np.where(xs > 1e-12, xs, 1.0)
    if task == "regression":
        ym, ys = float(y[train_idx].mean()), float(y[train_idx].std())
        ys = ys if ys > 1e-12 else 1.0
    else:
        ym, ys = 0.0, 1.0
    return Dataset(
        X_train=(X[train_idx] - xm) / xs, y_train=(y[train_idx] - ym) / ys,
        X_test=(X[test_idx] - xm) / xs, y_test=(y[test_idx] - ym) / ys,
        train_idx=train_idx, test_idx=test_idx, x_mean=xm, x_std=xs,
        y_mean=ym, y_std=ys, task=task, name=name, meta=dict(meta or {}),
    )


def read_csv(path, target_column):
    """Numeric CSV with a header row; returns ``(X, y, feature_names)``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(1, "empty file") from None
        header = [h.strip() for h in header]
        if isinstance(target_column, int) or str(target_column).lstrip("-").isdigit():
            t = int(target_column)
            t = t % len(header)
        elif target_column in header:
            t = header.index(target_column)
        else:
            raise ParseError(1, f"target column {target_column!r} not in header")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(line_no, f"expected {len(header)} cells, got {len(row)}")
            try:
                vals = [float(c) for c in row]
            except ValueError as exc:
                raise ParseError(line_no, str(exc)) from None
            if not all(math.isfinite(v) for v in vals):
                raise ParseError(line_no, "non-finite cell")
            rows.append(vals)
    if not rows:
        raise ParseError(2, "no data rows")
    A = np.array(rows)
    feats = [h for i, h in enumerate(header) if i != t]
    return np.delete(A, t, axis=1), A[:, t], feats


def load_csv(path, target_column, seed=0, task="regression"):
    X, y, feats = read_csv(path, target_column)
    return make_dataset(X, y, seed=seed, task=task, name=str(path),
                        meta={"target": str(target_column), "features": feats})


def toy_function(x):
    return np.sin(1.5 * x) * np.exp(-0.2 * x ** 2)


def het_sigma(x):
    return 0.1 + 0.4 * np.abs(x) / 3.0


def synth_toy_1d(n, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-3, 3, n)
    y = toy_function(x) + 0.1 * rng.standard_normal(n)
    return make_dataset(x[:, None], y, seed=seed, name="toy1d")


def synth_heteroscedastic(n, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-3, 3, n)
    y = np.sin(2 * x) + het_sigma(x) * rng.standard_normal(n)
    return make_dataset(x[:, None], y, seed=seed, name="het1d")


SYNTHETIC = {"toy1d": synth_toy_1d, "het1d": synth_heteroscedastic}


def dataset_from_source(source, seed=0):
    """Rebuild a dataset from ``{"synthetic": name, "n": n}`` or ``{"csv": path, "target": col}``.

    The source is stored on ``meta["source"]`` so checkpoints can recreate
    the same split.
    """
    if "synthetic" in source:
        name = source["synthetic"]
        if name not in SYNTHETIC:
            raise ConfigError(f"unknown synthetic dataset {name!r}; choose from {sorted(SYNTHETIC)}")
        ds = SYNTHETIC[name](int(source.get("n", 500)), seed)
    elif "csv" in source:
        ds = load_csv(source["csv"], source.get("target", -1), seed=seed,
                      task=source.get("task", "regression"))
    else:
        raise ConfigError(f"data source needs a 'synthetic' or 'csv' key: {source}")
    ds.meta["source"] = dict(source)
    return ds


# ---------------------------------------------------------------------------
# configuration and records


@dataclass
class TrainConfig:
    objective: str = "om"
    L: int = 2
    M: int = 128
    N: int = 10
    alpha: float = 1.0
    lam: float = 1.0
    g: float = 1.0
    sigma0: float = 1.0
    grid_n: int = 100
    lr: float = 1e-2
    batch: int = 256
    epochs: int | None = None
    mc_train: int = 2
    mc_eval: int = 32
    seed: int = 0
    hidden: int = 128
    width: int | None = None
    likelihood: str = "gaussian"
    eval_every: int = 0
    clip_norm: float | None = 10.0

    def __post_init__(self):
        if self.objective == "om-path":
            self.objective = "om"
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        for name in ("L", "M", "N", "batch", "mc_train", "mc_eval", "hidden", "grid_n"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        for name in ("epochs", "width"):
            v = getattr(self, name)
            if v is not None and (isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1):
                raise ConfigError(f"{name} must be a positive integer or null, got {v!r}")
        if isinstance(self.seed, bool) or not isinstance(self.seed, (int, np.integer)) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        if not isinstance(self.eval_every, (int, np.integer)) or self.eval_every < 0:
            raise ConfigError("eval_every must be a non-negative integer")
        for name in ("alpha", "lr", "lam", "g", "sigma0"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                raise ConfigError(f"{name} must be a finite number, got {v!r}")
        if self.clip_norm is not None and (isinstance(self.clip_norm, bool)
                                           or not isinstance(self.clip_norm, (int, float))
                                           or not self.clip_norm > 0):
            raise ConfigError("clip_norm must be a positive number or null")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if min(self.lr, self.lam, self.g, self.sigma0) <= 0:
            raise ConfigError("lr, lam, g and sigma0 must be positive")
        if self.grid_n < 50:
            raise ConfigError("grid_n must be >= 50")
        if self.likelihood not in ("gaussian", "bernoulli"):
            raise ConfigError(f"likelihood must be gaussian or bernoulli, got {self.likelihood!r}")

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def bridge(self):
        return BridgeParams(lam=self.lam, g=self.g, sigma0=self.sigma0, grid_n=self.grid_n)

    def resolved_epochs(self, n_train):
        if self.epochs is not None:
            return self.epochs
        return min(100, max(5, round(100 * 1e4 / max(n_train, 1))))


@dataclass
class RunRecord:
    config: dict
    config_hash: str
    seed: int
    objective: str
    dataset: str
    status: str = "ok"
    error: str = ""
    metrics: dict = field(default_factory=dict)
    baseline_rmse: float = float("nan")
    coverage: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    wall_clock: float = 0.0

    @property
    def rmse(self):
        return self.metrics.get("rmse", float("nan"))

    @property
    def nll(self):
        return self.metrics.get("nll", float("nan"))

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), sort_keys=True, allow_nan=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    def digest(self):
        """Hash of everything except wall-clock time."""
        d = dataclasses.asdict(self)
        d.pop("wall_clock")
        return hashlib.sha256(json.dumps(d, sort_keys=True, allow_nan=True).encode()).hexdigest()


def write_records(path, records, append=False):
    with open(path, "a" if append else "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_records(path):
    with open(path) as fh:
        return [RunRecord.from_json(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# training and evaluation


def _streams(seed):
    init, train, ev = np.random.SeedSequence(seed).spawn(3)
    return (int(init.generate_state(1)[0]), np.random.default_rng(train), ev)


def model_for(config: TrainConfig, ds: Dataset):
    init_seed, _, _ = _streams(config.seed)
    return build_model(
        ds.X_train, objective=config.objective, L=config.L, M=config.M, N=config.N,
        alpha=config.alpha, bridge=config.bridge(), width=config.width, hidden=config.hidden,
        likelihood=config.likelihood, mc_train=config.mc_train, seed=init_seed,
    )


def train_step(model, opt, config, xb, yb, rng, epoch, step=0):
    """One clipped Adam update; returns the loss value."""
    params = opt.params
    try:
        lb = objective_loss(model, xb, yb, rng, epoch=epoch)
    except ArithmeticError as exc:
        raise TrainingDiverged(epoch, step, "nan") from exc
    if not math.isfinite(lb.value):
        raise TrainingDiverged(epoch, step, lb.value)
    grads = dc.grad(lb.total, params)
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise TrainingDiverged(epoch, step, "non-finite gradient")
    if config.clip_norm is not None:
        gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
        if gnorm > config.clip_norm:
            grads = [g * (config.clip_norm / gnorm) for g in grads]
    opt.step(grads)
    return lb.value


def train(config: TrainConfig, ds: Dataset, model=None, epochs=None, callback=None):
    """Adam over every trainable tensor with per-epoch shuffled minibatches.

    Raises :class:`TrainingDiverged` on a non-finite loss. Returns the model
    and a :class:`RunRecord` with final test metrics and coverage.
    """
    t0 = time.perf_counter()
    if model is None:
        model = model_for(config, ds)
    _, rng, ev_seq = _streams(config.seed)
    params = model.parameters()
    opt = Adam(params, lr=config.lr)
    n = ds.n_train
    n_epochs = config.resolved_epochs(n) if epochs is None else epochs
    steps = math.ceil(n / config.batch)
    history = []
    for epoch in range(n_epochs):
        perm = rng.permutation(n)
        total = 0.0
        for step in range(steps):
            idx = perm[step * config.batch:(step + 1) * config.batch]
            value = train_step(model, opt, config, ds.X_train[idx], ds.y_train[idx], rng, epoch, step)
            total += value
        row = {"epoch": epoch, "loss": total / steps}
        if config.eval_every and (epoch + 1) % config.eval_every == 0:
            m = evaluate(model, ds, config.mc_eval, np.random.default_rng(ev_seq.spawn(1)[0]))
            row.update({f"test_{k}": v for k, v in m.items()})
        history.append(row)
        if callback is not None:
            callback(epoch, row, model)
    ev_rng = np.random.default_rng(ev_seq)
    metrics = evaluate(model, ds, config.mc_eval, ev_rng)
    cov = coverage(model, ds, COVERAGE_LEVELS, config.mc_eval, ev_rng)
    rec = RunRecord(
        config=config.to_dict(), config_hash=config.digest(), seed=config.seed,
        objective=config.objective, dataset=ds.name, metrics=metrics,
        baseline_rmse=float(np.sqrt(np.mean(ds.y_test ** 2))) if len(ds.y_test) else float("nan"),
        coverage={f"{k:.2f}": v for k, v in zip(COVERAGE_LEVELS, cov)}, history=history,
        wall_clock=time.perf_counter() - t0,
    )
    return model, rec


def predict_moments(model, X, S, rng, steps=None, chunk=2048):
    """Per-sample final-layer means and variances, each ``(S, n)``.

    Inducing values are drawn once and shared by every chunk of ``X``.
    """
    X = np.asarray(X, dtype=np.float64)
    U_list, _ = sample_inducing(model, S, rng, N=steps)
    U_list = [u.detach() for u in U_list]
    means, vars_ = [], []
    for start in range(0, max(len(X), 1), chunk):
        _, mom = dgp_forward(X[start:start + chunk], U_list, model.layers, rng, return_moments=True)
        mu, var = mom[-1]
        means.append(mu.data[..., 0])
        vars_.append(np.broadcast_to(var.data[..., 0], mu.data[..., 0].shape))
    return np.concatenate(means, axis=1), np.concatenate(vars_, axis=1)


def gaussian_mixture_nll(y, mu, var):
    """``-log mean_s N(y; mu_s, var_s)`` averaged over points; ``mu, var`` are ``(S, n)``."""
    y = np.asarray(y)
    logp = -0.5 * (np.log(2 * np.pi * var) + (y - mu) ** 2 / var)
    S = mu.shape[0]
    return float(np.mean(-(logsumexp(logp, axis=0) - np.log(S))))


def bernoulli_mixture_nll(y, probs):
    p = np.clip(np.mean(probs, axis=0), 1e-12, 1 - 1e-12)
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log1p(-p))))


def evaluate(model, ds: Dataset, S, rng, steps=None, X=None, y=None):
    """Test RMSE and mixture NLL on the standardised scale (error rate for classification)."""
    X = ds.X_test if X is None else X
    y = ds.y_test if y is None else y
    if len(y) == 0:
        return {"rmse": float("nan"), "nll": float("nan")}
    mu, var = predict_moments(model, X, S, rng, steps)
    with np.errstate(all="ignore"):
        if model.lik.kind == "gaussian":
            pred = mu.mean(axis=0)
            return {"rmse": float(np.sqrt(np.mean((pred - y) ** 2))),
                    "nll": gaussian_mixture_nll(y, mu, var + model.lik.noise_var)}
        f = mu + np.sqrt(var) * rng.standard_normal(mu.shape)
        probs = 0.5 * (1.0 + np.tanh(0.5 * f))
        p = probs.mean(axis=0)
        return {"error": float(np.mean((p > 0.5) != (y > 0.5))),
                "nll": bernoulli_mixture_nll(y, probs)}


def predictive_gaussian(model, X, S, rng, steps=None):
    """Moment-matched predictive mean and epistemic variance of the latent function."""
    mu, var = predict_moments(model, X, S, rng, steps)
    return mu.mean(axis=0), mu.var(axis=0) + var.mean(axis=0)


def coverage(model, ds: Dataset, levels=COVERAGE_LEVELS, S=32, rng=None, steps=None):
    """Empirical coverage of two-sided Gaussian intervals at each nominal level.

    The noise term is the training residual variance minus the mean
    epistemic variance, floored at 1e-4.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    if len(ds.y_test) == 0 or model.lik.kind != "gaussian":
        return [float("nan")] * len(levels)
    f_tr, epi_tr = predictive_gaussian(model, ds.X_train, S, rng, steps)
    noise = max(float(np.var(ds.y_train - f_tr) - np.mean(epi_tr)), 1e-4)
    f_te, epi_te = predictive_gaussian(model, ds.X_test, S, rng, steps)
    return interval_coverage(ds.y_test, f_te, np.sqrt(epi_te + noise), levels)


def interval_coverage(y, mean, std, levels=COVERAGE_LEVELS):
    z = np.abs(np.asarray(y) - mean) / std
    return [float(np.mean(z <= sps.norm.ppf(0.5 + a / 2))) for a in levels]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model, config: TrainConfig, ds: Dataset | None = None):
    """JSON header line (format, version, config hash) followed by npz payload."""
    arrays = {f"p:{k}": v for k, v in model.state_dict().items()}
    for i, layer in enumerate(model.layers):
        if layer.mean_weights is not None:
            arrays[f"mean_weights:{i}"] = layer.mean_weights
    header = {
        "format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
        "config_hash": config.digest(), "config": config.to_dict(),
        "n_train": model.n_train, "d_in": model.layers[0].d_in,
        "stats": ds.stats() if ds is not None else None,
        "target": ds.meta.get("target") if ds is not None else None,
        "source": ds.meta.get("source") if ds is not None else None,
    }
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Returns ``(model, config, header)``; checks format, version and hash."""
    with open(path, "rb") as fh:
        head = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(head)
    except json.JSONDecodeError:
        raise ConfigError(f"{path}: not a checkpoint (bad header)") from None
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: unknown checkpoint format {header.get('format')!r}")
    if header.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {header.get('version')}")
    config = TrainConfig.from_dict(header["config"])
    if config.digest() != header["config_hash"]:
        raise ConfigError(f"{path}: config hash mismatch")
    arrays = np.load(io.BytesIO(payload))
    state = {k[2:]: arrays[k] for k in arrays.files if k.startswith("p:")}
    M = state["layers.0.Z"].shape[0]
    stub = np.random.default_rng(0).standard_normal((max(2 * M, 4), header["d_in"]))
    model = build_model(stub, objective=config.objective, L=config.L, M=M, N=config.N,
                        alpha=config.alpha, bridge=config.bridge(), width=config.width,
                        hidden=config.hidden, likelihood=config.likelihood,
                        mc_train=config.mc_train)
    model.n_train = int(header["n_train"])
    for i, layer in enumerate(model.layers):
        key = f"mean_weights:{i}"
        if key in arrays.files:
            layer.mean_weights = arrays[key].copy()
    model.load_state_dict(state)
    return model, config, header


# ---------------------------------------------------------------------------
# sweeps


def run_job(job):
    """Train and evaluate one ``(config, dataset)`` pair; divergence becomes a record."""
    config, ds = job
    try:
        _, rec = train(config, ds)
        rmse = rec.metrics.get("rmse", 0.0)
        if not math.isfinite(rmse) or rmse > 5 * rec.baseline_rmse:
            rec.status = "diverged"
            rec.error = f"test rmse {rmse:.3g} exceeds 5x the mean predictor"
        return rec
    except TrainingDiverged as exc:
        return RunRecord(config=config.to_dict(), config_hash=config.digest(), seed=config.seed,
                         objective=config.objective, dataset=ds.name, status="diverged",
                         error=str(exc), metrics={"rmse": float("nan"), "nll": float("nan")})


def sweep(jobs, workers=1):
    """Run ``(config, dataset)`` jobs, in worker processes when ``workers > 1``."""
    jobs = list(jobs)
    if not jobs:
        return []
    if workers <= 1 or len(jobs) == 1:
        return [run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_job, jobs))


def is_divergent(rec: RunRecord):
    if rec.status != "ok":
        return True
    rmse = rec.metrics.get("rmse")
    if rmse is None:
        return not math.isfinite(rec.metrics.get("nll", float("nan")))
    base = rec.baseline_rmse if math.isfinite(rec.baseline_rmse) else 1.0
    return not math.isfinite(rmse) or rmse > 5 * base


def divergence_filter(records, group_key=lambda r: r.dataset, method_key=lambda r: r.objective):
    """Drop every seed on which any compared method diverged, for all methods alike.

    Returns ``(kept_records, excluded)`` with ``excluded[group] = sorted seeds``.
    """
    bad = {}
    for r in records:
        if is_divergent(r):
            bad.setdefault(group_key(r), set()).add(r.seed)
    kept = [r for r in records if r.seed not in bad.get(group_key(r), set())]
    return kept, {g: sorted(s) for g, s in bad.items()}


def aggregate(records, cell_key=lambda r: (r.dataset, r.objective, r.config.get("alpha")),
              metrics=("rmse", "nll"), group_key=lambda r: r.dataset):
    """Mean and std per cell after the symmetric divergence filter."""
    kept, excluded = divergence_filter(records, group_key=group_key)
    cells = {}
    for r in records:
        cells.setdefault(cell_key(r), {"runs": 0, "values": {m: [] for m in metrics}})
        cells[cell_key(r)]["runs"] += 1
    for r in kept:
        for m in metrics:
            cells[cell_key(r)]["values"][m].append(r.metrics.get(m, float("nan")))
    out = []
    for key, c in cells.items():
        row = {"cell": list(key) if isinstance(key, tuple) else key, "n": len(next(iter(c["values"].values()))),
               "excluded": c["runs"] - len(next(iter(c["values"].values())))}
        for m, vals in c["values"].items():
            v = np.asarray(vals, dtype=float)
            row[f"{m}_mean"] = float(v.mean()) if len(v) else float("nan")
            row[f"{m}_std"] = float(v.std(ddof=1)) if len(v) > 1 else 0.0
        out.append(row)
    return out, excluded
