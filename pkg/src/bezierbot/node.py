"""Neural-ODE self-models of the shape and tip dynamics.

A small tanh MLP ``f(x, u)`` gives the state rate.  Predictions over one
control period hold ``u`` constant and integrate with fixed-step RK4; training
backpropagates through the unrolled solver.  Everything runs in float64 so the
finite-difference Jacobians taken through the model stay clean.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

FORMAT_NAME = "bezierbot-node"
FORMAT_VERSION = 1
DTYPE = torch.float64


class DivergedIntegration(FloatingPointError):
    pass


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}")
        self.epoch = epoch


class ModelFormatError(ValueError):
    pass


class DynamicsModel(nn.Module):
    """``x_dot = f(x, u[, t])`` on z-scored inputs with a per-dimension rate scale."""

    def __init__(self, state_dim: int, m: int, hidden=(64, 64), step: float = 0.0125,
                 horizon: float = 0.05, time_input: bool = False, kind: str = "shape"):
        super().__init__()
        self.state_dim = int(state_dim)
        self.m = int(m)
        self.hidden = tuple(int(h) for h in hidden)
        self.step = float(step)
        self.horizon = float(horizon)
        self.time_input = bool(time_input)
        self.kind = kind
        width = self.state_dim + self.m + int(self.time_input)
        layers = []
        for h in self.hidden:
            layers += [nn.Linear(width, h, dtype=DTYPE), nn.Tanh()]
            width = h
        out = nn.Linear(width, self.state_dim, dtype=DTYPE)
        nn.init.zeros_(out.weight)
        nn.init.zeros_(out.bias)
        self.net = nn.Sequential(*layers, out)
        self.register_buffer("x_mean", torch.zeros(self.state_dim, dtype=DTYPE))
        self.register_buffer("x_std", torch.ones(self.state_dim, dtype=DTYPE))
        self.register_buffer("u_mean", torch.zeros(self.m, dtype=DTYPE))
        self.register_buffer("u_std", torch.ones(self.m, dtype=DTYPE))
        self.register_buffer("rate_scale", torch.ones(self.state_dim, dtype=DTYPE))

    def forward(self, x: torch.Tensor, u: torch.Tensor, t: torch.Tensor | None = None):
        z = [(x - self.x_mean) / self.x_std, (u - self.u_mean) / self.u_std]
        if self.time_input:
            if t is None:
                t = torch.zeros(x.shape[:-1] + (1,), dtype=DTYPE)
            z.append(torch.as_tensor(t, dtype=DTYPE).expand(x.shape[:-1] + (1,)))
        return self.net(torch.cat(z, dim=-1)) * self.rate_scale

    def set_stats(self, x_mean, x_std, u_mean, u_std, rate_scale) -> None:
        for name, value in (("x_mean", x_mean), ("x_std", x_std), ("u_mean", u_mean),
                            ("u_std", u_std), ("rate_scale", rate_scale)):
            getattr(self, name).copy_(torch.as_tensor(np.asarray(value, float), dtype=DTYPE))

    def config(self) -> dict:
        return {"state_dim": self.state_dim, "m": self.m, "hidden": list(self.hidden),
                "step": self.step, "horizon": self.horizon, "time_input": self.time_input,
                "kind": self.kind}


def _as_tensor(a) -> torch.Tensor:
    return a if isinstance(a, torch.Tensor) else torch.as_tensor(np.asarray(a, float), dtype=DTYPE)


def _check_dims(model: DynamicsModel, x: torch.Tensor, u: torch.Tensor) -> None:
    if x.shape[-1] != model.state_dim or u.shape[-1] != model.m:
        raise ValueError(f"model expects state {model.state_dim} and input {model.m}, "
                         f"got {tuple(x.shape)} and {tuple(u.shape)}")


def forward(model: DynamicsModel, x, u) -> np.ndarray:
    x, u = _as_tensor(x), _as_tensor(u)
    _check_dims(model, x, u)
    with torch.no_grad():
        return model(x, u).numpy()


def rk4(model: DynamicsModel, x0: torch.Tensor, u: torch.Tensor, t0: float, t_plus: float):
    """Fixed-step RK4 with ``u`` held constant; differentiable."""
    span = t_plus - t0
    if span < 0:
        raise ValueError("t_plus must not precede t0")
    if span == 0:
        return x0
    n = max(1, math.ceil(span / model.step - 1e-9))
    h = span / n
    x = x0
    t = t0
    for _ in range(n):
        k1 = model(x, u, t)
        k2 = model(x + 0.5 * h * k1, u, t + 0.5 * h)
        k3 = model(x + 0.5 * h * k2, u, t + 0.5 * h)
        k4 = model(x + h * k3, u, t + h)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t += h
        if not torch.isfinite(x).all():
            raise DivergedIntegration(f"non-finite state at t={t:.6g}")
    return x


def integrate(model: DynamicsModel, x0, u, t0: float = 0.0, t_plus: float | None = None) -> np.ndarray:
    """Predicted state at ``t_plus`` (default ``t0 + horizon``); batched inputs allowed."""
    t_plus = t0 + model.horizon if t_plus is None else t_plus
    x0, u = _as_tensor(x0), _as_tensor(u)
    _check_dims(model, x0, u)
    with torch.no_grad():
        return rk4(model, x0, u, t0, t_plus).numpy()


# --------------------------------------------------------------------------
# data


@dataclass
class TransitionSample:
    x0: np.ndarray
    u0: np.ndarray
    x1: np.ndarray


def _rows(a) -> np.ndarray:
    a = np.asarray(a, float)
    return a if a.ndim == 2 else a.reshape(len(a), -1)


@dataclass
class Dataset:
    """Transitions ``(x(t0), u(t0), x(t0 + horizon))`` stored column-wise."""

    x0: np.ndarray
    u: np.ndarray
    x1: np.ndarray

    def __post_init__(self):
        self.x0, self.u, self.x1 = (_rows(a) for a in (self.x0, self.u, self.x1))
        if not (len(self.x0) == len(self.u) == len(self.x1)):
            raise ValueError("dataset columns have different lengths")

    def __len__(self) -> int:
        return len(self.x0)

    @property
    def state_dim(self) -> int:
        return self.x0.shape[1]

    @property
    def m(self) -> int:
        return self.u.shape[1]

    @classmethod
    def from_samples(cls, samples) -> "Dataset":
        samples = list(samples)
        return cls(np.array([s.x0 for s in samples]), np.array([s.u0 for s in samples]),
                   np.array([s.x1 for s in samples]))

    def samples(self) -> list[TransitionSample]:
        return [TransitionSample(a, b, c) for a, b, c in zip(self.x0, self.u, self.x1)]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x0[idx], self.u[idx], self.x1[idx])

    @staticmethod
    def header(state_dim: int, m: int) -> list[str]:
        return ([f"x0_{i}" for i in range(state_dim)] + [f"u_{i}" for i in range(m)]
                + [f"x1_{i}" for i in range(state_dim)])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header(self.state_dim, self.m))
            for row in np.hstack([self.x0, self.u, self.x1]):
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path, state_dim: int | None = None) -> "Dataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        head = rows[0]
        n = sum(1 for c in head if c.startswith("x0_"))
        m = sum(1 for c in head if c.startswith("u_"))
        if state_dim is not None and n != state_dim:
            raise ValueError(f"{path}: dataset has state dim {n}, expected {state_dim}")
        data = np.array(rows[1:], dtype=float).reshape(len(rows) - 1, 2 * n + m)
        if not len(data):
            return empty_dataset(n, m)
        return cls(data[:, :n], data[:, n:n + m], data[:, n + m:])


def empty_dataset(state_dim: int, m: int) -> Dataset:
    return Dataset(np.empty((0, state_dim)), np.empty((0, m)), np.empty((0, state_dim)))


# --------------------------------------------------------------------------
# training


def _batch_tensors(batch):
    if isinstance(batch, Dataset):
        return _as_tensor(batch.x0), _as_tensor(batch.u), _as_tensor(batch.x1)
    batch = list(batch)
    if not batch:
        raise ValueError("empty batch")
    return (_as_tensor(np.array([s.x0 for s in batch])), _as_tensor(np.array([s.u0 for s in batch])),
            _as_tensor(np.array([s.x1 for s in batch])))


def _loss_tensor(model: DynamicsModel, x0, u, x1, weight=None):
    pred = rk4(model, x0, u, 0.0, model.horizon)
    sq = (pred - x1) ** 2
    if weight is not None:
        sq = sq * weight
    return sq.sum(-1).mean()


def loss(model: DynamicsModel, batch) -> float:
    """Mean squared prediction-error norm over a batch of transitions."""
    x0, u, x1 = _batch_tensors(batch)
    if len(x0) == 0:
        raise ValueError("empty batch")
    with torch.no_grad():
        return float(_loss_tensor(model, x0, u, x1))


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    val_fraction: float = 0.1
    hidden: tuple = (64, 64)
    step: float = 0.0125
    horizon: float = 0.05
    time_input: bool = False
    # "scaled" divides each residual by its dimension's typical one-step change,
    # so small-motion coordinates are not drowned out by large ones
    weighting: str = "euclidean"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs must be >= 0, batch_size >= 1 and lr > 0")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.weighting not in ("euclidean", "scaled"):
            raise ValueError(f"unknown loss weighting {self.weighting!r}")


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = 0
    n_train: int = 0
    n_val: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def canonical_order(ds: Dataset) -> np.ndarray:
    """Row order that depends on sample values only, not on their file order."""
    table = np.hstack([ds.x0, ds.u, ds.x1])
    return np.lexsort(table.T[::-1])


def split(ds: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    order = canonical_order(ds)
    perm = order[np.random.default_rng(seed).permutation(len(ds))]
    n_val = int(round(val_fraction * len(ds)))
    if 0 < val_fraction and n_val == 0 and len(ds) > 1:
        n_val = 1
    return ds.subset(np.sort(perm[n_val:])), ds.subset(np.sort(perm[:n_val]))


def _floored_std(a: np.ndarray, rel: float, eps: float = 1e-8) -> np.ndarray:
    std = a.std(0)
    return np.maximum(std, max(rel * std.max(initial=0.0), eps))


def fit_stats(model: DynamicsModel, ds: Dataset, input_floor: float = 1e-2) -> None:
    """Z-score statistics from the training split.

    Input scales are floored at ``input_floor`` times the largest one so that
    nearly constant coordinates (pure measurement noise) are not blown up to
    unit variance.
    """
    rate = (ds.x1 - ds.x0) / model.horizon
    model.set_stats(ds.x0.mean(0), _floored_std(ds.x0, input_floor), ds.u.mean(0),
                    _floored_std(ds.u, input_floor), _floored_std(rate, 0.0))


def new_model(state_dim: int, m: int, cfg: TrainConfig = TrainConfig(), kind: str = "shape") -> DynamicsModel:
    torch.manual_seed(cfg.seed)
    return DynamicsModel(state_dim, m, cfg.hidden, cfg.step, cfg.horizon, cfg.time_input, kind)


def train(ds: Dataset, cfg: TrainConfig = TrainConfig(), kind: str = "shape",
          log=None) -> tuple[DynamicsModel, TrainReport]:
    """Adam on the one-step loss through the unrolled RK4 solver.

    Returns the parameters with the lowest validation loss (training loss when
    there is no validation split).  Epoch 0 in the report is the untrained model.
    """
    if len(ds) < 10:
        raise ValueError(f"need at least 10 samples to train, got {len(ds)}")
    if not all(np.isfinite(a).all() for a in (ds.x0, ds.u, ds.x1)):
        raise ValueError("dataset contains non-finite values")
    train_ds, val_ds = split(ds, cfg.val_fraction, cfg.seed)
    model = new_model(ds.state_dim, ds.m, cfg, kind)
    fit_stats(model, train_ds)
    tx0, tu, tx1 = _batch_tensors(train_ds)
    vx0, vu, vx1 = _batch_tensors(val_ds) if len(val_ds) else (None, None, None)
    weight = None
    if cfg.weighting == "scaled":
        weight = 1.0 / (model.rate_scale * model.horizon) ** 2

    def evaluate():
        with torch.no_grad():
            tr = float(_loss_tensor(model, tx0, tu, tx1, weight))
            va = float(_loss_tensor(model, vx0, vu, vx1, weight)) if vx0 is not None else tr
        return tr, va

    report = TrainReport(n_train=len(train_ds), n_val=len(val_ds))
    tr, va = evaluate()
    report.train_loss.append(tr)
    report.val_loss.append(va)
    best = (va, 0, {k: v.clone() for k, v in model.state_dict().items()})

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999))
    rng = np.random.default_rng(cfg.seed + 1)
    n = len(train_ds)
    for epoch in range(1, cfg.epochs + 1):
        perm = torch.as_tensor(rng.permutation(n))
        try:
            for start in range(0, n, cfg.batch_size):
                idx = perm[start:start + cfg.batch_size]
                opt.zero_grad()
                value = _loss_tensor(model, tx0[idx], tu[idx], tx1[idx], weight)
                if not torch.isfinite(value):
                    raise TrainingDiverged(epoch, float(value))
                value.backward()
                opt.step()
            tr, va = evaluate()
        except DivergedIntegration as exc:
            raise TrainingDiverged(epoch, float("nan")) from exc
        if not (math.isfinite(tr) and math.isfinite(va)):
            raise TrainingDiverged(epoch, tr)
        report.train_loss.append(tr)
        report.val_loss.append(va)
        if va < best[0]:
            best = (va, epoch, {k: v.clone() for k, v in model.state_dict().items()})
        if log is not None:
            log(epoch, tr, va)
    model.load_state_dict(best[2])
    report.best_epoch = best[1]
    model.eval()
    return model, report


def relative_errors(model: DynamicsModel, ds: Dataset, ranges=None) -> np.ndarray:
    """Per-sample, per-dimension |prediction error| divided by the dimension's range."""
    pred = integrate(model, ds.x0, ds.u)
    if ranges is None:
        ranges = ds.x1.max(0) - ds.x1.min(0)
    return np.abs(pred - ds.x1) / np.maximum(ranges, 1e-12)


# --------------------------------------------------------------------------
# persistence


def save_model(model: DynamicsModel, path) -> None:
    payload = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": model.config(),
        "state": {k: v.detach().numpy().tolist() for k, v in model.state_dict().items()},
    }
    Path(path).write_text(json.dumps(payload))


def load_model(path, state_dim: int | None = None, m: int | None = None) -> DynamicsModel:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: unreadable model file ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT_NAME:
        raise ModelFormatError(f"{path}: not a {FORMAT_NAME} file")
    if payload.get("version") != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: version {payload.get('version')} != {FORMAT_VERSION}")
    cfg = payload["config"]
    if state_dim is not None and cfg["state_dim"] != state_dim:
        raise ModelFormatError(f"{path}: model state_dim {cfg['state_dim']} does not match "
                               f"configured state_dim {state_dim}")
    if m is not None and cfg["m"] != m:
        raise ModelFormatError(f"{path}: model input dim {cfg['m']} does not match configured m {m}")
    model = DynamicsModel(cfg["state_dim"], cfg["m"], cfg["hidden"], cfg["step"], cfg["horizon"],
                          cfg["time_input"], cfg.get("kind", "shape"))
    try:
        state = {k: torch.as_tensor(np.array(v, dtype=float), dtype=DTYPE)
                 for k, v in payload["state"].items()}
        model.load_state_dict(state)
    except (KeyError, RuntimeError, ValueError) as exc:
        raise ModelFormatError(f"{path}: parameter mismatch ({exc})") from exc
    model.eval()
    return model
