"""Linear probing on frozen features and representation diagnostics."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .datastream import Dataset, hold_out_validation, to_model_input
from .models import EncoderState, forward_encoder
from .tensor import ContractError


class ProbeConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeConfig:
    lr0: float = 0.05
    decay: float = 1 / 3
    patience: int = 3
    max_epochs: int = 100
    lr_floor: float = 1e-4
    batch_size: int = 64
    momentum: float = 0.9
    val_fraction: float = 0.1
    standardize: bool = False
    features: str = "projector"
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.lr_floor < self.lr0:
            raise ProbeConfigError("need 0 < lr_floor < lr0")
        if not 0 < self.decay < 1:
            raise ProbeConfigError("decay must lie in (0, 1)")
        if self.features not in ("projector", "backbone"):
            raise ProbeConfigError("features must be 'projector' or 'backbone'")

    def lr_at(self, k: int) -> float:
        """Learning rate after ``k`` reductions."""
        if self.decay == 1 / 3:
            return self.lr0 / 3 ** k
        return self.lr0 * self.decay ** k


@dataclass
class ProbeResult:
    accuracy: float
    per_class: dict[int, float]
    epochs: int
    lr_trajectory: list[float]
    best_epoch: int
    val_accuracy: float

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "epochs": self.epochs,
            "lr_trajectory": self.lr_trajectory,
            "best_epoch": self.best_epoch,
            "val_accuracy": self.val_accuracy,
        }


def params_checksum(state: EncoderState) -> str:
    h = hashlib.sha256()
    for group in (state.online, state.predictor, state.target):
        for name, value in (group or {}).items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(value).tobytes())
    return h.hexdigest()


def extract_features(encoder: EncoderState, ds: Dataset, features: str = "projector",
                     chunk: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Online-encoder features for every sample (no gradients, no updates)."""
    x = to_model_input(ds.samples)
    if x.shape[1] != encoder.spec.input_dim:
        raise ContractError(f"dataset width {x.shape[1]} != encoder input {encoder.spec.input_dim}")
    out = []
    for start in range(0, len(x), chunk):
        z, h = forward_encoder(encoder, x[start:start + chunk], return_features=True)
        out.append((z if features == "projector" else h).value)
    return np.vstack(out), ds.labels.copy()


def _softmax_xent_grad(w, b, x, y, n_classes):
    logits = x @ w + b
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(len(y)), y] -= 1.0
    p /= len(y)
    return x.T @ p, p.sum(axis=0, keepdims=True)


def _accuracy(w, b, x, y) -> float:
    if len(y) == 0:
        return 0.0
    return float(np.mean(np.argmax(x @ w + b, axis=1) == y))


def train_probe(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, test_y: np.ndarray,
                cfg: ProbeConfig = ProbeConfig(), n_classes: int | None = None) -> ProbeResult:
    """Softmax linear classifier trained by SGD with a plateau schedule.

    ``cfg.val_fraction`` of the training features is held out (stratified)
    to drive the schedule; the reported accuracy is the test accuracy at
    the best-validation epoch.
    """
    train_y = np.asarray(train_y, dtype=np.int64)
    test_y = np.asarray(test_y, dtype=np.int64)
    classes = np.unique(train_y)
    if len(classes) < 2:
        raise ProbeConfigError("probe needs at least two classes")
    n_classes = n_classes or int(max(train_y.max(), test_y.max()) + 1)
    fit, val = hold_out_validation(Dataset(train_x, train_y, n_classes), cfg.val_fraction, cfg.seed)
    xf, yf, xv, yv = fit.samples, fit.labels, val.samples, val.labels
    xt = np.asarray(test_x, dtype=np.float64)
    if cfg.standardize:
        mu, sd = xf.mean(axis=0), xf.std(axis=0) + 1e-8
        xf, xv, xt = (xf - mu) / sd, (xv - mu) / sd, (xt - mu) / sd

    rng = np.random.default_rng(cfg.seed)
    w = np.zeros((xf.shape[1], n_classes))
    b = np.zeros((1, n_classes))
    vw, vb = np.zeros_like(w), np.zeros_like(b)
    k = 0
    lr = cfg.lr_at(0)
    lrs = []
    best_val, best_test, best_epoch, best_pred = -1.0, 0.0, 0, None
    stale = 0
    epoch = 0
    while epoch < cfg.max_epochs and lr >= cfg.lr_floor:
        lrs.append(lr)
        order = rng.permutation(len(yf))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            gw, gb = _softmax_xent_grad(w, b, xf[idx], yf[idx], n_classes)
            vw = cfg.momentum * vw + gw
            vb = cfg.momentum * vb + gb
            w -= lr * vw
            b -= lr * vb
        epoch += 1
        val_acc = _accuracy(w, b, xv, yv)
        if val_acc > best_val:
            best_val, best_epoch, stale = val_acc, epoch, 0
            best_pred = np.argmax(xt @ w + b, axis=1)
            best_test = float(np.mean(best_pred == test_y))
        else:
            stale += 1
            if stale >= cfg.patience:
                k += 1
                lr = cfg.lr_at(k)
                stale = 0
    per_class = {int(c): float(np.mean(best_pred[test_y == c] == c)) for c in np.unique(test_y)}
    return ProbeResult(best_test, per_class, epoch, lrs, best_epoch, best_val)


def effective_rank(singular_values: np.ndarray) -> float:
    """exp of the Shannon entropy of the normalised singular values."""
    s = np.asarray(singular_values, dtype=np.float64)
    s = s[s > s.max(initial=0.0) * 1e-12]
    if s.size == 0:
        return 0.0
    p = s / s.sum()
    return float(np.exp(-np.sum(p * np.log(p))))


@dataclass
class DiagnosticsReport:
    singular_values: np.ndarray
    effective_rank: float
    mean_cosine: float
    n: int
    d: int = field(default=0)


def representation_diagnostics(features: np.ndarray, center: bool = False) -> DiagnosticsReport:
    """Spectrum, effective rank and mean pairwise cosine of row-normalised features."""
    f = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(f, axis=1, keepdims=True)
    f = f / np.maximum(norms, 1e-12)
    n = len(f)
    col_sum = f.sum(axis=0)
    # mean over ordered pairs i != j of f_i . f_j
    mean_cos = float((col_sum @ col_sum - np.sum(f * f)) / (n * (n - 1))) if n > 1 else 1.0
    if center:
        f = f - f.mean(axis=0)
    s = np.linalg.svd(f, compute_uv=False)
    return DiagnosticsReport(s, effective_rank(s), mean_cos, n, f.shape[1])
