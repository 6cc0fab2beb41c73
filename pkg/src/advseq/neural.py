"""Windowed recurrent binary classifiers in numpy with exact backpropagation.

Inputs are windows of ``m`` token indices, interpreted as ``m x (|D|+1)`` one-hot
matrices. The first recurrent layer looks up rows of its input weight matrix
instead of multiplying by the one-hot matrix; gradients with respect to the
one-hot input are recovered as ``dpreact @ Wx.T``.

Everything runs in float64.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .seqdata import BENIGN, MALICIOUS, Dataset, split_windows

log = logging.getLogger(__name__)

CELLS = ("rnn", "lstm", "gru")
_GATES = {"rnn": 1, "lstm": 4, "gru": 3}
CHECKPOINT_VERSION = 1
_CHUNK = 256


@dataclass(frozen=True)
class ModelConfig:
    vocab_width: int
    window: int = 140
    cell: str = "lstm"
    hidden_units: int = 128
    bidirectional: bool = False
    depth: int = 1
    dense_units: int = 0
    dropout_rate: float = 0.2
    seed: int = 0
    pooling: str = "last"

    def __post_init__(self):
        if self.cell not in CELLS:
            raise ValueError(f"cell must be one of {CELLS}, got {self.cell!r}")
        if self.hidden_units < 1:
            raise ValueError("hidden_units must be >= 1")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.vocab_width < 2:
            raise ValueError("vocab_width must cover padding plus at least one token")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.dense_units < 0:
            raise ValueError("dense_units must be >= 0")
        if self.pooling != "last":
            raise ValueError("only final-state pooling is supported")

    @property
    def directions(self) -> tuple[str, ...]:
        return ("fwd", "bwd") if self.bidirectional else ("fwd",)


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float | None = None
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.optimizer not in ("adam", "adadelta"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass(frozen=True)
class RnnClassifier:
    config: ModelConfig
    params: dict = field(repr=False)
    trained: bool = False

    @property
    def window(self) -> int:
        return self.config.window

    def confidences(self, windows) -> np.ndarray:
        return window_confidences(self, windows)


# --------------------------------------------------------------------------
# initialisation


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    H, G = cfg.hidden_units, _GATES[cfg.cell]
    shapes = {}
    width_in = cfg.vocab_width
    for layer in range(cfg.depth):
        for d in cfg.directions:
            pre = f"rnn{layer}.{d}."
            shapes[pre + "Wx"] = (width_in, G * H)
            shapes[pre + "Wh"] = (H, G * H)
            shapes[pre + "b"] = (G * H,)
        width_in = H * len(cfg.directions)
    if cfg.dense_units:
        shapes["dense.W"] = (width_in, cfg.dense_units)
        shapes["dense.b"] = (cfg.dense_units,)
        width_in = cfg.dense_units
    shapes["out.W"] = (width_in,)
    shapes["out.b"] = ()
    return shapes


def init_model(config: ModelConfig) -> RnnClassifier:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases (LSTM forget bias 1)."""
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in _param_shapes(config).items():
        if name.endswith(".b") or name == "out.b" or name == "dense.b":
            arr = np.zeros(shape)
            if config.cell == "lstm" and name.startswith("rnn"):
                H = config.hidden_units
                arr[H : 2 * H] = 1.0
        else:
            fan_in = shape[0]
            if name.endswith("Wx") and name.startswith("rnn0"):
                # one-hot rows: a single row is active per step
                fan_in = 1 + config.hidden_units
            limit = 1.0 / math.sqrt(fan_in)
            arr = rng.uniform(-limit, limit, size=shape)
        params[name] = arr
    return RnnClassifier(config, params, trained=False)


# --------------------------------------------------------------------------
# recurrent cells


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _cell_forward(cell, xproj, Wh, hmask):
    B, T, _ = xproj.shape
    H = Wh.shape[0]
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    hs = np.empty((B, T, H))
    steps = []
    for t in range(T):
        hm = h if hmask is None else h * hmask
        if cell == "rnn":
            h = np.tanh(xproj[:, t] + hm @ Wh)
            steps.append((hm, h))
        elif cell == "lstm":
            a = xproj[:, t] + hm @ Wh
            i = _sigmoid(a[:, :H])
            f = _sigmoid(a[:, H : 2 * H])
            g = np.tanh(a[:, 2 * H : 3 * H])
            o = _sigmoid(a[:, 3 * H :])
            c_prev = c
            c = f * c_prev + i * g
            tc = np.tanh(c)
            h = o * tc
            steps.append((hm, i, f, g, o, c_prev, tc))
        else:
            x = xproj[:, t]
            a_zr = x[:, : 2 * H] + hm @ Wh[:, : 2 * H]
            z = _sigmoid(a_zr[:, :H])
            r = _sigmoid(a_zr[:, H:])
            rh = r * hm
            n = np.tanh(x[:, 2 * H :] + rh @ Wh[:, 2 * H :])
            h_prev = h
            h = z * h_prev + (1.0 - z) * n
            steps.append((hm, h_prev, z, r, rh, n))
        hs[:, t] = h
    return hs, steps


def _cell_backward(cell, dH, steps, Wh, hmask):
    """Backpropagate ``dH`` (gradient w.r.t. every output state) through time."""
    B, T, H = dH.shape
    G = Wh.shape[1]
    dxproj = np.empty((B, T, G))
    dWh = np.zeros_like(Wh)
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        dh = dH[:, t] + dh_next
        if cell == "rnn":
            hm, h = steps[t]
            da = dh * (1.0 - h * h)
            dWh += hm.T @ da
            dhm = da @ Wh.T
            dh_direct = 0.0
        elif cell == "lstm":
            hm, i, f, g, o, c_prev, tc = steps[t]
            do = dh * tc
            dc = dh * o * (1.0 - tc * tc) + dc_next
            da = np.concatenate(
                [
                    dc * g * i * (1.0 - i),
                    dc * c_prev * f * (1.0 - f),
                    dc * i * (1.0 - g * g),
                    do * o * (1.0 - o),
                ],
                axis=1,
            )
            dc_next = dc * f
            dWh += hm.T @ da
            dhm = da @ Wh.T
            dh_direct = 0.0
        else:
            hm, h_prev, z, r, rh, n = steps[t]
            dn = dh * (1.0 - z)
            da_n = dn * (1.0 - n * n)
            drh = da_n @ Wh[:, 2 * H :].T
            da_z = dh * (h_prev - n) * z * (1.0 - z)
            da_r = drh * hm * r * (1.0 - r)
            da = np.concatenate([da_z, da_r, da_n], axis=1)
            dWh[:, : 2 * H] += hm.T @ da[:, : 2 * H]
            dWh[:, 2 * H :] += rh.T @ da_n
            dhm = da[:, : 2 * H] @ Wh[:, : 2 * H].T + drh * r
            dh_direct = dh * z
        dxproj[:, t] = da
        dh_next = dh_direct + (dhm if hmask is None else dhm * hmask)
    return dxproj, dWh


# --------------------------------------------------------------------------
# whole network


def _forward(model: RnnClassifier, X: np.ndarray, rng: np.random.Generator | None = None):
    """Logits for a batch of windows; dropout is active iff ``rng`` is given."""
    cfg, p = model.config, model.params
    dense_input = np.ndim(X) == 3
    X = np.asarray(X, dtype=np.float64 if dense_input else np.int64)
    B, T = X.shape[:2]
    keep = 1.0 - cfg.dropout_rate
    drop = rng is not None and cfg.dropout_rate > 0
    cache = {"X": X, "layers": []}
    inp = None
    outs = []
    for layer in range(cfg.depth):
        outs = []
        layer_cache = []
        for d in cfg.directions:
            pre = f"rnn{layer}.{d}."
            Wx, Wh, b = p[pre + "Wx"], p[pre + "Wh"], p[pre + "b"]
            if layer == 0 and dense_input:
                xproj = X @ Wx
                xin = None
            elif layer == 0:
                if drop:
                    mask = (rng.random((B, cfg.vocab_width)) < keep) / keep
                    scale = mask[np.arange(B)[:, None], X]
                else:
                    scale = None
                xproj = Wx[X] if scale is None else Wx[X] * scale[..., None]
                xin = scale
            else:
                if drop:
                    fmask = (rng.random((B, inp.shape[-1])) < keep) / keep
                    xin = inp * fmask[:, None, :]
                else:
                    fmask = None
                    xin = inp
                xproj = xin @ Wx
                xin = (xin, fmask)
            xproj = xproj + b
            hmask = (rng.random((B, cfg.hidden_units)) < keep) / keep if drop else None
            if d == "bwd":
                xproj = xproj[:, ::-1]
            hs, steps = _cell_forward(cfg.cell, xproj, Wh, hmask)
            if d == "bwd":
                hs = hs[:, ::-1]
            outs.append(hs)
            layer_cache.append((xin, hmask, steps))
        cache["layers"].append(layer_cache)
        inp = outs[0] if len(outs) == 1 else np.concatenate(outs, axis=-1)
    pooled = [outs[0][:, -1]]
    if cfg.bidirectional:
        pooled.append(outs[1][:, 0])
    feat = pooled[0] if len(pooled) == 1 else np.concatenate(pooled, axis=1)
    cache["feat"] = feat
    cache["top"] = inp
    if cfg.dense_units:
        a = feat @ p["dense.W"] + p["dense.b"]
        r = np.maximum(a, 0.0)
        cache["dense"] = (a, r)
        feat = r
    logit = feat @ p["out.W"] + p["out.b"]
    return logit, cache


def _backward(model: RnnClassifier, cache, dlogit: np.ndarray, want_input: bool = False, want_params: bool = True):
    """Gradients of ``sum(dlogit * logit)``; optionally the one-hot input gradient."""
    cfg, p = model.config, model.params
    X = cache["X"]
    B, T = X.shape
    H = cfg.hidden_units
    grads = {}
    if cfg.dense_units:
        a, r = cache["dense"]
        if want_params:
            grads["out.W"] = r.T @ dlogit
            grads["out.b"] = np.asarray(dlogit.sum())
        dr = np.outer(dlogit, p["out.W"])
        da = dr * (a > 0)
        if want_params:
            grads["dense.W"] = cache["feat"].T @ da
            grads["dense.b"] = da.sum(axis=0)
        dfeat = da @ p["dense.W"].T
    else:
        if want_params:
            grads["out.W"] = cache["feat"].T @ dlogit
            grads["out.b"] = np.asarray(dlogit.sum())
        dfeat = np.outer(dlogit, p["out.W"])

    ndir = len(cfg.directions)
    width_top = H * ndir
    dtop = np.zeros((B, T, width_top))
    dtop[:, -1, :H] = dfeat[:, :H]
    if cfg.bidirectional:
        dtop[:, 0, H:] += dfeat[:, H:]

    d_onehot = None
    for layer in range(cfg.depth - 1, -1, -1):
        dinp = None
        for k, d in enumerate(cfg.directions):
            pre = f"rnn{layer}.{d}."
            Wx, Wh = p[pre + "Wx"], p[pre + "Wh"]
            xin, hmask, steps = cache["layers"][layer][k]
            dH = dtop[:, :, k * H : (k + 1) * H]
            if d == "bwd":
                dH = dH[:, ::-1]
            dxproj, dWh = _cell_backward(cfg.cell, dH, steps, Wh, hmask)
            if d == "bwd":
                dxproj = dxproj[:, ::-1]
            G = dxproj.shape[-1]
            if want_params:
                grads[pre + "Wh"] = dWh
                grads[pre + "b"] = dxproj.sum(axis=(0, 1))
            if layer == 0:
                scale = xin
                if want_params:
                    onehot = np.zeros((B * T, cfg.vocab_width))
                    onehot[np.arange(B * T), X.reshape(-1)] = 1.0 if scale is None else scale.reshape(-1)
                    grads[pre + "Wx"] = onehot.T @ dxproj.reshape(-1, G)
                if want_input:
                    contrib = dxproj @ Wx.T
                    d_onehot = contrib if d_onehot is None else d_onehot + contrib
            else:
                xval, fmask = xin
                if want_params:
                    grads[pre + "Wx"] = xval.reshape(-1, xval.shape[-1]).T @ dxproj.reshape(-1, G)
                contrib = dxproj @ Wx.T
                if fmask is not None:
                    contrib = contrib * fmask[:, None, :]
                dinp = contrib if dinp is None else dinp + contrib
        if layer > 0:
            dtop = dinp
    return grads, d_onehot


# --------------------------------------------------------------------------
# inference


def _check_windows(model: RnnClassifier, windows) -> np.ndarray:
    X = np.asarray(windows, dtype=np.int64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != model.config.window:
        raise ValueError(f"windows must have length {model.config.window}, got shape {X.shape}")
    if X.size and (X.min() < 0 or X.max() >= model.config.vocab_width):
        raise ValueError("token index out of range for this model")
    return X


def window_logits(model: RnnClassifier, windows) -> np.ndarray:
    X = _check_windows(model, windows)
    out = np.empty(len(X))
    for s in range(0, len(X), _CHUNK):
        out[s : s + _CHUNK] = _forward(model, X[s : s + _CHUNK])[0]
    return out


def window_confidences(model: RnnClassifier, windows) -> np.ndarray:
    """Malicious-class confidence per window, dropout disabled."""
    return _sigmoid(window_logits(model, windows))


def forward_window(model: RnnClassifier, window, train_mode: bool = False, rng=None) -> float:
    X = _check_windows(model, window)
    if len(X) != 1:
        raise ValueError("forward_window takes exactly one window")
    if train_mode:
        rng = rng if rng is not None else np.random.default_rng(model.config.seed)
        return float(_sigmoid(_forward(model, X, rng)[0][0]))
    return float(_sigmoid(_forward(model, X)[0][0]))


def sequence_windows(seq: Sequence[int], m: int, offset: int = 0) -> np.ndarray:
    """Windows of the view ``seq[offset:]``."""
    return split_windows(list(seq)[offset:], m)


def classify_sequence(model: RnnClassifier, seq, threshold: float = 0.5, offset: int = 0):
    """(label, per-window confidences); malicious iff any window reaches ``threshold``."""
    conf = window_confidences(model, sequence_windows(seq, model.window, offset))
    return (MALICIOUS if (conf >= threshold).any() else BENIGN), conf


def predict_sequences(model: RnnClassifier, seqs, threshold: float = 0.5, offset: int = 0):
    """Vectorised ``classify_sequence``: (labels, max window confidence) per sequence."""
    wins, owner = [], []
    for k, s in enumerate(seqs):
        w = sequence_windows(s, model.window, offset)
        wins.append(w)
        owner.extend([k] * len(w))
    if not wins:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    conf = window_confidences(model, np.concatenate(wins))
    best = np.full(len(wins), -np.inf)
    np.maximum.at(best, np.asarray(owner), conf)
    return (best >= threshold).astype(np.int64), best


def onehot_logit(model: RnnClassifier, onehot) -> float:
    """Logit for a real-valued ``(m, |D|+1)`` input matrix (one-hot or relaxed)."""
    M = np.asarray(onehot, dtype=np.float64)
    if M.shape != (model.config.window, model.config.vocab_width):
        raise ValueError(f"expected input of shape {(model.config.window, model.config.vocab_width)}")
    return float(_forward(model, M[None])[0][0])


def input_jacobian(model: RnnClassifier, window) -> np.ndarray:
    """d(malicious logit)/d(one-hot input), shape ``(m, |D|+1)``."""
    X = _check_windows(model, window)
    logit, cache = _forward(model, X)
    _, d_onehot = _backward(model, cache, np.ones(1), want_input=True, want_params=False)
    return d_onehot[0]


def evaluate_accuracy(model: RnnClassifier, dataset: Dataset, threshold: float = 0.5) -> tuple[float, float]:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred, _ = predict_sequences(model, dataset.sequences, threshold)
    return accuracy_fpr(pred, dataset.labels)


def accuracy_fpr(pred, labels) -> tuple[float, float]:
    pred, labels = np.asarray(pred), np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot score an empty prediction set")
    acc = float((pred == labels).mean())
    benign = labels == BENIGN
    fpr = float((pred[benign] == MALICIOUS).mean()) if benign.any() else 0.0
    return acc, fpr


# --------------------------------------------------------------------------
# training


def dataset_windows(dataset: Dataset, m: int, offset: int = 0):
    """Every window of every sample, labelled with its sample's label."""
    X, y = [], []
    for s in dataset:
        w = sequence_windows(s.seq, m, offset)
        X.append(w)
        y.extend([s.label] * len(w))
    if not X:
        return np.zeros((0, m), dtype=np.int64), np.zeros(0)
    return np.concatenate(X), np.asarray(y, dtype=np.float64)


class _Adam:
    def __init__(self, params, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps, self.t = lr, b1, b2, eps, 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] = params[k] - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class _Adadelta:
    def __init__(self, params, lr=1.0, rho=0.95, eps=1e-7):
        self.lr, self.rho, self.eps = lr, rho, eps
        self.eg = {k: np.zeros_like(v) for k, v in params.items()}
        self.ex = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        for k, g in grads.items():
            self.eg[k] = self.rho * self.eg[k] + (1 - self.rho) * g * g
            dx = np.sqrt(self.ex[k] + self.eps) / np.sqrt(self.eg[k] + self.eps) * g
            self.ex[k] = self.rho * self.ex[k] + (1 - self.rho) * dx * dx
            params[k] = params[k] - self.lr * dx


def bce_with_logits(logit, y) -> float:
    return float(np.mean(np.logaddexp(0.0, logit) - y * logit))


def train(model: RnnClassifier, dataset: Dataset, cfg: TrainConfig, offset: int = 0):
    """Train on every window of ``dataset``; returns (new model, per-epoch mean loss)."""
    if len(dataset) == 0:
        raise ValueError("training split is empty")
    X, y = dataset_windows(dataset, model.window, offset)
    return train_windows(model, X, y, cfg)


def train_windows(model: RnnClassifier, X: np.ndarray, y: np.ndarray, cfg: TrainConfig):
    X = _check_windows(model, X)
    y = np.asarray(y, dtype=np.float64)
    params = {k: v.copy() for k, v in model.params.items()}
    work = replace(model, params=params)
    if cfg.optimizer == "adam":
        opt = _Adam(params, lr=cfg.learning_rate or 1e-3)
    else:
        opt = _Adadelta(params, lr=cfg.learning_rate or 1.0)
    rng = np.random.default_rng(cfg.seed)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(X))
        total = 0.0
        for s in range(0, len(X), cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            logit, cache = _forward(work, X[idx], rng)
            loss = bce_with_logits(logit, y[idx])
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch starting {s}")
            dlogit = (_sigmoid(logit) - y[idx]) / len(idx)
            grads, _ = _backward(work, cache, dlogit)
            if cfg.clip_norm:
                norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
                if norm > cfg.clip_norm:
                    grads = {k: g * (cfg.clip_norm / norm) for k, g in grads.items()}
            opt.step(params, grads)
            total += loss * len(idx)
        history.append(total / len(X))
        log.debug("epoch %d loss %.4f", epoch, history[-1])
    return RnnClassifier(model.config, params, trained=True), history


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: RnnClassifier, path) -> None:
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "trained": model.trained,
        "shapes": {k: list(v.shape) for k, v in model.params.items()},
    }
    arrays = {f"param/{k}": np.array(v, dtype=np.float64, order="C") for k, v in model.params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header)), **arrays)


def load_checkpoint(path) -> RnnClassifier:
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
        cfg = ModelConfig(**header["config"])
        expected = _param_shapes(cfg)
        params = {}
        for name, shape in expected.items():
            key = f"param/{name}"
            if key not in data:
                raise ValueError(f"checkpoint missing parameter {name}")
            arr = np.array(data[key], dtype=np.float64)
            if arr.shape != tuple(shape):
                raise ValueError(f"parameter {name} has shape {arr.shape}, expected {shape}")
            params[name] = arr
    return RnnClassifier(cfg, params, trained=header.get("trained", True))
