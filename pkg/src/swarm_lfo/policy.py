"""Behavior cloning: datasets of (state, environment, label) and a small MLP."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dynamics import Arena, Controller

ARCHITECTURE = (16, 32, 32, 5)
MODEL_MAGIC = "swarm-lfo-mlp"
MODEL_VERSION = 1


class TrainingDivergedError(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# features


def _feature_scale(arena: Arena, n_robot: int, n_env: int) -> np.ndarray:
    h = arena.half_extents
    return np.concatenate([np.tile(h, n_robot // 2), np.tile(h, n_env // 2)])


def build_features(robot_state, env_meas, arena: Arena = Arena()) -> np.ndarray:
    """``[robot_state; env_meas]`` divided by the arena half-extent per axis.

    Works on single vectors or on batches stacked along the first axis.
    """
    rs = np.asarray(robot_state, dtype=float)
    em = np.asarray(env_meas, dtype=float)
    if not (np.all(np.isfinite(rs)) and np.all(np.isfinite(em))):
        raise ValueError("features need finite inputs")
    feats = np.concatenate([rs, em], axis=-1)
    return feats / _feature_scale(arena, rs.shape[-1], em.shape[-1])


def denormalize_features(features, arena: Arena = Arena(), n_robot: int = 10):
    f = np.asarray(features, dtype=float)
    return f * _feature_scale(arena, n_robot, f.shape[-1] - n_robot)


# ---------------------------------------------------------------------------
# network


@dataclass
class MlpParams:
    weights: list[np.ndarray]   # W[l] has shape (fan_in, fan_out)
    biases: list[np.ndarray]

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def with_flat(self, vec) -> "MlpParams":
        out, pos = self.copy(), 0
        for w, b in zip(out.weights, out.biases):
            w[...] = vec[pos:pos + w.size].reshape(w.shape)
            pos += w.size
            b[...] = vec[pos:pos + b.size]
            pos += b.size
        return out


def init_params(rng: np.random.Generator, sizes: Sequence[int] = ARCHITECTURE) -> MlpParams:
    """Uniform +-sqrt(6 / (fan_in + fan_out)) weights, zero biases."""
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return MlpParams(ws, bs)


def zero_params(sizes: Sequence[int] = ARCHITECTURE) -> MlpParams:
    return MlpParams([np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
                     [np.zeros(b) for b in sizes[1:]])


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _forward_cache(params: MlpParams, X: np.ndarray):
    acts = [X]
    h = X
    last = len(params.weights) - 1
    for l, (W, b) in enumerate(zip(params.weights, params.biases)):
        a = h @ W + b
        h = a if l == last else np.tanh(a)
        acts.append(h)
    return acts


def forward(params: MlpParams, features) -> np.ndarray:
    """Class probabilities (tanh hidden layers, softmax output)."""
    X = np.atleast_2d(np.asarray(features, dtype=float))
    probs = softmax(_forward_cache(params, X)[-1])
    return probs[0] if np.ndim(features) == 1 else probs


def loss_and_grads(params: MlpParams, X, y) -> tuple[float, MlpParams]:
    """Mean cross-entropy and its gradient; ``y`` holds class indices."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=np.int64)
    acts = _forward_cache(params, X)
    logits = acts[-1]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    B = X.shape[0]
    loss = -float(np.mean(logp[np.arange(B), y]))
    delta = np.exp(logp)
    delta[np.arange(B), y] -= 1.0
    delta /= B
    gw, gb = [None] * len(params.weights), [None] * len(params.weights)
    for l in range(len(params.weights) - 1, -1, -1):
        gw[l] = acts[l].T @ delta
        gb[l] = delta.sum(axis=0)
        if l:
            delta = (delta @ params.weights[l].T) * (1.0 - acts[l] ** 2)
    return loss, MlpParams(gw, gb)


def predict_proba(params: MlpParams, robot_state, env_meas, arena: Arena = Arena()) -> np.ndarray:
    return forward(params, build_features(robot_state, env_meas, arena))


def predict_controller(params: MlpParams, robot_state, env_meas, arena: Arena = Arena()) -> Controller:
    """Most probable controller; ties go to the lowest label."""
    p = predict_proba(params, robot_state, env_meas, arena)
    return Controller.from_index(int(np.argmax(p)))


class ImitatorPolicy:
    """Learned controller selector usable in a rollout (acts on measured state)."""

    observes = "measured"

    def __init__(self, params: MlpParams, arena: Arena = Arena()):
        self.params = params
        self.arena = arena

    def reset(self) -> None:
        pass

    def __call__(self, x, e_meas) -> Controller:
        return predict_controller(self.params, x, e_meas, self.arena)

    def predict_batch(self, robot_states, env_meas) -> np.ndarray:
        probs = forward(self.params, build_features(robot_states, env_meas, self.arena))
        return np.argmax(np.atleast_2d(probs), axis=1) + 1


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    """Episode-grouped step records, stored column-wise.

    ``labels`` are controller ids (1..5); ``robot_state`` is the true state
    for ground-truth data and the fused IMM estimate for inferred data.
    """

    episode: np.ndarray
    step: np.ndarray
    labels: np.ndarray
    robot_state: np.ndarray
    env_meas: np.ndarray
    variant: str = "GT"
    extras: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def episodes(self) -> np.ndarray:
        return np.unique(self.episode)

    @property
    def num_episodes(self) -> int:
        return len(self.episodes)

    def subset(self, mask) -> "Dataset":
        return Dataset(self.episode[mask], self.step[mask], self.labels[mask],
                       self.robot_state[mask], self.env_meas[mask], self.variant,
                       {k: v[mask] for k, v in self.extras.items()})

    def split(self, rng: np.random.Generator, train_fraction: float = 0.8):
        """Disjoint train/validation partitions by whole episodes."""
        eps = self.episodes
        if len(eps) < 2:
            raise ValueError("need at least two episodes to split")
        order = rng.permutation(eps)
        n_train = min(max(1, int(round(train_fraction * len(eps)))), len(eps) - 1)
        train_eps = np.sort(order[:n_train])
        mask = np.isin(self.episode, train_eps)
        return self.subset(mask), self.subset(~mask)

    def features(self, arena: Arena = Arena()) -> np.ndarray:
        return build_features(self.robot_state, self.env_meas, arena)


def assemble_dataset(log, mode: str = "GT", imm_trace=None) -> Dataset:
    """Dataset from a mission log.

    GT pairs the expert's labels with the true team state; IMM pairs the MAP
    labels with the fused estimates. Both use the logged environment
    measurements. Steps before the first attack are dropped.
    """
    mode = mode.upper()
    keep = log.episode >= 0
    extras = {"e_true": log.e_true[keep], "x_true": log.x_true[keep], "true_label": log.labels[keep]}
    if mode == "GT":
        labels, state = log.labels[keep], log.x_true[keep]
    elif mode == "IMM":
        if imm_trace is None or len(imm_trace.map_labels) != log.num_steps:
            raise ValueError("IMM dataset needs one IMM output per logged step")
        labels, state = imm_trace.map_labels[keep], imm_trace.estimates[keep]
        extras["mu"] = imm_trace.mu[keep]
        extras["x_est"] = state
    else:
        raise ValueError(f"unknown dataset mode {mode!r}")
    return Dataset(log.episode[keep], np.flatnonzero(keep), np.asarray(labels, dtype=np.int64),
                   np.asarray(state, dtype=float), log.e_meas[keep], mode, extras)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-3
    momentum: float = 0.9
    patience: int = 10
    max_epochs: int = 200
    train_fraction: float = 0.8


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    best_epoch: int = -1
    epochs_run: int = 0

    @property
    def final_val_accuracy(self) -> float:
        return self.val_accuracy[self.best_epoch] if self.val_accuracy else float("nan")

    @property
    def final_train_accuracy(self) -> float:
        return self.train_accuracy[self.best_epoch] if self.train_accuracy else float("nan")


def evaluate(params: MlpParams, X, y) -> tuple[float, float]:
    """(mean cross-entropy, accuracy) over class-index labels ``y``."""
    probs = np.atleast_2d(forward(params, X))
    y = np.asarray(y)
    p = np.clip(probs[np.arange(len(y)), y], 1e-300, None)
    return float(-np.mean(np.log(p))), float(np.mean(np.argmax(probs, axis=1) == y))


def fit(X, y, rng: np.random.Generator, cfg: TrainConfig = TrainConfig(), X_val=None, y_val=None,
        params: MlpParams | None = None, sizes: Sequence[int] = ARCHITECTURE):
    """Mini-batch momentum SGD on class indices ``y``.

    Early-stops on validation accuracy (training accuracy when no validation
    data is given) and returns the best epoch's parameters.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("empty training partition")
    params = params.copy() if params is not None else init_params(rng, sizes)
    vel_w = [np.zeros_like(w) for w in params.weights]
    vel_b = [np.zeros_like(b) for b in params.biases]
    report = TrainReport()
    best, best_acc, stale = params.copy(), -1.0, 0
    n = len(y)
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, g = loss_and_grads(params, X[idx], y[idx])
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch starting {start} "
                    f"(lr={cfg.learning_rate}, momentum={cfg.momentum})"
                )
            for l in range(len(params.weights)):
                vel_w[l] *= cfg.momentum
                vel_w[l] -= cfg.learning_rate * g.weights[l]
                params.weights[l] += vel_w[l]
                vel_b[l] *= cfg.momentum
                vel_b[l] -= cfg.learning_rate * g.biases[l]
                params.biases[l] += vel_b[l]
        tl, ta = evaluate(params, X, y)
        if not math.isfinite(tl):
            raise TrainingDivergedError(f"non-finite training loss after epoch {epoch}")
        report.train_loss.append(tl)
        report.train_accuracy.append(ta)
        if X_val is not None and len(y_val):
            vl, va = evaluate(params, X_val, y_val)
        else:
            vl, va = tl, ta
        report.val_loss.append(vl)
        report.val_accuracy.append(va)
        report.epochs_run = epoch + 1
        if va > best_acc:
            best, best_acc, stale = params.copy(), va, 0
            report.best_epoch = epoch
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return best, report


def train(dataset: Dataset, cfg: TrainConfig, rng: np.random.Generator, arena: Arena = Arena()):
    """80/20 episode split, then :func:`fit`. Returns (params, report)."""
    train_part, val_part = dataset.split(rng, cfg.train_fraction)
    X, y = train_part.features(arena), train_part.labels - 1
    Xv, yv = val_part.features(arena), val_part.labels - 1
    return fit(X, y, rng, cfg, Xv, yv)


# ---------------------------------------------------------------------------
# model file


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def dumps_model(params: MlpParams, config_hash: str = "") -> str:
    buf = io.StringIO()
    buf.write(f"{MODEL_MAGIC} {MODEL_VERSION}\n")
    sizes = "-".join(str(s) for s in params.sizes)
    buf.write(f"architecture {sizes};tanh;softmax\n")
    buf.write(f"config_hash {config_hash}\n")
    for l, (W, b) in enumerate(zip(params.weights, params.biases)):
        buf.write(f"weights {l} {W.shape[0]} {W.shape[1]}\n")
        for row in W:
            buf.write(" ".join(_fmt(v) for v in row) + "\n")
        buf.write(f"biases {l} {b.size}\n")
        buf.write(" ".join(_fmt(v) for v in b) + "\n")
    return buf.getvalue()


def loads_model(text: str) -> tuple[MlpParams, str]:
    """Parse a model file; returns (params, config hash)."""
    lines = text.splitlines()
    head = lines[0].split()
    if len(head) != 2 or head[0] != MODEL_MAGIC:
        raise ValueError("not a swarm-lfo model file")
    if int(head[1]) != MODEL_VERSION:
        raise ValueError(f"unsupported model version {head[1]}")
    arch = lines[1].split(maxsplit=1)[1]
    sizes_str, hidden, out = arch.split(";")
    if hidden != "tanh" or out != "softmax":
        raise ValueError(f"unsupported architecture {arch!r}")
    sizes = [int(s) for s in sizes_str.split("-")]
    config_hash = lines[2].split(maxsplit=1)[1] if len(lines[2].split()) > 1 else ""
    pos = 3
    ws, bs = [], []
    for l in range(len(sizes) - 1):
        tag, idx, rows, cols = lines[pos].split()
        if tag != "weights" or int(idx) != l or (int(rows), int(cols)) != (sizes[l], sizes[l + 1]):
            raise ValueError(f"bad weight header at line {pos + 1}")
        pos += 1
        W = np.array([[float(v) for v in lines[pos + r].split()] for r in range(int(rows))])
        pos += int(rows)
        tag, idx, size = lines[pos].split()
        if tag != "biases" or int(size) != sizes[l + 1]:
            raise ValueError(f"bad bias header at line {pos + 1}")
        b = np.array([float(v) for v in lines[pos + 1].split()])
        pos += 2
        if W.shape != (sizes[l], sizes[l + 1]) or b.shape != (sizes[l + 1],):
            raise ValueError(f"layer {l} has the wrong shape")
        ws.append(W)
        bs.append(b)
    return MlpParams(ws, bs), config_hash


def save_model(path, params: MlpParams, config_hash: str = "") -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(dumps_model(params, config_hash))


def load_model(path) -> tuple[MlpParams, str]:
    with open(path, encoding="ascii") as fh:
        return loads_model(fh.read())
