"""Feed-forward predictor of session-2 target-region activity.

PAIRED inputs are ``[R1[t] | A1[t] | R2[u_t]]`` with target ``A2[u_t]``;
NO_FEEDBACK inputs are a frame's own rest vector with its own target
vector.  The network is a plain MLP trained with Adam on the mean (over
target voxels) squared error.  Everything runs in float64.
"""

from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .matching import MatchMap
from .volume import Cohort

log = logging.getLogger(__name__)

PAIRED = "paired"
NO_FEEDBACK = "no_feedback"
ACTIVATIONS = ("relu", "tanh", "linear")


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class PredictorConfig:
    hidden_layers: tuple[int, ...] = (256, 128)
    activation: str = "relu"
    learning_rate: float = 1e-3
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    input_mode: str = PAIRED

    def __post_init__(self):
        self.hidden_layers = tuple(int(h) for h in self.hidden_layers)
        if any(h < 1 for h in self.hidden_layers):
            raise ValueError("hidden layer widths must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.input_mode not in (PAIRED, NO_FEEDBACK):
            raise ValueError(f"unknown input_mode {self.input_mode!r}")


@dataclass
class TrainSample:
    input: np.ndarray
    target: np.ndarray
    subject_id: str
    t: int
    u_t: int
    session: int = 0


@dataclass
class Dataset:
    """Stacked samples; row ``i`` of every array belongs to sample ``i``."""

    inputs: np.ndarray
    targets: np.ndarray
    subject_ids: np.ndarray
    t: np.ndarray
    u: np.ndarray
    session: np.ndarray

    def __len__(self) -> int:
        return int(self.inputs.shape[0])

    def __getitem__(self, i) -> TrainSample:
        return TrainSample(
            self.inputs[i], self.targets[i], str(self.subject_ids[i]), int(self.t[i]), int(self.u[i]), int(self.session[i])
        )


def build_dataset(cohort: Cohort, matches: dict[str, MatchMap] | None, mode: str = PAIRED, ids=None) -> Dataset:
    ids = cohort.ids if ids is None else list(ids)
    X, Y, sid, ts, us, ms = [], [], [], [], [], []
    for s_id in ids:
        s = cohort[s_id]
        T = s.n_frames
        if mode == PAIRED:
            if matches is None or s_id not in matches:
                raise ValueError(f"no match map for subject {s_id}")
            u = np.asarray(matches[s_id].u)
            X.append(np.hstack([s.rests[0], s.targets[0], s.rests[1][u]]))
            Y.append(s.targets[1][u])
            us.append(u)
            ts.append(np.arange(T))
            ms.append(np.zeros(T, np.int64))
            sid.extend([s_id] * T)
        elif mode == NO_FEEDBACK:
            for m in range(len(s.sessions)):
                X.append(s.rests[m])
                Y.append(s.targets[m])
                ts.append(np.arange(T))
                us.append(np.arange(T))
                ms.append(np.full(T, m, np.int64))
                sid.extend([s_id] * T)
        else:
            raise ValueError(f"unknown mode {mode!r}")
    return Dataset(
        np.vstack(X), np.vstack(Y), np.array(sid), np.concatenate(ts), np.concatenate(us), np.concatenate(ms)
    )


@dataclass
class PredictorModel:
    config: PredictorConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input_mean: np.ndarray
    input_scale: np.ndarray
    history: list[dict] = field(default_factory=list, repr=False)

    @property
    def input_dim(self) -> int:
        return int(self.weights[0].shape[0])

    @property
    def output_dim(self) -> int:
        return int(self.weights[-1].shape[1])

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


def init_model(config: PredictorConfig, input_dim: int, output_dim: int, input_mean=None, input_scale=None) -> PredictorModel:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    sizes = [input_dim, *config.hidden_layers, output_dim]
    gain = 2.0 if config.activation == "relu" else 1.0
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.normal(0.0, np.sqrt(gain / fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    mean = np.zeros(input_dim) if input_mean is None else np.asarray(input_mean, dtype=np.float64)
    scale = np.ones(input_dim) if input_scale is None else np.asarray(input_scale, dtype=np.float64)
    return PredictorModel(config, weights, biases, mean, scale)


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, a):
    if name == "relu":
        return (z > 0.0).astype(z.dtype)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


def _forward(model, X):
    h = (np.atleast_2d(X) - model.input_mean) / model.input_scale
    cache = [(None, h)]
    last = len(model.weights) - 1
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ W + b
        h = z if i == last else _act(model.config.activation, z)
        cache.append((z, h))
    return h, cache


def forward(model: PredictorModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.input_dim:
        raise ValueError(f"input length {x.shape[-1]} != model input_dim {model.input_dim}")
    out, _ = _forward(model, x)
    return out[0] if x.ndim == 1 else out


def loss(model: PredictorModel, sample) -> float:
    """Mean over target voxels of the squared prediction error."""
    inp, tgt = (sample.input, sample.target) if hasattr(sample, "input") else sample
    pred = forward(model, inp)
    return float(np.mean((pred - np.asarray(tgt)) ** 2))


def sample_losses(model: PredictorModel, data: Dataset, norm: str = "mean") -> np.ndarray:
    """Per-sample error; ``norm`` is ``"mean"`` (training loss) or ``"sum"`` (squared norm)."""
    pred = forward(model, data.inputs)
    sq = (pred - data.targets) ** 2
    return sq.mean(axis=1) if norm == "mean" else sq.sum(axis=1)


def batch_loss_and_grads(model: PredictorModel, X, Y):
    """Batch-mean loss and its gradients as ``(loss, [dW...], [db...])``."""
    out, cache = _forward(model, X)
    n, n_out = out.shape
    diff = out - Y
    value = float(np.sum(diff * diff) / (n * n_out))
    delta = 2.0 * diff / (n * n_out)
    gW = [None] * len(model.weights)
    gb = [None] * len(model.weights)
    for i in range(len(model.weights) - 1, -1, -1):
        h_prev = cache[i][1]
        gW[i] = h_prev.T @ delta
        gb[i] = delta.sum(axis=0)
        if i > 0:
            z_prev, a_prev = cache[i]
            delta = (delta @ model.weights[i].T) * _act_grad(model.config.activation, z_prev, a_prev)
    return value, gW, gb


def get_params(model: PredictorModel) -> np.ndarray:
    return np.concatenate([p.ravel() for wb in zip(model.weights, model.biases) for p in wb])


def set_params(model: PredictorModel, flat) -> None:
    flat = np.asarray(flat, dtype=np.float64)
    pos = 0
    for i in range(len(model.weights)):
        for arr in (model.weights[i], model.biases[i]):
            arr[...] = flat[pos:pos + arr.size].reshape(arr.shape)
            pos += arr.size


def flat_grad(model, X, Y):
    _, gW, gb = batch_loss_and_grads(model, X, Y)
    return np.concatenate([g.ravel() for wb in zip(gW, gb) for g in wb])


def grad_check(model: PredictorModel, sample, epsilon: float = 1e-5, n_check: int = 200, seed: int = 0, grad_fn=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Checks a random subset of ``n_check`` parameters (all of them if the
    model is smaller).  ``grad_fn(model, X, Y) -> flat gradient`` replaces
    the analytic gradient, which lets tests plant a faulty one.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    X = np.atleast_2d(sample.input if hasattr(sample, "input") else sample[0])
    Y = np.atleast_2d(sample.target if hasattr(sample, "target") else sample[1])
    analytic = (grad_fn or flat_grad)(model, X, Y)
    theta = get_params(model)
    n = theta.size
    rng = np.random.default_rng(seed)
    idx = np.arange(n) if n <= n_check else np.sort(rng.choice(n, size=n_check, replace=False))
    worst = 0.0
    try:
        for i in idx:
            old = theta[i]
            theta[i] = old + epsilon
            set_params(model, theta)
            lp = batch_loss_and_grads(model, X, Y)[0]
            theta[i] = old - epsilon
            set_params(model, theta)
            lm = batch_loss_and_grads(model, X, Y)[0]
            theta[i] = old
            fd = (lp - lm) / (2.0 * epsilon)
            ga = analytic[i]
            worst = max(worst, abs(ga - fd) / max(abs(ga), abs(fd), 1e-8))
    finally:
        set_params(model, theta)
    return worst


def _copy_params(model):
    return [w.copy() for w in model.weights], [b.copy() for b in model.biases]


def mean_loss(model, data: Dataset) -> float:
    return float(np.mean(sample_losses(model, data)))


def train(train_data: Dataset, config: PredictorConfig, val_data: Dataset) -> PredictorModel:
    """Adam on shuffled mini-batches with early stopping on validation loss.

    Returns the parameters from the epoch with the lowest validation loss.
    Input standardization statistics come from ``train_data`` only.
    """
    if len(train_data) == 0 or len(val_data) == 0:
        raise ValueError("training and validation sets must be non-empty")
    mean = train_data.inputs.mean(axis=0)
    scale = train_data.inputs.std(axis=0)
    scale[scale < 1e-12] = 1.0
    model = init_model(config, train_data.inputs.shape[1], train_data.targets.shape[1], mean, scale)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))

    params = model.weights + model.biases
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    b1, b2, lr, eps = config.beta1, config.beta2, config.learning_rate, config.eps
    step = 0

    best_val = mean_loss(model, val_data)
    best = _copy_params(model)
    best_epoch, stale = 0, 0
    n = len(train_data)
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, config.batch_size):
            batch = order[lo:lo + config.batch_size]
            value, gW, gb = batch_loss_and_grads(model, train_data.inputs[batch], train_data.targets[batch])
            if not np.isfinite(value):
                raise NumericalError(f"non-finite training loss at epoch {epoch}, step {step + 1}")
            total += value * batch.size
            step += 1
            c1, c2 = 1.0 - b1**step, 1.0 - b2**step
            for p, g, a, v in zip(params, gW + gb, m1, m2):
                a *= b1
                a += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * g * g
                p -= lr * (a / c1) / (np.sqrt(v / c2) + eps)
        val = mean_loss(model, val_data)
        if not np.isfinite(val):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        model.history.append({"epoch": epoch, "train": total / n, "val": val})
        if val < best_val:
            best_val, best, best_epoch, stale = val, _copy_params(model), epoch, 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.weights, model.biases = best
    log.debug("predictor stopped after %d epochs, best epoch %d (val %.5g)", len(model.history), best_epoch, best_val)
    return model


def eval_baseline_losses(cohort: Cohort, matches: dict[str, MatchMap], train_ids=None, eval_ids=None) -> dict[str, float]:
    """Losses of the trivial predictors of ``A2[u_t]``.

    ``copy_A1`` predicts ``A1[t]``; ``mean_prediction`` predicts each target
    voxel's mean over the ``train_ids`` samples.
    """
    train = build_dataset(cohort, matches, PAIRED, train_ids)
    ev = train if eval_ids is None else build_dataset(cohort, matches, PAIRED, eval_ids)
    n_r, n_a = cohort.n_rest, cohort.n_target
    a1 = ev.inputs[:, n_r:n_r + n_a]
    voxel_mean = train.targets.mean(axis=0)
    return {
        "copy_A1": float(np.mean((a1 - ev.targets) ** 2)),
        "mean_prediction": float(np.mean((voxel_mean - ev.targets) ** 2)),
    }


# -- checkpoint file ----------------------------------------------------------

_CKPT_MAGIC = b"NFPM"
_CKPT_VERSION = 1


def save_model(path, model: PredictorModel) -> None:
    """Checkpoint: magic, version, header length, JSON header, CRC32 of header, float32 blob."""
    blob = np.concatenate([get_params(model), model.input_mean, model.input_scale]).astype("<f4")
    header = {
        "config": {**asdict(model.config), "hidden_layers": list(model.config.hidden_layers)},
        "input_dim": model.input_dim,
        "output_dim": model.output_dim,
        "n_params": model.n_params,
        "history": model.history,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", _CKPT_MAGIC, _CKPT_VERSION, len(hb)))
        fh.write(hb)
        fh.write(struct.pack("<I", zlib.crc32(hb)))
        fh.write(blob.tobytes())


def load_model(path) -> PredictorModel:
    raw = Path(path).read_bytes()
    magic, version, hlen = struct.unpack_from("<4sII", raw)
    if magic != _CKPT_MAGIC or version != _CKPT_VERSION:
        raise ValueError(f"{path}: not a predictor checkpoint")
    hb = raw[12:12 + hlen]
    (crc,) = struct.unpack_from("<I", raw, 12 + hlen)
    if zlib.crc32(hb) != crc:
        raise ValueError(f"{path}: header checksum mismatch")
    header = json.loads(hb)
    config = PredictorConfig(**header["config"])
    model = init_model(config, header["input_dim"], header["output_dim"])
    blob = np.frombuffer(raw, dtype="<f4", offset=16 + hlen).astype(np.float64)
    n, d = header["n_params"], header["input_dim"]
    if blob.size != n + 2 * d:
        raise ValueError(f"{path}: parameter blob has {blob.size} values, expected {n + 2 * d}")
    set_params(model, blob[:n])
    model.input_mean = blob[n:n + d].copy()
    model.input_scale = blob[n + d:].copy()
    model.history = header.get("history", [])
    return model
