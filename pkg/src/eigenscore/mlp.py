"""A small fully-connected denoiser trained on the denoising objective.

The network maps (x_t, log sigma) to an estimate of the clean x.  Forward,
backward, and the Adam update are written out in numpy so the gradient can
be checked against finite differences; training is sequential and
deterministic given (dataset, config, seed).

Checkpoint format: magic "MLPD", then little-endian u32 version, u32 layer
count L, L+1 u32 layer widths, followed by float64 parameters in layer
order, each layer as W (row-major, shape out x in) then b.  A JSON sidecar
with the architecture and training config is written next to it.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import (
    BadRangeError,
    CheckpointFormatError,
    DimMismatchError,
    DivergedLossError,
    EmptyDatasetError,
    NonFiniteParametersError,
)
from .rng import LANE_TRAIN, RngStream
from .schedule import NoiseSchedule

CKPT_MAGIC = b"MLPD"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    steps: int = 20000
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    log_every: int = 0  # 0 disables progress lines

    def to_dict(self) -> dict:
        return asdict(self)


class MlpDenoiser:
    """tanh MLP denoiser conditioned on log sigma.

    Hidden widths default to (128, 128); input width is dim + 1 for the
    log-sigma channel and the output is linear with width dim.
    """

    def __init__(self, dim: int, hidden: tuple[int, ...] = (128, 128), seed: int = 0):
        if dim < 1:
            raise BadRangeError(f"dim must be >= 1, got {dim}")
        if any(h < 1 for h in hidden):
            raise BadRangeError(f"hidden widths must be >= 1, got {hidden}")
        self.dim = int(dim)
        self.widths = (self.dim + 1, *map(int, hidden), self.dim)
        gen = RngStream(seed, (LANE_TRAIN, 0)).generator()
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            scale = np.sqrt(2.0 / (fan_in + fan_out))
            self.weights.append(scale * gen.standard_normal((fan_out, fan_in)))
            self.biases.append(np.zeros(fan_out))

    # -- forward ----------------------------------------------------------

    def _check_params(self) -> None:
        for arr in (*self.weights, *self.biases):
            if not np.all(np.isfinite(arr)):
                raise NonFiniteParametersError("parameters contain non-finite values")

    def _features(self, x2: np.ndarray, sigma) -> np.ndarray:
        logs = np.log(np.broadcast_to(np.asarray(sigma, dtype=float), (x2.shape[0],)))
        return np.concatenate([x2, logs[:, None]], axis=1)

    def _forward(self, feats: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        acts = [feats]
        h = feats
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if i < last:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def forward(self, x, sigma):
        """Denoise x_t at noise level sigma; batched over a leading axis."""
        a = np.asarray(x, dtype=float)
        single = a.ndim == 1
        if single:
            a = a[None, :]
        if a.ndim != 2 or a.shape[1] != self.dim:
            raise DimMismatchError(f"expected points of dim {self.dim}, got shape {np.shape(x)}")
        if np.any(np.asarray(sigma, dtype=float) <= 0.0):
            raise BadRangeError("sigma must be positive")
        self._check_params()
        out, _ = self._forward(self._features(a, sigma))
        return out[0] if single else out

    # denoiser contract used by the spectral engine
    denoise = forward

    # -- loss and gradients ----------------------------------------------

    def loss_and_grads(self, x_t: np.ndarray, sigma: np.ndarray, target: np.ndarray):
        """Mean over the batch of ||target - out||^2, plus parameter grads."""
        feats = self._features(np.asarray(x_t, dtype=float), sigma)
        out, acts = self._forward(feats)
        err = out - np.asarray(target, dtype=float)
        n = x_t.shape[0]
        loss = float(np.sum(err * err) / n)
        grad_w = [np.empty_like(w) for w in self.weights]
        grad_b = [np.empty_like(b) for b in self.biases]
        delta = 2.0 * err / n
        for i in range(len(self.weights) - 1, -1, -1):
            grad_w[i] = delta.T @ acts[i]
            grad_b[i] = delta.sum(axis=0)
            if i > 0:
                # acts[i] holds tanh output of layer i for i < last layer
                delta = (delta @ self.weights[i]) * (1.0 - acts[i] * acts[i])
        return loss, grad_w, grad_b

    def train(self, data: np.ndarray, schedule: NoiseSchedule, config: TrainConfig) -> list[float]:
        """Minimize the denoising objective; returns the per-step loss trace.

        Each step draws a batch with replacement, a uniform timestep per
        sample, and fresh noise, all from one sequential stream keyed by
        config.seed.
        """
        x = np.asarray(data, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise DimMismatchError(f"expected dataset of dim {self.dim}, got shape {data.shape}")
        if x.shape[0] == 0:
            raise EmptyDatasetError("training dataset is empty")
        if config.steps < 1 or config.batch_size < 1:
            raise BadRangeError("steps and batch_size must be >= 1")

        gen = RngStream(config.seed, (LANE_TRAIN, 1)).generator()
        n = x.shape[0]
        m_w = [np.zeros_like(w) for w in self.weights]
        v_w = [np.zeros_like(w) for w in self.weights]
        m_b = [np.zeros_like(b) for b in self.biases]
        v_b = [np.zeros_like(b) for b in self.biases]
        b1, b2, eps, lr = config.beta1, config.beta2, config.eps, config.lr
        trace: list[float] = []
        for step in range(1, config.steps + 1):
            idx = gen.integers(0, n, size=config.batch_size)
            t = gen.integers(1, schedule.t_max + 1, size=config.batch_size)
            sig = schedule.sigmas[t - 1]
            clean = x[idx]
            noisy = clean + sig[:, None] * gen.standard_normal((config.batch_size, self.dim))
            loss, grad_w, grad_b = self.loss_and_grads(noisy, sig, clean)
            if not np.isfinite(loss):
                raise DivergedLossError(f"loss became non-finite at step {step}")
            trace.append(loss)
            c1 = 1.0 - b1**step
            c2 = 1.0 - b2**step
            for params, grads, ms, vs in (
                (self.weights, grad_w, m_w, v_w),
                (self.biases, grad_b, m_b, v_b),
            ):
                for p, g, m, v in zip(params, grads, ms, vs):
                    m *= b1
                    m += (1.0 - b1) * g
                    v *= b2
                    v += (1.0 - b2) * g * g
                    p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
            if config.log_every and step % config.log_every == 0:
                recent = trace[-config.log_every:]
                print(f"step {step}: loss {np.mean(recent):.6f}")
        return trace

    # -- checkpoints ------------------------------------------------------

    def save(self, path, train_config: TrainConfig | None = None) -> None:
        self._check_params()
        parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
        parts.append(struct.pack("<I", len(self.weights)))
        parts.append(struct.pack(f"<{len(self.widths)}I", *self.widths))
        for w, b in zip(self.weights, self.biases):
            parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
        from .tensorio import atomic_write_bytes, atomic_write_text

        atomic_write_bytes(path, b"".join(parts))
        sidecar = {
            "widths": list(self.widths),
            "hidden": list(self.widths[1:-1]),
            "dim": self.dim,
            "activation": "tanh",
            "input": "x_t concatenated with log sigma",
            "train": train_config.to_dict() if train_config else None,
        }
        atomic_write_text(str(path) + ".json", json.dumps(sidecar, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "MlpDenoiser":
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:4] != CKPT_MAGIC:
            raise CheckpointFormatError(f"bad magic {blob[:4]!r}, expected {CKPT_MAGIC!r}")
        (version,) = struct.unpack_from("<I", blob, 4)
        if version != CKPT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        (n_layers,) = struct.unpack_from("<I", blob, 8)
        widths = struct.unpack_from(f"<{n_layers + 1}I", blob, 12)
        model = cls.__new__(cls)
        model.dim = widths[-1]
        model.widths = tuple(widths)
        if widths[0] != model.dim + 1:
            raise CheckpointFormatError(
                f"input width {widths[0]} does not match output dim {model.dim} + 1"
            )
        offset = 12 + 4 * (n_layers + 1)
        model.weights, model.biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            for shape in ((fan_out, fan_in), (fan_out,)):
                count = int(np.prod(shape))
                end = offset + 8 * count
                if end > len(blob):
                    raise CheckpointFormatError("checkpoint truncated")
                arr = np.frombuffer(blob[offset:end], dtype="<f8").reshape(shape).copy()
                offset = end
                if len(shape) == 2:
                    model.weights.append(arr)
                else:
                    model.biases.append(arr)
        if offset != len(blob):
            raise CheckpointFormatError("checkpoint has trailing bytes")
        model._check_params()
        return model
