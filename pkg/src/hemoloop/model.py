"""The trainable voxel-wise classifier and the external-runner plug-in seam.

The built-in model is logistic regression over the handcrafted features in
features.py, trained by mini-batch gradient descent on class-balanced
cross-entropy. It is small enough to retrain from scratch every round yet
genuinely learns, so data-more/metrics-better behavior is real and testable.

Real segmentation models attach through run_external(): a child process that
reads and writes the RAWVOL01 grid files defined in rawio.py.
"""

from __future__ import annotations

import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rawio
from .dicomio import VolumeImage
from .errors import NoPositiveVoxels, RunnerCrash, RunnerTimeout, ShapeMismatch
from .features import N_FEATURES, extract_features

DEFAULT_RUNNER_TIMEOUT_S = 300.0

# Negative voxels below this HU are open air, trivially non-lesion; keeping
# them in the sample wrecks the mean/std normalization contrast.
AIR_CUTOFF_HU = -500.0


@dataclass
class TrainConfig:
    epochs: int = 600
    lr: float = 0.1  # linearly decayed to 0 over the run
    batch_size: int = 8192
    seed: int = 0
    class_balance_cap: float = 100.0
    # Smooth background voxels are heavily redundant; cap how many are kept
    # per case. Structured negatives (local std above hard_negative_std_hu,
    # the confusable minority) are always kept, as are all lesion voxels.
    # Sampling is seeded per case and restricted to head voxels
    # (hu >= AIR_CUTOFF_HU).
    neg_sample_per_case: int = 16000
    hard_negative_std_hu: float = 30.0

    def to_json(self) -> dict:
        return {
            "epochs": self.epochs,
            "lr": self.lr,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "class_balance_cap": self.class_balance_cap,
            "neg_sample_per_case": self.neg_sample_per_case,
            "hard_negative_std_hu": self.hard_negative_std_hu,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        return cls(**obj)


@dataclass
class ClassifierParams:
    weights: np.ndarray  # (5,)
    bias: float
    feature_mean: np.ndarray  # (5,)
    feature_std: np.ndarray  # (5,), all > 0
    epochs: int
    lr: float
    seed: int
    case_count: int
    final_loss: float
    epoch_losses: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.feature_mean = np.asarray(self.feature_mean, dtype=np.float64)
        self.feature_std = np.asarray(self.feature_std, dtype=np.float64)
        if np.any(self.feature_std <= 0):
            raise ValueError("feature normalization stds must be > 0")

    def to_json(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "bias": self.bias,
            "feature_mean": self.feature_mean.tolist(),
            "feature_std": self.feature_std.tolist(),
            "epochs": self.epochs,
            "lr": self.lr,
            "seed": self.seed,
            "case_count": self.case_count,
            "final_loss": self.final_loss,
            "epoch_losses": self.epoch_losses,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ClassifierParams":
        return cls(
            weights=np.array(obj["weights"]),
            bias=obj["bias"],
            feature_mean=np.array(obj["feature_mean"]),
            feature_std=np.array(obj["feature_std"]),
            epochs=obj["epochs"],
            lr=obj["lr"],
            seed=obj["seed"],
            case_count=obj["case_count"],
            final_loss=obj["final_loss"],
            epoch_losses=list(obj["epoch_losses"]),
        )


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def loss_and_grad(weights, bias, x, y, sample_weights):
    """Weighted-mean cross-entropy and its analytic gradient.

    x is (n, 5) of normalized features, y in {0,1}, sample_weights > 0.
    Returns (loss, grad_weights, grad_bias).
    """
    weights = np.asarray(weights, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    sw = np.asarray(sample_weights, dtype=np.float64)
    z = x @ weights + bias
    # log(1+exp(z)) without overflow
    log1pexp = np.where(z > 0, z + np.log1p(np.exp(-np.abs(z))), np.log1p(np.exp(z)))
    ce = log1pexp - y * z
    w_total = sw.sum()
    loss = float((sw * ce).sum() / w_total)
    p = sigmoid(z)
    residual = sw * (p - y) / w_total
    grad_w = x.T @ residual
    grad_b = float(residual.sum())
    return loss, grad_w, grad_b


def _sample_case(feats: np.ndarray, volume_hu: np.ndarray, mask: np.ndarray,
                 config: "TrainConfig", rng: np.random.Generator):
    flat_mask = mask.reshape(-1)
    head = volume_hu.reshape(-1) >= AIR_CUTOFF_HU
    pos_idx = np.flatnonzero(flat_mask)
    neg = ~flat_mask & head
    if not neg.any():  # degenerate fixtures may sit entirely below cutoff
        neg = ~flat_mask
    hard = neg & (feats[:, 2] >= config.hard_negative_std_hu)
    smooth_idx = np.flatnonzero(neg & ~hard)
    cap = config.neg_sample_per_case
    if cap and len(smooth_idx) > cap:
        smooth_idx = rng.choice(smooth_idx, size=cap, replace=False)
        smooth_idx.sort()
    neg_idx = np.concatenate([np.flatnonzero(hard), smooth_idx])
    neg_idx.sort()
    return pos_idx, neg_idx


def build_training_set(cases, config: TrainConfig):
    """Stack sampled per-voxel rows from (volume, mask) pairs.

    Returns (x, y) with x raw (un-normalized) features. Deterministic for a
    fixed seed and case order.
    """
    xs = []
    ys = []
    for index, (volume, mask) in enumerate(cases):
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != volume.shape:
            raise ShapeMismatch(
                f"case {index}: mask shape {mask.shape} != volume shape {volume.shape}"
            )
        feats = extract_features(volume).reshape(-1, N_FEATURES)
        rng = np.random.default_rng([config.seed, index])
        pos_idx, neg_idx = _sample_case(feats, np.asarray(volume.voxels), mask,
                                        config, rng)
        keep = np.concatenate([pos_idx, neg_idx])
        xs.append(feats[keep])
        ys.append(np.concatenate([
            np.ones(len(pos_idx), dtype=np.float64),
            np.zeros(len(neg_idx), dtype=np.float64),
        ]))
    x = np.concatenate(xs, axis=0)
    y = np.concatenate(ys, axis=0)
    if y.sum() == 0:
        raise NoPositiveVoxels("training set contains no positive voxels")
    return x, y


def train(cases, config: TrainConfig | None = None) -> ClassifierParams:
    """Fit the logistic model; bit-identical results for identical inputs."""
    config = config or TrainConfig()
    if not cases:
        raise NoPositiveVoxels("no training cases")
    x_raw, y = build_training_set(cases, config)

    mean = x_raw.mean(axis=0)
    std = x_raw.std(axis=0)
    std = np.where(std > 1e-9, std, 1.0)
    x = (x_raw - mean) / std

    n_pos = float(y.sum())
    n_neg = float(len(y) - n_pos)
    pos_weight = min(n_neg / n_pos, config.class_balance_cap) if n_pos else 1.0
    sw = np.where(y == 1.0, pos_weight, 1.0)

    # Adam steps: the intensity features are strongly correlated, and plain
    # constant-step updates crawl along the poorly conditioned directions.
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    theta = np.zeros(N_FEATURES + 1, dtype=np.float64)  # weights + bias
    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    step = 0
    rng = np.random.default_rng([config.seed, 0x5eed])
    n = len(y)
    epoch_losses: list[float] = []
    for epoch in range(config.epochs):
        lr_epoch = config.lr * (1.0 - epoch / config.epochs)
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            _, grad_w, grad_b = loss_and_grad(theta[:-1], theta[-1],
                                              x[batch], y[batch], sw[batch])
            grad = np.concatenate([grad_w, [grad_b]])
            step += 1
            m1 = beta1 * m1 + (1 - beta1) * grad
            m2 = beta2 * m2 + (1 - beta2) * grad * grad
            m1_hat = m1 / (1 - beta1 ** step)
            m2_hat = m2 / (1 - beta2 ** step)
            theta -= lr_epoch * m1_hat / (np.sqrt(m2_hat) + eps)
        loss, _, _ = loss_and_grad(theta[:-1], theta[-1], x, y, sw)
        epoch_losses.append(loss)
    weights = theta[:-1]
    bias = float(theta[-1])

    return ClassifierParams(
        weights=weights,
        bias=bias,
        feature_mean=mean,
        feature_std=std,
        epochs=config.epochs,
        lr=config.lr,
        seed=config.seed,
        case_count=len(cases),
        final_loss=epoch_losses[-1],
        epoch_losses=epoch_losses,
    )


def predict(params: ClassifierParams, volume: VolumeImage) -> np.ndarray:
    """Per-voxel bleed probability grid, same shape as the volume."""
    feats = extract_features(volume)
    x = (feats.reshape(-1, N_FEATURES) - params.feature_mean) / params.feature_std
    p = sigmoid(x @ params.weights + params.bias)
    return p.reshape(volume.shape)


def training_accuracy(params: ClassifierParams, cases, config: TrainConfig) -> float:
    """Voxel accuracy over the same sampled set train() saw."""
    x_raw, y = build_training_set(cases, config)
    x = (x_raw - params.feature_mean) / params.feature_std
    p = sigmoid(x @ params.weights + params.bias)
    return float(((p >= 0.5) == (y == 1.0)).mean())


# --- external runner seam -----------------------------------------------------

def run_external(
    runner_descriptor: dict,
    volume: VolumeImage,
    timeout_s: float | None = None,
) -> np.ndarray:
    """Invoke a child-process model: argv + --in <raw volume> --out <raw probs>.

    The descriptor is {"argv": [...], "timeout_s": optional}. The child must
    exit 0 and write a float32 RAWVOL01 grid of the input shape.
    """
    argv = list(runner_descriptor["argv"])
    if timeout_s is None:
        timeout_s = float(runner_descriptor.get("timeout_s", DEFAULT_RUNNER_TIMEOUT_S))
    with tempfile.TemporaryDirectory(prefix="hemoloop-runner-") as tmp:
        in_path = Path(tmp) / "volume.raw"
        out_path = Path(tmp) / "probs.raw"
        rawio.write_grid(in_path, np.asarray(volume.voxels, dtype=np.float32),
                         volume.spacing, volume.origin)
        try:
            proc = subprocess.run(
                argv + ["--in", str(in_path), "--out", str(out_path)],
                capture_output=True,
                timeout=timeout_s,
            )
        except subprocess.TimeoutExpired:
            raise RunnerTimeout(f"runner exceeded {timeout_s} s")
        if proc.returncode != 0:
            raise RunnerCrash(
                f"runner exited {proc.returncode}: {proc.stderr.decode(errors='replace')[:500]}"
            )
        if not out_path.exists():
            raise RunnerCrash("runner exited 0 but wrote no output file")
        probs, _, _ = rawio.read_grid(out_path)
    if probs.shape != volume.shape:
        raise ShapeMismatch(
            f"runner returned shape {probs.shape}, expected {volume.shape}"
        )
    return probs.astype(np.float64)
