"""Per-patch classifier trained with the 2D lattice loss and ADADELTA.

The image is cut into non-overlapping patches; each patch is mapped to class
logits by an affine layer (optionally preceded by one ReLU hidden layer). The
result is the ``(H, W, Q)`` logits grid the lattice loss consumes.
"""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from msra.core import Alphabet, softmax_grid
from msra.decode import GroupingStrategy, argmax_grid, decode_with_strategy
from msra.lattice import LambdaParams, loss_and_logit_grad
from msra.metrics import aggregate, match_sets

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class PatchClassifier:
    n_classes: int
    patch_h: int = 28
    patch_w: int = 28
    hidden: int = 0
    params: dict = field(default_factory=dict)

    @property
    def patch_size(self) -> int:
        return self.patch_h * self.patch_w

    def param_shapes(self) -> dict:
        P, Q, h = self.patch_size, self.n_classes, self.hidden
        if h:
            return {"W1": (h, P), "b1": (h,), "W2": (Q, h), "b2": (Q,)}
        return {"W": (Q, P), "b": (Q,)}

    def grid_shape(self, image_shape) -> tuple[int, int]:
        h, w = image_shape
        if h % self.patch_h or w % self.patch_w:
            raise ValueError(
                f"image {h}x{w} is not divisible into {self.patch_h}x{self.patch_w} patches"
            )
        return h // self.patch_h, w // self.patch_w


def init_model(n_classes: int, *, patch=(28, 28), hidden: int = 0, seed: int = 0,
               zero: bool = False) -> PatchClassifier:
    model = PatchClassifier(n_classes, patch[0], patch[1], hidden)
    rng = np.random.default_rng(seed)
    for name, shape in model.param_shapes().items():
        if zero or len(shape) == 1:
            model.params[name] = np.zeros(shape)
        else:
            model.params[name] = rng.normal(0.0, math.sqrt(2.0 / shape[1]), size=shape)
    return model


def extract_patches(img: np.ndarray, model: PatchClassifier) -> np.ndarray:
    """``(H*W, patch_size)`` matrix of patches scaled to [0, 1], row-major over cells."""
    img = np.asarray(img)
    H, W = model.grid_shape(img.shape)
    ph, pw = model.patch_h, model.patch_w
    patches = img.reshape(H, ph, W, pw).transpose(0, 2, 1, 3).reshape(H * W, ph * pw)
    return patches.astype(np.float64) / 255.0


def forward_model(img: np.ndarray, model: PatchClassifier) -> np.ndarray:
    H, W = model.grid_shape(np.shape(img))
    X = extract_patches(img, model)
    p = model.params
    if model.hidden:
        a = np.maximum(X @ p["W1"].T + p["b1"], 0.0)
        out = a @ p["W2"].T + p["b2"]
    else:
        out = X @ p["W"].T + p["b"]
    return out.reshape(H, W, model.n_classes)


def backward_model(img: np.ndarray, model: PatchClassifier, logit_grad: np.ndarray) -> dict:
    """Parameter gradients given the loss gradient w.r.t. the logits grid."""
    H, W = model.grid_shape(np.shape(img))
    if np.shape(logit_grad) != (H, W, model.n_classes):
        raise ValueError(f"logit gradient shape {np.shape(logit_grad)} != {(H, W, model.n_classes)}")
    X = extract_patches(img, model)
    G = np.asarray(logit_grad, dtype=np.float64).reshape(H * W, model.n_classes)
    p = model.params
    if not model.hidden:
        return {"W": G.T @ X, "b": G.sum(axis=0)}
    pre = X @ p["W1"].T + p["b1"]
    a = np.maximum(pre, 0.0)
    da = (G @ p["W2"]) * (pre > 0)
    return {"W1": da.T @ X, "b1": da.sum(axis=0), "W2": G.T @ a, "b2": G.sum(axis=0)}


@dataclass
class AdadeltaState:
    rho: float = 0.95
    eps: float = 1e-6
    sq_grad: dict = field(default_factory=dict)
    sq_delta: dict = field(default_factory=dict)


def adadelta_step(params: dict, grads: dict, state: AdadeltaState) -> dict:
    """One ADADELTA update, applied in place; returns ``params``."""
    rho, eps = state.rho, state.eps
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {params[name].shape}")
        eg = state.sq_grad.setdefault(name, np.zeros_like(g))
        ed = state.sq_delta.setdefault(name, np.zeros_like(g))
        eg *= rho
        eg += (1 - rho) * g * g
        delta = -np.sqrt(ed + eps) / np.sqrt(eg + eps) * g
        ed *= rho
        ed += (1 - rho) * delta * delta
        params[name] += delta
    return params


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    rho: float = 0.95
    eps: float = 1e-6
    lambda1: float = 0.9
    lambda2: float = 0.1
    seed: int = 0
    loss: str = "mean"
    hidden: int = 0
    patch_h: int = 28
    patch_w: int = 28
    strategy: str = "rows"
    alphabet: str = "0123456789"
    checkpoint: str | None = None
    log_path: str | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    @property
    def lam(self) -> LambdaParams:
        return LambdaParams(self.lambda1, self.lambda2)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def _encode_targets(targets, alphabet):
    return [alphabet.encode(t) for t in targets]


def sample_loss_grad(model, record, alphabet, config):
    z = forward_model(record.image, model)
    res, gz = loss_and_logit_grad(
        z, _encode_targets(record.targets, alphabet), config.lam, variant=config.loss
    )
    return res.loss, backward_model(record.image, model, gz)


def dataset_loss(model, records, config: TrainConfig) -> float:
    """Mean per-image loss without updating anything."""
    alphabet = Alphabet(config.alphabet)
    total = 0.0
    for rec in records:
        z = forward_model(rec.image, model)
        total += loss_and_logit_grad(z, _encode_targets(rec.targets, alphabet), config.lam,
                                     variant=config.loss)[0].loss
    return total / max(len(records), 1)


def train(records, config: TrainConfig, *, test_records=None, model: PatchClassifier | None = None,
          on_epoch: Callable[[dict], None] | None = None):
    """Mini-batch training. Returns ``(model, history)``; one history entry per epoch."""
    alphabet = Alphabet(config.alphabet)
    records = list(records)
    if model is None:
        model = init_model(alphabet.size, patch=(config.patch_h, config.patch_w),
                           hidden=config.hidden, seed=config.seed)
    state = AdadeltaState(config.rho, config.eps)
    rng = np.random.default_rng([config.seed, 1])
    history = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(records))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            acc = None
            for idx in batch:
                loss, grads = sample_loss_grad(model, records[idx], alphabet, config)
                if not math.isfinite(loss):
                    raise DivergenceError(
                        f"non-finite loss {loss} at epoch {epoch}, sample {int(idx)}, "
                        f"targets {records[idx].targets}"
                    )
                total += loss
                if acc is None:
                    acc = grads
                else:
                    for k in acc:
                        acc[k] += grads[k]
            for k in acc:
                acc[k] /= len(batch)
            adadelta_step(model.params, acc, state)
        entry = {"epoch": epoch + 1, "loss": total / len(records), "seconds": time.perf_counter() - t0}
        if test_records is not None:
            m = evaluate(model, test_records, config.strategy, alphabet)
            entry.update({"NED": m["NED"], "SA": m["SA"], "IA": m["IA"]})
        history.append(entry)
        log.info("epoch %s", json.dumps(entry, sort_keys=True))
        if on_epoch is not None:
            on_epoch(entry)
        if config.checkpoint:
            save_checkpoint(config.checkpoint, model, config)
    if config.checkpoint and not config.epochs:
        save_checkpoint(config.checkpoint, model, config)
    if config.log_path:
        Path(config.log_path).write_text(json.dumps(history, indent=2) + "\n")
    return model, history


def predict(model, image, strategy="rows", alphabet: Alphabet | None = None) -> list[str]:
    alphabet = alphabet or Alphabet()
    x = softmax_grid(forward_model(image, model))
    return decode_with_strategy(argmax_grid(x), strategy, alphabet).strings(alphabet)


def evaluate(model, records, strategy: GroupingStrategy | str = "rows",
             alphabet: Alphabet | None = None, *, return_reports: bool = False):
    """Decode every record and score NED/SA/IA.

    ``model`` may be a :class:`PatchClassifier` or any callable mapping an
    image to a probability grid.
    """
    alphabet = alphabet or Alphabet()
    reports = []
    for rec in records:
        if isinstance(model, PatchClassifier):
            x = softmax_grid(forward_model(rec.image, model))
        else:
            x = model(rec.image)
        preds = decode_with_strategy(argmax_grid(x), strategy, alphabet).sequences
        reports.append(match_sets(preds, _encode_targets(rec.targets, alphabet)))
    metrics = aggregate(reports)
    return (metrics, reports) if return_reports else metrics


# -- checkpoints ---------------------------------------------------------------
# Layout: u32 little-endian header length, UTF-8 JSON header, then the
# parameters as little-endian float64 in header order.

CKPT_MAGIC = b"MSRAckpt"


def save_checkpoint(path, model: PatchClassifier, config: TrainConfig | None = None) -> None:
    names = list(model.param_shapes())
    header = {
        "n_classes": model.n_classes,
        "patch": [model.patch_h, model.patch_w],
        "hidden": model.hidden,
        "params": [[n, list(model.params[n].shape)] for n in names],
        "config": asdict(config) if config is not None else None,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(model.params[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[PatchClassifier, dict]:
    data = Path(path).read_bytes()
    if data[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    off = len(CKPT_MAGIC)
    (n,) = struct.unpack("<I", data[off : off + 4])
    off += 4
    header = json.loads(data[off : off + n].decode("utf-8"))
    off += n
    model = PatchClassifier(header["n_classes"], *header["patch"], header["hidden"])
    for name, shape in header["params"]:
        size = int(np.prod(shape)) * 8
        if off + size > len(data):
            raise ValueError(f"checkpoint truncated in parameter {name}")
        model.params[name] = np.frombuffer(data[off : off + size], dtype="<f8").reshape(shape).astype(np.float64)
        off += size
    if off != len(data):
        raise ValueError("trailing bytes after checkpoint parameters")
    return model, header
