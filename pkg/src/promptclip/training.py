"""Symmetric InfoNCE training with a learnable temperature.

Losses operate on a similarity matrix ``S`` with ``S[i, j] = sim(v_i, t_j)``
(images on rows, texts on columns).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .corpus import PairRecord, load_image_features
from .encoders import DualEncoder, ModelConfig, Temperature

__all__ = [
    "Temperature", "TrainConfig", "TrainResult", "TrainingDiverged", "NonFiniteError", "cosine_similarity_matrix",
    "info_nce_i2t", "info_nce_t2i", "clip_loss", "batch_loss", "train", "finite_difference_check",
    "GradCheckResult", "write_trace_csv",
]

log = logging.getLogger(__name__)

UNIT_TOL = 1e-6


class NonFiniteError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 10
    learning_rate: float = 3e-6
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    use_llm_backend: bool = True
    use_learnable_prompt: bool = True

    def to_json(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_json(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        raw["betas"] = tuple(raw.get("betas", (0.9, 0.999)))
        return cls(**raw)


def _as_tensor(x) -> torch.Tensor:
    if torch.is_tensor(x):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def cosine_similarity_matrix(V, T, check_norm: bool = True) -> torch.Tensor:
    """``S[i, j] = <v_i, t_j>`` for unit-norm rows."""
    V, T = _as_tensor(V), _as_tensor(T)
    if V.ndim != 2 or V.shape != T.shape:
        raise ValueError(f"shape mismatch: V {tuple(V.shape)} vs T {tuple(T.shape)}")
    if check_norm:
        for name, M in (("V", V), ("T", T)):
            dev = (M.detach().norm(dim=1) - 1).abs().max() if len(M) else 0.0
            if dev > UNIT_TOL:
                raise ValueError(f"rows of {name} are not unit norm (max deviation {float(dev):.3g})")
    return V @ T.T


def _tau_tensor(tau, like: torch.Tensor) -> torch.Tensor:
    if isinstance(tau, Temperature):
        tau = tau.tau
    tau = tau if torch.is_tensor(tau) else torch.tensor(float(tau), dtype=like.dtype)
    if not bool(tau > 0):
        raise ValueError(f"temperature must be positive, got {float(tau)}")
    return tau


def info_nce_i2t(S, tau) -> torch.Tensor:
    """Mean cross-entropy of each row's softmax against the diagonal."""
    S = _as_tensor(S)
    if S.ndim != 2 or S.shape[0] != S.shape[1] or S.shape[0] < 1:
        raise ValueError(f"expected a non-empty square similarity matrix, got {tuple(S.shape)}")
    if not torch.isfinite(S).all():
        raise NonFiniteError("similarity matrix has non-finite entries")
    logits = S / _tau_tensor(tau, S)
    shifted = logits - logits.max(dim=1, keepdim=True).values.detach()
    log_norm = shifted.exp().sum(dim=1).log()
    return (log_norm - shifted.diagonal()).mean()


def info_nce_t2i(S, tau) -> torch.Tensor:
    return info_nce_i2t(_as_tensor(S).T, tau)


def clip_loss(S, tau) -> torch.Tensor:
    return info_nce_i2t(S, tau) + info_nce_t2i(S, tau)


def batch_loss(model: DualEncoder, captions: Sequence[str], features) -> tuple:
    """(loss_i2t, loss_t2i, total) for one batch."""
    t = model.encode_texts(captions)
    v = model.encode_images(features)
    S = v @ t.T  # both sides already unit-normalized
    tau = model.temperature.tau
    l_i2t, l_t2i = info_nce_i2t(S, tau), info_nce_t2i(S, tau)
    return l_i2t, l_t2i, l_i2t + l_t2i


@dataclass
class TrainResult:
    model: DualEncoder
    config: TrainConfig
    trace: list = field(default_factory=list)  # per-step dicts
    epoch_losses: list = field(default_factory=list)
    backend_digest_before: str = ""
    backend_digest_after: str = ""


def _features_matrix(records: Sequence[PairRecord], base_dir=None) -> np.ndarray:
    return np.stack([load_image_features(r.image_ref, base_dir) for r in records])


def train(records: Sequence[PairRecord], model: DualEncoder | None = None, config: TrainConfig | None = None,
          model_config: ModelConfig | None = None, base_dir=None, max_steps: int | None = None) -> TrainResult:
    """Optimize the trainable partition with Adam on the symmetric loss.

    Batches are reshuffled every epoch from ``config.seed``; the final
    incomplete batch is dropped. ``max_steps`` stops early (used for short
    smoke runs).
    """
    config = config or TrainConfig()
    if model is None:
        model_config = model_config or ModelConfig.for_ablation(config.use_llm_backend, config.use_learnable_prompt)
        model = DualEncoder(model_config, seed=config.seed)
    if max_steps is not None and max_steps < 1:
        raise ValueError(f"max_steps must be at least 1, got {max_steps}")
    records = list(records)
    n_batches = len(records) // config.batch_size
    if n_batches < 1:
        raise ValueError(f"need at least one full batch of {config.batch_size} pairs, got {len(records)}")

    features = _features_matrix(records, base_dir)
    captions = [r.caption for r in records]
    params = model.trainable_parameters(config.use_learnable_prompt)
    if not config.use_learnable_prompt:
        model.prompt.vectors.requires_grad_(False)
    optimizer = torch.optim.Adam(params.values(), lr=config.learning_rate, betas=tuple(config.betas),
                                 eps=config.adam_eps)
    gen = torch.Generator().manual_seed(config.seed)
    result = TrainResult(model, config, backend_digest_before=model.backend.digest())

    step = 0
    for epoch in range(config.epochs):
        order = torch.randperm(len(records), generator=gen).tolist()
        epoch_total = 0.0
        done = 0
        for b in range(n_batches):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            optimizer.zero_grad(set_to_none=True)
            try:
                l_i2t, l_t2i, loss = batch_loss(model, [captions[i] for i in idx], features[idx])
            except NonFiniteError as exc:
                raise TrainingDiverged(step, float("nan")) from exc
            if not torch.isfinite(loss):
                raise TrainingDiverged(step, float(loss))
            loss.backward()
            optimizer.step()
            result.trace.append({
                "epoch": epoch, "step": step, "loss_i2t": l_i2t.item(), "loss_t2i": l_t2i.item(),
                "loss_total": loss.item(), "tau": model.temperature.tau.item(),
            })
            epoch_total += loss.item()
            done += 1
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        result.epoch_losses.append(epoch_total / done)
        log.info("epoch %d loss %.5f tau %.4f", epoch, result.epoch_losses[-1], model.temperature.tau.item())
        if max_steps is not None and step >= max_steps:
            break
    result.backend_digest_after = model.backend.digest()
    return result


def write_trace_csv(trace: Sequence[dict], path) -> None:
    cols = ["epoch", "step", "loss_i2t", "loss_t2i", "loss_total", "tau"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in trace:
            writer.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in cols})


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_dev: float
    worst: str
    n_coords: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_dev < self.tolerance


def finite_difference_check(loss_fn: Callable[[], torch.Tensor], params: dict, epsilon: float = 1e-5,
                            tolerance: float = 1e-4, floor: float = 1e-5) -> GradCheckResult:
    """Compare autograd gradients with central differences on every coordinate.

    ``params`` maps names to leaf tensors (perturbed in place and restored).
    The relative deviation of a coordinate is
    ``|g - g_fd| / max(|g|, |g_fd|, floor)``; frozen tensors (no
    ``requires_grad``) count as analytic gradient zero.
    """
    for p in params.values():
        if p.grad is not None:
            p.grad = None
    tracked = [p for p in params.values() if p.requires_grad]
    grads = {}
    if tracked:
        loss = loss_fn()
        grads = dict(zip([n for n, p in params.items() if p.requires_grad],
                         torch.autograd.grad(loss, tracked, allow_unused=True)))

    worst, worst_name, n = 0.0, "", 0
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            g = torch.zeros_like(p) if g is None else g
            flat, gflat = p.view(-1), g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + epsilon
                up = loss_fn().item()
                flat[i] = orig - epsilon
                down = loss_fn().item()
                flat[i] = orig
                fd = (up - down) / (2 * epsilon)
                a = gflat[i].item()
                rel = abs(a - fd) / max(abs(a), abs(fd), floor)
                n += 1
                if rel > worst or math.isnan(rel):
                    worst, worst_name = rel, f"{name}[{i}]"
    return GradCheckResult(worst, worst_name, n, tolerance)
