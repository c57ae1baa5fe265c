"""Joint L1 + cross-entropy training with Adam, plateau stopping and checkpoints.

The L1 term lives in normalised score space: ``|sigmoid(raw) - total/100|``.
Multiply by 100 to read it as points on the rubric scale.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .atelier import IGNORE_INDEX, TrainSample
from .checkpoint import read_container, write_container
from .errors import ContractError, FormatError, NumericalError
from .model import ModelConfig, ModelOutput, VlmModel, set_trainable
from .qlora import LoraLinear, QuantizedLinear, adapted_layers, base_hash, inject_lora, quantize_model
from .tensor import Tensor
from .vocab import PAD_ID

LOG_FIELDS = ("epoch", "step", "total", "l1", "ce", "held_out_mae", "wall_time")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_reg: float = 1.0
    lambda_gen: float = 1.0
    plateau_patience: int = 3  # 0 disables early stopping
    plateau_min_delta: float = 0.1  # MAE points
    seed: int = 0
    mode: str = "adapters_only"

    def __post_init__(self):
        if self.lambda_reg < 0 or self.lambda_gen < 0 or (self.lambda_reg == 0 and self.lambda_gen == 0):
            raise ContractError("loss weights must be non-negative and not both zero")
        if self.batch_size < 1:
            raise ContractError("batch_size must be at least 1")
        if self.mode not in ("full", "adapters_only"):
            raise ContractError(f"unknown mode {self.mode!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class TrainState:
    mode: str = "adapters_only"
    step: int = 0
    epoch: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    best_mae: float | None = None
    best_epoch: int | None = None
    stale_epochs: int = 0
    stopped_early: bool = False
    history: list[dict] = field(default_factory=list)


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    images: np.ndarray
    tokens: np.ndarray
    targets: np.ndarray  # aligned to visual + text positions
    scoring_pos: np.ndarray
    score: np.ndarray


def collate(samples: Sequence[TrainSample], n_visual: int) -> Batch:
    width = max(len(s.tokens) for s in samples)
    B = len(samples)
    tokens = np.full((B, width), PAD_ID, dtype=np.int64)
    targets = np.full((B, n_visual + width), IGNORE_INDEX, dtype=np.int64)
    for i, s in enumerate(samples):
        toks = s.tokens
        tokens[i, : len(toks)] = toks
        targets[i, n_visual : n_visual + len(toks)] = s.targets()
    return Batch(
        images=np.stack([s.image for s in samples]),
        tokens=tokens,
        targets=targets,
        scoring_pos=np.array([s.scoring_pos for s in samples], dtype=np.int64),
        score=np.array([s.target_score for s in samples]),
    )


def model_forward(model: VlmModel, batch: Batch) -> ModelOutput:
    return model.forward_batch(model.encode_images(batch.images), batch.tokens, batch.scoring_pos)


# ---------------------------------------------------------------- loss


def joint_loss(
    output: ModelOutput,
    target_score_norm,
    target_tokens,
    lambda_reg: float = 1.0,
    lambda_gen: float = 1.0,
) -> tuple[Tensor, Tensor, Tensor]:
    """``lambda_reg * mean|sigmoid(raw) - target| + lambda_gen * CE`` and its two parts."""
    target = np.atleast_1d(np.asarray(target_score_norm, dtype=np.float64))
    if np.any(target < 0) or np.any(target > 1):
        raise ContractError("target scores must be normalised to [0, 1]")
    raw = output.score_raw if output.score_raw.ndim else T.reshape(output.score_raw, (1,))
    l1 = T.mean(T.tabs(T.sub(T.sigmoid(raw), Tensor(target))))
    targets = np.asarray(target_tokens)
    has_tokens = bool(np.any(targets != IGNORE_INDEX))
    if lambda_gen > 0 or has_tokens:
        ce = T.softmax_cross_entropy(output.logits, targets, IGNORE_INDEX)
    else:
        ce = Tensor(0.0)
    total = T.add(T.scale(l1, lambda_reg), T.scale(ce, lambda_gen)) if lambda_gen else T.scale(l1, lambda_reg)
    return total, l1, ce


# ---------------------------------------------------------------- optimisation


def adam_update(params: dict[str, Tensor], state: TrainState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam step over parameters that received a gradient."""
    state.step += 1
    t = state.step
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data = p.data - cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


def train_step(model: VlmModel, params: dict[str, Tensor], state: TrainState, batch: Batch, cfg: TrainConfig):
    T.zero_grad(params.values())
    out = model_forward(model, batch)
    total, l1, ce = joint_loss(out, batch.score, batch.targets, cfg.lambda_reg, cfg.lambda_gen)
    if not math.isfinite(total.item()):
        raise NumericalError(f"loss became {total.item()} at step {state.step + 1}")
    T.backward(total)
    adam_update(params, state, cfg)
    T.zero_grad(params.values())
    return total.item(), l1.item(), ce.item()


def predict_scores(model: VlmModel, samples: Sequence[TrainSample], batch_size: int = 64) -> np.ndarray:
    """Predicted totals on the 0-100 scale."""
    out = []
    nv = model.config.visual_tokens
    with T.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            prompts = [TrainSample(s.id, s.image, s.prompt, [], s.target_score) for s in chunk]
            out.append(model_forward(model, collate(prompts, nv)).score)
    return np.concatenate(out) if out else np.zeros(0)


def train(
    model: VlmModel,
    train_samples: Sequence[TrainSample],
    cfg: TrainConfig,
    held_out: Sequence[TrainSample] | None = None,
    log_path=None,
    state: TrainState | None = None,
    progress=None,
) -> tuple[VlmModel, TrainState]:
    """Train until ``cfg.epochs`` or until held-out MAE stops improving.

    Improvement means beating the best MAE so far by more than
    ``plateau_min_delta`` points; ``plateau_patience`` consecutive epochs
    without it stop training. Without a held-out set the run always uses
    the full epoch budget.
    """
    if not train_samples:
        raise ContractError("training set is empty")
    params = set_trainable(model, cfg.mode)
    state = state or TrainState(mode=cfg.mode)
    nv = model.config.visual_tokens
    n = len(train_samples)
    log = None
    if log_path is not None:
        log_path = Path(log_path)
        fresh = not log_path.exists()
        log = open(log_path, "a", newline="", encoding="utf-8")
        writer = csv.writer(log)
        if fresh:
            writer.writerow(LOG_FIELDS)
    t0 = time.perf_counter()
    try:
        while state.epoch < cfg.epochs and not state.stopped_early:
            perm = np.random.default_rng([cfg.seed, state.epoch]).permutation(n)
            sums = np.zeros(3)
            for i in range(0, n, cfg.batch_size):
                chunk = [train_samples[j] for j in perm[i : i + cfg.batch_size]]
                sums += np.array(train_step(model, params, state, collate(chunk, nv), cfg)) * len(chunk)
            state.epoch += 1
            total, l1, ce = sums / n
            row = {"epoch": state.epoch, "step": state.step, "total": total, "l1": l1, "ce": ce,
                   "held_out_mae": None}
            if held_out:
                pred = predict_scores(model, held_out)
                mae = float(np.mean(np.abs(pred - 100.0 * np.array([s.target_score for s in held_out]))))
                row["held_out_mae"] = mae
                if state.best_mae is None or mae < state.best_mae - cfg.plateau_min_delta:
                    state.best_mae, state.best_epoch, state.stale_epochs = mae, state.epoch, 0
                else:
                    state.stale_epochs += 1
                    if cfg.plateau_patience and state.stale_epochs >= cfg.plateau_patience:
                        state.stopped_early = True
            state.history.append(row)
            if log is not None:
                writer.writerow([row[k] if k != "wall_time" else round(time.perf_counter() - t0, 3)
                                 for k in LOG_FIELDS])
                log.flush()
            if progress is not None:
                progress(row)
    finally:
        if log is not None:
            log.close()
    T.zero_grad(params.values())
    return model, state


# ---------------------------------------------------------------- model construction


def build_model(config: ModelConfig, quantized: bool = True, adapters: bool = True) -> VlmModel:
    """Seeded base model, optionally 4-bit quantized and LoRA-adapted."""
    model = VlmModel(config)
    if quantized:
        quantize_model(model)
    if adapters:
        inject_lora(model)
    return model


def _structure(model: VlmModel) -> dict:
    layers = adapted_layers(model)
    quantized = any(
        isinstance(l.base if isinstance(l, LoraLinear) else l, QuantizedLinear)
        for l in (getattr(b, a) for _, b, a in model.named_linears())
    )
    return {
        "quantized": quantized,
        "adapters": bool(layers),
        "adapter_layers": [n for n, _ in layers],
    }


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: VlmModel, state: TrainState, path, vocab: list[str] | None = None) -> None:
    """Write trainable weights of ``state.mode`` plus optimizer state.

    Frozen base weights are not stored: they are regenerated from the
    config seed on load and checked against the stored base hash.
    """
    structure = _structure(model)
    if state.mode == "adapters_only":
        params = {k: v for k, v in model.named_parameters().items()
                  if ".lora_" in k or k.startswith("regression_head.")}
    else:
        params = model.named_parameters()
    blocks = {f"param/{k}": v.data for k, v in params.items()}
    for k in sorted(state.m):
        blocks[f"adam.m/{k}"] = state.m[k]
        blocks[f"adam.v/{k}"] = state.v[k]
    meta = {
        "kind": "model",
        "model_config": model.config.to_dict(),
        "structure": structure,
        "base_hash": base_hash(model),
        "vocab": vocab,
        "state": {
            "mode": state.mode, "step": state.step, "epoch": state.epoch,
            "best_mae": state.best_mae, "best_epoch": state.best_epoch,
            "stale_epochs": state.stale_epochs, "stopped_early": state.stopped_early,
            "history": state.history,
        },
    }
    write_container(path, meta, blocks)


def load_checkpoint(path, expect_config: ModelConfig | None = None) -> tuple[VlmModel, TrainState, dict]:
    """Rebuild the model and training state; returns (model, state, meta)."""
    meta, blocks = read_container(path)
    if meta.get("kind") != "model":
        raise FormatError(f"{path} is not a model checkpoint")
    config = ModelConfig.from_dict(meta["model_config"])
    if expect_config is not None and expect_config != config:
        raise ContractError("checkpoint config does not match the expected model config")
    st = meta["structure"]
    model = build_model(config, quantized=st["quantized"], adapters=st["adapters"])
    if [n for n, _ in adapted_layers(model)] != st["adapter_layers"]:
        raise ContractError("adapter layout in checkpoint does not match the rebuilt model")
    if base_hash(model) != meta["base_hash"]:
        raise ContractError("regenerated quantized base does not match the checkpoint's base hash")
    params = model.named_parameters()
    for key, arr in blocks.items():
        if key.startswith("param/"):
            name = key[len("param/"):]
            if name not in params or params[name].shape != arr.shape:
                raise ContractError(f"checkpoint block {name!r} does not fit the model")
            params[name].data = arr.copy()
    s = meta["state"]
    state = TrainState(
        mode=s["mode"], step=s["step"], epoch=s["epoch"],
        m={k[len("adam.m/"):]: v.copy() for k, v in blocks.items() if k.startswith("adam.m/")},
        v={k[len("adam.v/"):]: v.copy() for k, v in blocks.items() if k.startswith("adam.v/")},
        best_mae=s["best_mae"], best_epoch=s["best_epoch"], stale_epochs=s["stale_epochs"],
        stopped_early=s["stopped_early"], history=s["history"],
    )
    return model, state, meta
