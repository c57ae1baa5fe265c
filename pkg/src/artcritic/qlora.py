"""Blockwise 4-bit base weights with low-rank trainable adapters.

Codebook: 15 symmetric uniform levels ``k/7 * scale`` for ``k in -7..7``,
where ``scale`` is the absolute maximum of a block of ``quant_block``
consecutive weights (row-major). A level is stored as its 4-bit two's
complement nibble, so nibble 0 is level 0 and nibble 8 (level -8) is never
produced; meeting it on load is a format error. Two nibbles share a byte,
low nibble first.

Only the transformer's attention and MLP projections are quantized; the
embeddings, patch projection, norms and LM head stay in float64 and are
frozen in ``adapters_only`` training. Bias vectors are kept in float64 and
frozen together with the base.
"""

from __future__ import annotations

import copy
import hashlib
import math

import numpy as np

from . import tensor as T
from .checkpoint import read_container, write_container
from .errors import ContractError, FormatError
from .model import Linear, VlmModel
from .tensor import Tensor

LEVELS = 7
TARGET_GROUPS = {
    "attention_projections": ("qkv", "proj"),
    "mlp_projections": ("fc1", "fc2"),
}


def _round_half_toward_zero(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.ceil(np.abs(x) - 0.5)


class QuantizedLinear:
    """Frozen linear layer whose weight lives as packed 4-bit codes plus block scales."""

    def __init__(self, codes: np.ndarray, scales: np.ndarray, shape, block: int, bias: Tensor | None = None):
        self.codes = np.asarray(codes, dtype=np.uint8)
        self.scales = np.asarray(scales, dtype=np.float64)
        self.shape = tuple(int(s) for s in shape)
        self.block = int(block)
        self.bias = bias
        n = self.shape[0] * self.shape[1]
        if self.scales.shape != (math.ceil(n / self.block),):
            raise FormatError(f"expected {math.ceil(n / self.block)} scales, got {self.scales.shape}")
        if self.codes.shape != ((n + 1) // 2,):
            raise FormatError(f"expected {(n + 1) // 2} code bytes, got {self.codes.shape}")
        self._weight: Tensor | None = None

    @property
    def d_out(self) -> int:
        return self.shape[0]

    @property
    def d_in(self) -> int:
        return self.shape[1]

    def levels(self) -> np.ndarray:
        n = self.shape[0] * self.shape[1]
        nib = np.empty(self.codes.size * 2, dtype=np.int64)
        nib[0::2] = self.codes & 0x0F
        nib[1::2] = self.codes >> 4
        nib = nib[:n]
        if np.any(nib == 8):
            raise FormatError("code 8 is outside the 15-level codebook")
        return np.where(nib > 7, nib - 16, nib)

    def weight(self) -> Tensor:
        # codes are frozen, so the dequantized matrix is computed once
        if self._weight is None:
            self._weight = dequantize(self)
        return self._weight

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, T.transpose(self.weight()))
        return y if self.bias is None else T.add(y, self.bias)

    def parameters(self) -> dict[str, Tensor]:
        return {} if self.bias is None else {"bias": self.bias}

    def digest(self) -> bytes:
        return self.codes.tobytes() + self.scales.astype("<f8").tobytes()


def quantize(weights, block: int = 64, bias: Tensor | None = None) -> QuantizedLinear:
    """Quantize a (d_out, d_in) matrix blockwise to the 15-level codebook."""
    if block < 1:
        raise ContractError("block must be at least 1")
    w = np.asarray(weights.data if isinstance(weights, Tensor) else weights, dtype=np.float64)
    if w.ndim != 2:
        raise ContractError(f"quantize expects a matrix, got shape {w.shape}")
    flat = w.reshape(-1)
    n = flat.size
    nblocks = math.ceil(n / block)
    padded = np.zeros(nblocks * block)
    padded[:n] = flat
    blocks = padded.reshape(nblocks, block)
    scales = np.abs(blocks).max(axis=1)
    safe = np.where(scales > 0, scales, 1.0)
    lv = _round_half_toward_zero(blocks / safe[:, None] * LEVELS)
    lv = np.clip(lv, -LEVELS, LEVELS).astype(np.int64).reshape(-1)[:n]
    nib = (lv & 0x0F).astype(np.uint8)
    if n % 2:
        nib = np.append(nib, np.uint8(0))
    codes = nib[0::2] | (nib[1::2] << 4)
    return QuantizedLinear(codes, scales, w.shape, block, bias)


def dequantize(q: QuantizedLinear) -> Tensor:
    n = q.shape[0] * q.shape[1]
    per_weight = np.repeat(q.scales, q.block)[:n]
    return Tensor(((q.levels() / LEVELS) * per_weight).reshape(q.shape))


class LoraLinear:
    """``y = base(x) + (alpha / r) * B (A x)`` with only A and B trainable."""

    def __init__(self, base, rank: int, alpha: float, rng: np.random.Generator):
        self.base = base
        self.rank = int(rank)
        self.alpha = float(alpha)
        self.lora_A = Tensor(rng.normal(0.0, 1.0 / math.sqrt(base.d_in), (rank, base.d_in)))
        self.lora_B = Tensor(np.zeros((base.d_out, rank)))

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def d_out(self) -> int:
        return self.base.d_out

    @property
    def d_in(self) -> int:
        return self.base.d_in

    def __call__(self, x: Tensor) -> Tensor:
        down = T.matmul(x, T.transpose(self.lora_A))
        up = T.matmul(down, T.transpose(self.lora_B))
        return T.add(self.base(x), T.scale(up, self.scaling))

    def parameters(self) -> dict[str, Tensor]:
        out = dict(self.base.parameters())
        out["lora_A"] = self.lora_A
        out["lora_B"] = self.lora_B
        return out


def _targeted(model: VlmModel, targets) -> list[tuple[str, object, str]]:
    targets = tuple(targets)
    if not targets:
        raise ContractError("targets must not be empty")
    attrs: set[str] = set()
    for t in targets:
        if t not in TARGET_GROUPS:
            raise ContractError(f"unknown target group {t!r}")
        attrs.update(TARGET_GROUPS[t])
    return [(n, blk, a) for n, blk, a in model.named_linears() if a in attrs]


def quantize_model(model: VlmModel, block: int | None = None) -> VlmModel:
    """Replace every attention/MLP projection with its 4-bit form, in place."""
    block = model.config.quant_block if block is None else block
    for _, blk, attr in model.named_linears():
        layer = getattr(blk, attr)
        if isinstance(layer, Linear):
            setattr(blk, attr, quantize(layer.weight, block, layer.bias))
    return model


def inject_lora(
    model: VlmModel,
    targets=("attention_projections", "mlp_projections"),
    r: int | None = None,
    alpha: float | None = None,
    seed: int | None = None,
) -> VlmModel:
    """Wrap targeted layers with zero-initialised adapters, in place.

    A is drawn from N(0, 1/d_in) with a per-layer seed; B starts at zero so the
    adapted model reproduces the base exactly until B moves.
    """
    r = model.config.lora_rank if r is None else r
    if r < 1:
        raise ContractError("LoRA rank must be at least 1")
    alpha = (model.config.lora_alpha if alpha is None else alpha)
    seed = model.config.seed if seed is None else seed
    chosen = _targeted(model, targets)
    for name, blk, attr in chosen:
        if isinstance(getattr(blk, attr), LoraLinear):
            raise ContractError(f"{name} already carries a LoRA adapter")
    for idx, (_, blk, attr) in enumerate(chosen):
        rng = np.random.default_rng([seed, 7919, idx])
        setattr(blk, attr, LoraLinear(getattr(blk, attr), r, alpha, rng))
    return model


def adapted_layers(model: VlmModel) -> list[tuple[str, LoraLinear]]:
    return [(n, getattr(b, a)) for n, b, a in model.named_linears() if isinstance(getattr(b, a), LoraLinear)]


def merge_lora(model: VlmModel) -> VlmModel:
    """Return a copy whose adapted layers are plain dense layers.

    Merging a model without adapters is an error rather than a silent no-op.
    """
    if not model.has_adapters():
        raise ContractError("model has no LoRA adapters to merge")
    merged = copy.deepcopy(model)
    for _, blk, attr in merged.named_linears():
        layer = getattr(blk, attr)
        if not isinstance(layer, LoraLinear):
            continue
        base = layer.base
        w = base.weight().data if isinstance(base, QuantizedLinear) else base.weight.data
        delta = layer.scaling * (layer.lora_B.data @ layer.lora_A.data)
        bias = None if base.bias is None else Tensor(base.bias.data.copy())
        setattr(blk, attr, Linear(Tensor(w + delta), bias))
    return merged


def base_hash(model: VlmModel) -> str:
    """SHA-256 over every quantized layer's codes and scales, in layer order."""
    h = hashlib.sha256()
    for name, blk, attr in model.named_linears():
        layer = getattr(blk, attr)
        layer = layer.base if isinstance(layer, LoraLinear) else layer
        if isinstance(layer, QuantizedLinear):
            h.update(name.encode())
            h.update(layer.digest())
    return h.hexdigest()


def save_adapters(model: VlmModel, path) -> None:
    layers = adapted_layers(model)
    if not layers:
        raise ContractError("model has no LoRA adapters to save")
    blocks = {}
    for name, layer in layers:
        blocks[f"{name}.lora_A"] = layer.lora_A.data
        blocks[f"{name}.lora_B"] = layer.lora_B.data
    meta = {
        "kind": "adapters",
        "model_config": model.config.to_dict(),
        "rank": layers[0][1].rank,
        "alpha": layers[0][1].alpha,
        "layers": [n for n, _ in layers],
        "base_hash": base_hash(model),
    }
    write_container(path, meta, blocks)


def load_adapters(model: VlmModel, path) -> VlmModel:
    """Load A/B factors onto a model whose quantized base matches the saved one."""
    meta, blocks = read_container(path)
    if meta.get("kind") != "adapters":
        raise FormatError("not an adapter file")
    if meta["model_config"] != model.config.to_dict():
        raise ContractError("adapter file was saved for a different model config")
    if meta["base_hash"] != base_hash(model):
        raise ContractError("quantized base does not match the one the adapters were trained on")
    if not model.has_adapters():
        groups = [g for g, attrs in TARGET_GROUPS.items()
                  if any(n.endswith("." + a) for n in meta["layers"] for a in attrs)]
        inject_lora(model, groups, meta["rank"], meta["alpha"])
    present = dict(adapted_layers(model))
    if sorted(present) != sorted(meta["layers"]):
        raise ContractError("adapter layer set differs from the model's adapted layers")
    for name in meta["layers"]:
        present[name].lora_A.data = blocks[f"{name}.lora_A"].copy()
        present[name].lora_B.data = blocks[f"{name}.lora_B"].copy()
    return model
