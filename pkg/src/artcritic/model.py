"""Toy vision-language decoder with a scalar scoring head.

Image patches are projected into the token width and prepended to the
prompt, and the whole sequence runs through one causal pre-norm transformer.
Every position gets next-token logits; the final-normed hidden state of the
reserved ``[SCORING]`` token additionally feeds a linear head whose output is
squashed to ``100 * sigmoid(raw)``. Score and logits come out of the same
forward call.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, LengthError
from .tensor import Tensor
from .vocab import CRITIQUE_ID, EOS_ID, PAD_ID, SCORING_ID

LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    image_size: int = 32
    patch_size: int = 8
    vocab_size: int = 128
    max_seq_len: int = 256
    lora_rank: int = 8
    lora_alpha: float = 16.0
    quant_block: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.image_size % self.patch_size:
            raise ContractError(
                f"image_size={self.image_size} is not divisible by patch_size={self.patch_size}"
            )
        if self.max_seq_len <= self.visual_tokens:
            raise ContractError("max_seq_len leaves no room for text after the visual prefix")

    @property
    def visual_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    @property
    def text_budget(self) -> int:
        return self.max_seq_len - self.visual_tokens

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class Linear:
    """``y = x W^T + b`` with a dense trainable weight of shape (d_out, d_in)."""

    def __init__(self, weight: Tensor, bias: Tensor | None = None):
        self.weight = weight
        self.bias = bias

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, T.transpose(self.weight))
        return y if self.bias is None else T.add(y, self.bias)

    def parameters(self) -> dict[str, Tensor]:
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out


@dataclass
class Block:
    ln1_gamma: Tensor
    ln1_beta: Tensor
    qkv: object
    proj: object
    ln2_gamma: Tensor
    ln2_beta: Tensor
    fc1: object
    fc2: object

    LINEARS = ("qkv", "proj", "fc1", "fc2")


@dataclass
class ModelOutput:
    logits: Tensor  # (B, L, V) or (L, V) for a single sample
    score_raw: Tensor  # (B,) or scalar
    score: np.ndarray = field(repr=False)  # 100 * sigmoid(score_raw)


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Split an (H, W, 3) image into row-major flattened p x p x 3 patches."""
    h, w, c = image.shape
    g_h, g_w = h // patch_size, w // patch_size
    x = image.reshape(g_h, patch_size, g_w, patch_size, c).transpose(0, 2, 1, 3, 4)
    return x.reshape(g_h * g_w, patch_size * patch_size * c)


class VlmModel:
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        d, V = config.d_model, config.vocab_size

        def dense(d_out, d_in, std=None, bias=True):
            std = 1.0 / math.sqrt(d_in) if std is None else std
            w = Tensor(rng.normal(0.0, std, (d_out, d_in)))
            return Linear(w, Tensor(np.zeros(d_out)) if bias else None)

        self.patch_projection = dense(d, config.patch_dim)
        self.token_embedding = Tensor(rng.normal(0.0, 1.0, (V, d)))
        self.positional_embedding = Tensor(rng.normal(0.0, 0.5, (config.max_seq_len, d)))
        resid_std = 1.0 / math.sqrt(4 * d * 2 * config.n_layers)
        self.blocks: list[Block] = []
        for _ in range(config.n_layers):
            self.blocks.append(
                Block(
                    ln1_gamma=Tensor(np.ones(d)),
                    ln1_beta=Tensor(np.zeros(d)),
                    qkv=dense(3 * d, d),
                    proj=dense(d, d, std=1.0 / math.sqrt(d * 2 * config.n_layers)),
                    ln2_gamma=Tensor(np.ones(d)),
                    ln2_beta=Tensor(np.zeros(d)),
                    fc1=dense(4 * d, d),
                    fc2=dense(d, 4 * d, std=resid_std),
                )
            )
        self.final_gamma = Tensor(np.ones(d))
        self.final_beta = Tensor(np.zeros(d))
        self.lm_head = dense(V, d, bias=False)
        # new head: zero init so every untrained prediction is exactly 50
        self.regression_head = Linear(Tensor(np.zeros((1, d))), Tensor(np.zeros(1)))
        self._causal = np.tril(np.ones((config.max_seq_len, config.max_seq_len), dtype=bool))

    # ------------------------------------------------------------ parameters

    def named_linears(self) -> Iterator[tuple[str, Block, str]]:
        for i, blk in enumerate(self.blocks):
            for attr in Block.LINEARS:
                group = "attn" if attr in ("qkv", "proj") else "mlp"
                yield f"blocks.{i}.{group}.{attr}", blk, attr

    def named_parameters(self) -> dict[str, Tensor]:
        """Every float tensor of the model, in a fixed order."""
        out: dict[str, Tensor] = {}
        for k, v in self.patch_projection.parameters().items():
            out[f"patch_projection.{k}"] = v
        out["token_embedding"] = self.token_embedding
        out["positional_embedding"] = self.positional_embedding
        linears = {name: (blk, attr) for name, blk, attr in self.named_linears()}
        for i, blk in enumerate(self.blocks):
            out[f"blocks.{i}.ln1.gamma"] = blk.ln1_gamma
            out[f"blocks.{i}.ln1.beta"] = blk.ln1_beta
            out[f"blocks.{i}.ln2.gamma"] = blk.ln2_gamma
            out[f"blocks.{i}.ln2.beta"] = blk.ln2_beta
        for name, (blk, attr) in linears.items():
            for k, v in getattr(blk, attr).parameters().items():
                out[f"{name}.{k}"] = v
        out["final_norm.gamma"] = self.final_gamma
        out["final_norm.beta"] = self.final_beta
        for k, v in self.lm_head.parameters().items():
            out[f"lm_head.{k}"] = v
        for k, v in self.regression_head.parameters().items():
            out[f"regression_head.{k}"] = v
        return out

    def has_adapters(self) -> bool:
        return any(hasattr(getattr(blk, attr), "lora_A") for _, blk, attr in self.named_linears())

    # ------------------------------------------------------------ forward

    def encode_image(self, image: np.ndarray) -> Tensor:
        """(H, W, 3) image in [0, 1] -> (n_patches, d_model) visual embeddings."""
        image = np.asarray(image, dtype=np.float64)
        s = self.config.image_size
        if image.shape != (s, s, 3):
            raise DimensionError(f"image must be {(s, s, 3)}, got {image.shape}")
        return self.patch_projection(Tensor(patchify(image, self.config.patch_size)))

    def encode_images(self, images: np.ndarray) -> Tensor:
        images = np.asarray(images, dtype=np.float64)
        s = self.config.image_size
        if images.shape[1:] != (s, s, 3):
            raise DimensionError(f"images must be (B, {s}, {s}, 3), got {images.shape}")
        patches = np.stack([patchify(im, self.config.patch_size) for im in images])
        return self.patch_projection(Tensor(patches))

    def _attention(self, blk: Block, x: Tensor) -> Tensor:
        B, L, d = x.shape
        H = self.config.n_heads
        dh = d // H
        qkv = blk.qkv(x).reshape(B, L, 3, H, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = _split3(qkv)
        att = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dh))
        att = T.softmax(att, mask=self._causal[:L, :L])
        y = T.matmul(att, v).transpose(0, 2, 1, 3).reshape(B, L, d)
        return blk.proj(y)

    def hidden_states(self, visual: Tensor, tokens: np.ndarray) -> Tensor:
        """Final-normed hidden states for a batch: visual (B, Nv, d), tokens (B, Tt)."""
        tok = T.embedding(self.token_embedding, tokens)
        x = T.concat([visual, tok], axis=1)
        L = x.shape[1]
        if L > self.config.max_seq_len:
            raise LengthError(f"sequence length {L} exceeds max_seq_len={self.config.max_seq_len}")
        pos = T.reshape(T.embedding(self.positional_embedding, np.arange(L)), (1, L, -1))
        x = T.add(x, pos)
        for blk in self.blocks:
            x = T.add(x, self._attention(blk, T.layer_norm(x, blk.ln1_gamma, blk.ln1_beta, LN_EPS)))
            h = blk.fc1(T.layer_norm(x, blk.ln2_gamma, blk.ln2_beta, LN_EPS))
            x = T.add(x, blk.fc2(T.gelu(h)))
        return T.layer_norm(x, self.final_gamma, self.final_beta, LN_EPS)

    def forward_batch(self, visual: Tensor, tokens: np.ndarray, scoring_pos) -> ModelOutput:
        tokens = np.asarray(tokens, dtype=np.int64)
        scoring_pos = np.asarray(scoring_pos, dtype=np.int64)
        B = tokens.shape[0]
        if np.any(tokens[np.arange(B), scoring_pos] != SCORING_ID):
            raise ContractError("tokens[scoring_pos] is not the [SCORING] token")
        h = self.hidden_states(visual, tokens)
        logits = self.lm_head(h)
        at = T.take_rows(h, scoring_pos + visual.shape[1])
        raw = T.reshape(self.regression_head(at), (B,))
        return ModelOutput(logits, raw, 100.0 * T._sigmoid(raw.data))

    def forward(self, visual: Tensor, tokens, scoring_pos: int) -> ModelOutput:
        """Single sample: visual (Nv, d), tokens (Tt,) -> logits (Nv+Tt, V), scalar score."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if not 0 <= scoring_pos < tokens.shape[0]:
            raise ContractError(f"scoring_pos {scoring_pos} outside the token sequence")
        vis = T.reshape(visual, (1,) + visual.shape)
        out = self.forward_batch(vis, tokens[None, :], np.array([scoring_pos]))
        L, V = out.logits.shape[1:]
        return ModelOutput(
            T.reshape(out.logits, (L, V)),
            T.reshape(out.score_raw, ()),
            np.asarray(out.score[0]),
        )

    __call__ = forward

    # ------------------------------------------------------------ generation

    def generate_batch(
        self,
        visual: Tensor,
        prompts: list[list[int]],
        max_new: int,
        temperature: float | None = None,
        seed: int = 0,
        allow: Callable[[int, list[int]], np.ndarray | None] | None = None,
    ) -> list[list[int]]:
        """Decode continuations for a batch of prompts ending in [SCORING], [CRITIQUE].

        ``temperature=None`` is greedy. Returned lists exclude the prompt and
        include the terminating EOS when one was produced. ``allow(i, so_far)``
        may return a boolean vocabulary mask restricting row ``i``'s next token.
        """
        if max_new < 1:
            raise ContractError("max_new must be at least 1")
        for p in prompts:
            if len(p) < 2 or p[-2] != SCORING_ID or p[-1] != CRITIQUE_ID:
                raise ContractError("prompt must end with [SCORING] followed by [CRITIQUE]")
        B = len(prompts)
        budget = self.config.text_budget
        lengths = np.array([len(p) for p in prompts])
        if lengths.max() > budget:
            raise LengthError(f"prompt of {lengths.max()} tokens exceeds the text budget {budget}")
        width = int(min(budget, lengths.max() + max_new))
        buf = np.full((B, width), PAD_ID, dtype=np.int64)
        for i, p in enumerate(prompts):
            buf[i, : len(p)] = p
        out: list[list[int]] = [[] for _ in range(B)]
        active = lengths < width
        rng = np.random.default_rng(seed) if temperature is not None else None
        nv = visual.shape[1]
        with T.no_grad():
            for _ in range(max_new):
                if not active.any():
                    break
                live = np.flatnonzero(active)
                cur = int(lengths[live].max())
                # finished rows drop out, so padding never exceeds the longest live row
                h = self.hidden_states(Tensor(visual.data[live]), buf[live, :cur])
                rows = h.data[np.arange(live.size), nv + lengths[live] - 1]
                logits = rows @ self.lm_head.weight.data.T
                if self.lm_head.bias is not None:
                    logits = logits + self.lm_head.bias.data
                for row, i in enumerate(live):
                    z = logits[row]
                    mask = allow(int(i), out[i]) if allow is not None else None
                    if mask is not None:
                        z = np.where(mask, z, -np.inf)
                    if rng is None:
                        tok = int(np.argmax(z))
                    else:
                        z = z / temperature
                        p = np.exp(z - z.max())
                        tok = int(rng.choice(len(p), p=p / p.sum()))
                    out[i].append(tok)
                    buf[i, lengths[i]] = tok
                    lengths[i] += 1
                    if tok == EOS_ID or lengths[i] >= width:
                        active[i] = False
        return out

    def generate_critique(
        self,
        visual: Tensor,
        prompt_tokens: list[int],
        max_new: int,
        mode: str = "greedy",
        temperature: float = 1.0,
        seed: int = 0,
        allow: Callable[[list[int]], np.ndarray | None] | None = None,
    ) -> list[int]:
        if mode not in ("greedy", "temperature"):
            raise ContractError(f"unknown decoding mode {mode!r}")
        vis = T.reshape(visual, (1,) + visual.shape)
        t = None if mode == "greedy" else temperature
        row_allow = None if allow is None else (lambda _i, so_far: allow(so_far))
        return self.generate_batch(vis, [list(prompt_tokens)], max_new, t, seed, row_allow)[0]


def _split3(x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Split a tensor of shape (3, ...) into its three leading slices."""
    shape = x.shape

    def piece(i):
        def rule(g):
            full = np.zeros(shape)
            full[i] = g
            return (full,)

        return T._node(x.data[i], (x,), rule)

    return piece(0), piece(1), piece(2)


# ---------------------------------------------------------------- trainable sets

MODES = ("full", "adapters_only")


def trainable_parameters(model: VlmModel, mode: str) -> dict[str, Tensor]:
    """Parameters updated by training in the given mode.

    ``adapters_only`` yields every LoRA factor plus the regression head, which
    is newly attached and has nothing pretrained to freeze.
    """
    params = model.named_parameters()
    if mode == "full":
        return params
    if mode != "adapters_only":
        raise ContractError(f"unknown training mode {mode!r}")
    if not model.has_adapters():
        raise ContractError("adapters_only mode requires injected LoRA adapters")
    return {k: v for k, v in params.items() if ".lora_" in k or k.startswith("regression_head.")}


def set_trainable(model: VlmModel, mode: str) -> dict[str, Tensor]:
    chosen = trainable_parameters(model, mode)
    for name, p in model.named_parameters().items():
        p.requires_grad = name in chosen
        p.grad = None
    return chosen
