"""Micro decoder-only transformer: causal MHSA, pre-norm blocks, LoRA.

The backbone plays both roles downstream: reasoner (next-token logits) and
embedder (per-layer hidden states feed pooling and the embedding heads).
Forward exposes the full residual-stream history: embedding output plus one
state per block, n_layers + 1 arrays of shape (L, d_model).

"Visual encoder frozen" maps to pinning the patch-token rows of the token
embedding table: synthetic images enter as patch tokens, so those rows are
the visual encoder here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    EmptyTrainableSet,
    SequenceTooLong,
    ShapeMismatch,
    UnknownProjection,
    UnknownToken,
)
from .tensor import (
    Tensor,
    concat,
    gather_rows,
    gelu,
    layer_norm,
    matmul,
    mul,
    narrow,
    softmax_rows,
    transpose,
)

INIT_STD = 0.02

# projection slots adapters may target, relative to a block
PROJECTION_SLOTS = ("attn.q", "attn.k", "attn.v", "attn.o")
DEFAULT_LORA_TARGETS = ("attn.q", "attn.v")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    n_layers: int
    n_heads: int
    d_ff: int
    max_seq_len: int
    seed: int = 0

    def validate(self) -> "ModelConfig":
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ShapeMismatch(f"ModelConfig.{name} must be positive")
        if self.d_model % self.n_heads:
            raise ShapeMismatch(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        return self


@dataclass
class LoraAdapter:
    """Low-rank delta on one projection: adds (alpha/r) x A B to its output."""

    target: str
    r: int
    alpha: float
    A: Tensor
    B: Tensor

    @property
    def scale(self) -> float:
        return self.alpha / self.r


class Backbone:
    """Token + learned-position embeddings, pre-norm blocks, vocab head."""

    def __init__(self, config: ModelConfig):
        self.config = config.validate()
        c = self.config
        rng = np.random.default_rng(c.seed)
        p: dict[str, Tensor] = {}

        def param(name, arr):
            p[name] = Tensor(arr, requires_grad=True)

        param("tok_emb", rng.normal(0.0, INIT_STD, (c.vocab_size, c.d_model)))
        param("pos_emb", rng.normal(0.0, INIT_STD, (c.max_seq_len, c.d_model)))
        for i in range(c.n_layers):
            pre = f"block{i}."
            param(pre + "ln1.gamma", np.ones(c.d_model))
            param(pre + "ln1.beta", np.zeros(c.d_model))
            for slot in ("q", "k", "v", "o"):
                param(pre + f"attn.w{slot}", rng.normal(0.0, INIT_STD, (c.d_model, c.d_model)))
                param(pre + f"attn.b{slot}", np.zeros(c.d_model))
            param(pre + "ln2.gamma", np.ones(c.d_model))
            param(pre + "ln2.beta", np.zeros(c.d_model))
            param(pre + "ff.w1", rng.normal(0.0, INIT_STD, (c.d_model, c.d_ff)))
            param(pre + "ff.b1", np.zeros(c.d_ff))
            param(pre + "ff.w2", rng.normal(0.0, INIT_STD, (c.d_ff, c.d_model)))
            param(pre + "ff.b2", np.zeros(c.d_model))
        param("final_ln.gamma", np.ones(c.d_model))
        param("final_ln.beta", np.zeros(c.d_model))
        param("out.w", rng.normal(0.0, INIT_STD, (c.d_model, c.vocab_size)))
        param("out.b", np.zeros(c.vocab_size))

        self.params = p
        self.adapters: dict[str, LoraAdapter] = {}
        self.pinned_rows: tuple[int, ...] = ()

    # -- parameter plumbing --

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        items = list(self.params.items())
        for key in sorted(self.adapters):
            ad = self.adapters[key]
            items.append((f"lora.{key}.A", ad.A))
            items.append((f"lora.{key}.B", ad.B))
        return items

    def pin_embedding_rows(self, rows) -> None:
        rows = tuple(sorted(set(int(r) for r in rows)))
        if rows and (rows[0] < 0 or rows[-1] >= self.config.vocab_size):
            raise ShapeMismatch("pinned row outside vocabulary")
        self.pinned_rows = rows

    # -- forward --

    def _project(self, x: Tensor, block: int, slot: str) -> Tensor:
        pre = f"block{block}.attn."
        out = matmul(x, self.params[pre + f"w{slot}"]) + self.params[pre + f"b{slot}"]
        ad = self.adapters.get(f"block{block}.attn.{slot}")
        if ad is not None:
            out = out + mul(matmul(matmul(x, ad.A), ad.B), ad.scale)
        return out

    def _attention(self, x: Tensor, block: int, mask: np.ndarray) -> Tensor:
        c = self.config
        dh = c.d_model // c.n_heads
        q = self._project(x, block, "q")
        k = self._project(x, block, "k")
        v = self._project(x, block, "v")
        heads = []
        for h in range(c.n_heads):
            lo, hi = h * dh, (h + 1) * dh
            qh, kh, vh = (narrow(t, 1, lo, hi) for t in (q, k, v))
            scores = mul(matmul(qh, transpose(kh)), 1.0 / math.sqrt(dh)) + Tensor(mask)
            heads.append(matmul(softmax_rows(scores), vh))
        merged = heads[0] if len(heads) == 1 else concat(heads, axis=1)
        return self._project(merged, block, "o")

    def forward(self, tokens) -> tuple[list[Tensor], Tensor]:
        """tokens (L,) int ids -> ([n_layers+1 states of (L, d_model)], (L, vocab) logits)."""
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ShapeMismatch(f"forward expects a non-empty id vector, got {ids.shape}")
        c = self.config
        if ids.size > c.max_seq_len:
            raise SequenceTooLong(f"length {ids.size} > max_seq_len {c.max_seq_len}")
        if ids.min() < 0 or ids.max() >= c.vocab_size:
            raise UnknownToken(f"token id outside [0, {c.vocab_size})")
        L = ids.size
        # additive causal mask; exp(-1e9 shift) underflows to exactly 0
        mask = np.triu(np.full((L, L), -1e9), k=1)

        x = gather_rows(self.params["tok_emb"], ids) + narrow(self.params["pos_emb"], 0, 0, L)
        states = [x]
        for i in range(c.n_layers):
            pre = f"block{i}."
            x = x + self._attention(
                layer_norm(x, self.params[pre + "ln1.gamma"], self.params[pre + "ln1.beta"]),
                i, mask)
            x = x + self._ff(x, i)
            states.append(x)
        final = layer_norm(x, self.params["final_ln.gamma"], self.params["final_ln.beta"])
        logits = matmul(final, self.params["out.w"]) + self.params["out.b"]
        return states, logits

    def _ff(self, x: Tensor, block: int) -> Tensor:
        pre = f"block{block}."
        h = layer_norm(x, self.params[pre + "ln2.gamma"], self.params[pre + "ln2.beta"])
        h = gelu(matmul(h, self.params[pre + "ff.w1"]) + self.params[pre + "ff.b1"])
        return matmul(h, self.params[pre + "ff.w2"]) + self.params[pre + "ff.b2"]


def lora_apply(backbone: Backbone, targets=DEFAULT_LORA_TARGETS,
               r: int = 16, alpha: float = 64.0) -> Backbone:
    """Attach zero-delta adapters to the named projection slots of every block."""
    if r <= 0:
        raise ShapeMismatch(f"LoRA rank must be positive, got {r}")
    for t in targets:
        if t not in PROJECTION_SLOTS:
            raise UnknownProjection(f"{t!r}; valid slots: {PROJECTION_SLOTS}")
    c = backbone.config
    rng = np.random.default_rng([c.seed, 0x10AA])
    for i in range(c.n_layers):
        for t in targets:
            key = f"block{i}.{t}"
            A = Tensor(rng.normal(0.0, 1.0 / math.sqrt(c.d_model), (c.d_model, r)),
                       requires_grad=True)
            B = Tensor(np.zeros((r, c.d_model)), requires_grad=True)
            backbone.adapters[key] = LoraAdapter(target=key, r=r, alpha=float(alpha), A=A, B=B)
    return backbone


@dataclass
class TrainablePartition:
    """Named trainable tensors plus per-name gradient masks for pinned rows."""

    params: list
    masks: dict

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.params]

    def names(self) -> list[str]:
        return [n for n, _ in self.params]

    def count(self) -> int:
        total = sum(t.data.size for _, t in self.params)
        for name, mask in self.masks.items():
            total -= int((mask == 0).sum())
        return total

    def masked_grads(self) -> list:
        out = []
        for name, t in self.params:
            g = t.grad
            if g is not None and name in self.masks:
                g = g * self.masks[name]
            out.append(g)
        return out


def set_trainable(backbone: Backbone, selector: str, head=None) -> TrainablePartition:
    """Partition parameters by selector: all | lora_only | head_only | none_of_backbone.

    'all' respects pinned embedding rows via a gradient mask on tok_emb.
    """
    head_params = list(head.named_parameters()) if head is not None else []
    base = [(n, t) for n, t in backbone.named_parameters() if not n.startswith("lora.")]
    lora = [(n, t) for n, t in backbone.named_parameters() if n.startswith("lora.")]

    if selector == "all":
        chosen = base + lora + head_params
    elif selector == "lora_only":
        chosen = lora
    elif selector == "head_only":
        chosen = head_params
    elif selector == "none_of_backbone":
        chosen = lora + head_params
    else:
        raise ShapeMismatch(f"unknown trainable selector {selector!r}")
    if not chosen:
        raise EmptyTrainableSet(f"selector {selector!r} selected no parameters")

    masks: dict[str, np.ndarray] = {}
    if selector == "all" and backbone.pinned_rows:
        mask = np.ones_like(backbone.params["tok_emb"].data)
        mask[list(backbone.pinned_rows)] = 0.0
        masks["tok_emb"] = mask
    return TrainablePartition(params=chosen, masks=masks)
