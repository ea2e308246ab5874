"""Pluggable embedding heads over backbone hidden states, plus the two
unification trainers (two-stage reasoner+head, and joint SFT+contrastive).

Four head designs, all consuming states the backbone already produced:

  attention_pool   learnable query vectors cross-attend over final states,
                   outputs are mean-combined then linearly projected
  nv_embed_pool    final states attend into a learnable latent array
                   (keys/values), then a two-layer GELU feed-forward and
                   mean pooling
  qformer          fresh blocks with self-attention over a fixed 8-row query
                   stream and cross-attention into one backbone layer each,
                   trained from scratch
  self_init_mhsa   blocks copied verbatim from the backbone's last layers,
                   so an untrained head reproduces the backbone's own pooled
                   output exactly when n_layers == last_n

plus joint_mlp, the small two-layer block used by joint training on the
second-last token.  Head parameters are always copies; a head never aliases
backbone tensors, so head-only training cannot mutate the backbone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BadHeadConfig, ConfigInvalid, EmptyDataset, MissingLayerStates
from .model import Backbone, ModelConfig, set_trainable
from .optim import adam_init, adam_step
from .tensor import (
    Tensor,
    backward,
    concat,
    gelu,
    layer_norm,
    matmul,
    mul,
    narrow,
    reshape,
    softmax_rows,
    tmean,
    transpose,
    tsum,
    zero_grads,
)

HEAD_KINDS = ("attention_pool", "nv_embed_pool", "qformer", "self_init_mhsa",
              "joint_mlp")
_KIND_CODE = {k: i + 1 for i, k in enumerate(HEAD_KINDS)}
INIT_STD = 0.02
QFORMER_STREAM = 8  # fixed query-stream width; the design leaves it open


@dataclass(frozen=True)
class HeadConfig:
    kind: str
    d: int
    n_queries: int | None = None
    n_latent_value: int | None = None
    n_layers: int | None = None
    last_n: int | None = None

    def validate(self, model_config: ModelConfig) -> "HeadConfig":
        if self.kind not in HEAD_KINDS:
            raise BadHeadConfig(f"unknown head kind {self.kind!r}")
        if self.d != model_config.d_model:
            raise BadHeadConfig(
                f"head dim {self.d} must match backbone d_model {model_config.d_model}")
        if self.kind == "attention_pool":
            if not self.n_queries or self.n_queries < 1:
                raise BadHeadConfig("attention_pool needs n_queries >= 1")
        elif self.kind == "nv_embed_pool":
            if not self.n_latent_value or self.n_latent_value < 1:
                raise BadHeadConfig("nv_embed_pool needs n_latent_value >= 1")
        elif self.kind in ("qformer", "self_init_mhsa"):
            if not self.n_layers or not self.last_n:
                raise BadHeadConfig(f"{self.kind} needs n_layers and last_n")
            if not 1 <= self.n_layers <= self.last_n <= model_config.n_layers:
                raise BadHeadConfig(
                    f"need 1 <= n_layers({self.n_layers}) <= last_n({self.last_n})"
                    f" <= backbone layers({model_config.n_layers})")
        return self

    def describe(self) -> dict:
        out = {"kind": self.kind, "d": self.d}
        for field_name in ("n_queries", "n_latent_value", "n_layers", "last_n"):
            value = getattr(self, field_name)
            if value is not None:
                out[field_name] = value
        return out


class EmbeddingHead:
    """Parameter bag with a states -> d-vector forward."""

    def __init__(self, config: HeadConfig):
        self.config = config
        self.kind = config.kind
        self.params: dict[str, Tensor] = {}

    def _param(self, name: str, arr: np.ndarray) -> None:
        self.params[name] = Tensor(np.array(arr, dtype=np.float64), requires_grad=True)

    def named_parameters(self) -> list:
        return sorted(self.params.items())

    def describe(self) -> dict:
        return self.config.describe()

    def required_states(self) -> int:
        """Minimum length of the backbone states list this head can consume."""
        return 1

    def __call__(self, states: list) -> Tensor:
        if len(states) < self.required_states():
            raise MissingLayerStates(
                f"{self.kind} needs {self.required_states()} states, got {len(states)}")
        return self.forward_states(states)

    def forward_states(self, states: list) -> Tensor:
        raise NotImplementedError


def head_forward(head: EmbeddingHead, states: list, length: int) -> Tensor:
    """Run a head over the first `length` rows only; padding never attends."""
    n_rows = states[-1].shape[0]
    if not 1 <= length <= n_rows:
        raise MissingLayerStates(f"length {length} outside 1..{n_rows}")
    sliced = [narrow(s, 0, 0, length) for s in states]
    return head(sliced)


def _attend(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    scale = 1.0 / math.sqrt(q.shape[1])
    return matmul(softmax_rows(mul(matmul(q, transpose(k)), scale)), v)


class AttentionPoolHead(EmbeddingHead):
    """n_queries learnable rows attend over final states; mean then project."""

    def __init__(self, config: HeadConfig, rng: np.random.Generator):
        super().__init__(config)
        d = config.d
        self._param("queries", rng.normal(0.0, INIT_STD, (config.n_queries, d)))
        self._param("proj.w", rng.normal(0.0, INIT_STD, (d, d)))
        self._param("proj.b", np.zeros(d))

    def forward_states(self, states):
        s = states[-1]
        pooled = tmean(_attend(self.params["queries"], s, s), axis=0, keepdims=True)
        out = matmul(pooled, self.params["proj.w"]) + self.params["proj.b"]
        return reshape(out, (self.config.d,))


class NvEmbedPoolHead(EmbeddingHead):
    """States query a learnable latent array, then feed-forward + mean pool."""

    def __init__(self, config: HeadConfig, rng: np.random.Generator):
        super().__init__(config)
        d = config.d
        self._param("latents", rng.normal(0.0, INIT_STD, (config.n_latent_value, d)))
        self._param("ff.w1", rng.normal(0.0, INIT_STD, (d, d)))
        self._param("ff.b1", np.zeros(d))
        self._param("ff.w2", rng.normal(0.0, INIT_STD, (d, d)))
        self._param("ff.b2", np.zeros(d))

    def forward_states(self, states):
        lat = self.params["latents"]
        attended = _attend(states[-1], lat, lat)
        h = gelu(matmul(attended, self.params["ff.w1"]) + self.params["ff.b1"])
        h = matmul(h, self.params["ff.w2"]) + self.params["ff.b2"]
        return tmean(h, axis=0)


def strided_layer_choice(n_backbone: int, last_n: int, n_layers: int) -> list:
    """1-based backbone layer indices: n_layers evenly strided rows of the
    last last_n layers; consecutive when n_layers == last_n."""
    window = list(range(n_backbone - last_n + 1, n_backbone + 1))
    if n_layers == 1:
        return [window[-1]]
    picks = np.round(np.linspace(0, last_n - 1, n_layers)).astype(int)
    return [window[i] for i in picks]


class QformerHead(EmbeddingHead):
    """From-scratch blocks: self-attention over a learnable query stream and
    cross-attention into one backbone layer per block."""

    def __init__(self, config: HeadConfig, rng: np.random.Generator,
                 n_backbone_layers: int):
        super().__init__(config)
        d = config.d
        self.layer_sources = strided_layer_choice(
            n_backbone_layers, config.last_n, config.n_layers)
        self._param("stream", rng.normal(0.0, INIT_STD, (QFORMER_STREAM, d)))
        for i in range(config.n_layers):
            pre = f"block{i}."
            for ln in ("ln1", "lnc", "ln2"):
                self._param(pre + ln + ".gamma", np.ones(d))
                self._param(pre + ln + ".beta", np.zeros(d))
            for attn in ("sa", "ca"):
                for slot in ("q", "k", "v", "o"):
                    self._param(pre + f"{attn}.w{slot}",
                                rng.normal(0.0, INIT_STD, (d, d)))
                    self._param(pre + f"{attn}.b{slot}", np.zeros(d))
            # compact fixed widening for the block feed-forward
            self._param(pre + "ff.w1", rng.normal(0.0, INIT_STD, (d, 2 * d)))
            self._param(pre + "ff.b1", np.zeros(2 * d))
            self._param(pre + "ff.w2", rng.normal(0.0, INIT_STD, (2 * d, d)))
            self._param(pre + "ff.b2", np.zeros(d))

    def required_states(self) -> int:
        return max(self.layer_sources) + 1

    def _proj(self, x, pre, slot):
        return matmul(x, self.params[pre + f"w{slot}"]) + self.params[pre + f"b{slot}"]

    def _block(self, x: Tensor, source: Tensor, i: int) -> Tensor:
        p = self.params
        pre = f"block{i}."
        h = layer_norm(x, p[pre + "ln1.gamma"], p[pre + "ln1.beta"])
        sa = _attend(self._proj(h, pre + "sa.", "q"), self._proj(h, pre + "sa.", "k"),
                     self._proj(h, pre + "sa.", "v"))
        x = x + self._proj(sa, pre + "sa.", "o")
        h = layer_norm(x, p[pre + "lnc.gamma"], p[pre + "lnc.beta"])
        ca = _attend(self._proj(h, pre + "ca.", "q"), self._proj(source, pre + "ca.", "k"),
                     self._proj(source, pre + "ca.", "v"))
        x = x + self._proj(ca, pre + "ca.", "o")
        h = layer_norm(x, p[pre + "ln2.gamma"], p[pre + "ln2.beta"])
        h = gelu(matmul(h, p[pre + "ff.w1"]) + p[pre + "ff.b1"])
        return x + matmul(h, p[pre + "ff.w2"]) + p[pre + "ff.b2"]

    def forward_states(self, states):
        x = self.params["stream"]
        for i, src in enumerate(self.layer_sources):
            x = self._block(x, states[src], i)
        return tmean(x, axis=0)


class SelfInitHead(EmbeddingHead):
    """Blocks copied from the backbone, consuming the states where the copied
    stack originally started; untrained with n_layers == last_n it reproduces
    the backbone's final states exactly (LoRA deltas are not copied)."""

    def __init__(self, config: HeadConfig, backbone: Backbone):
        super().__init__(config)
        self.n_heads = backbone.config.n_heads
        self.layer_sources = strided_layer_choice(
            backbone.config.n_layers, config.last_n, config.n_layers)
        self.input_depth = backbone.config.n_layers - config.last_n
        suffixes = ["ln1.gamma", "ln1.beta", "ln2.gamma", "ln2.beta",
                    "ff.w1", "ff.b1", "ff.w2", "ff.b2"]
        suffixes += [f"attn.{w}{s}" for w in ("w", "b") for s in ("q", "k", "v", "o")]
        for i, layer in enumerate(self.layer_sources):
            for suffix in sorted(suffixes):
                src = backbone.params[f"block{layer - 1}.{suffix}"]
                self._param(f"block{i}.{suffix}", src.data.copy())

    def required_states(self) -> int:
        return self.input_depth + 1

    def _attention(self, x: Tensor, i: int, mask: np.ndarray) -> Tensor:
        # mirrors the backbone block op for op so copied weights reproduce it
        p = self.params
        pre = f"block{i}.attn."
        d = x.shape[1]
        dh = d // self.n_heads
        q = matmul(x, p[pre + "wq"]) + p[pre + "bq"]
        k = matmul(x, p[pre + "wk"]) + p[pre + "bk"]
        v = matmul(x, p[pre + "wv"]) + p[pre + "bv"]
        heads = []
        for h in range(self.n_heads):
            lo, hi = h * dh, (h + 1) * dh
            qh, kh, vh = (narrow(t, 1, lo, hi) for t in (q, k, v))
            scores = mul(matmul(qh, transpose(kh)), 1.0 / math.sqrt(dh)) + Tensor(mask)
            heads.append(matmul(softmax_rows(scores), vh))
        merged = heads[0] if len(heads) == 1 else concat(heads, axis=1)
        return matmul(merged, p[pre + "wo"]) + p[pre + "bo"]

    def forward_states(self, states):
        x = states[self.input_depth]
        length = x.shape[0]
        mask = np.triu(np.full((length, length), -1e9), k=1)
        p = self.params
        for i in range(self.config.n_layers):
            pre = f"block{i}."
            x = x + self._attention(
                layer_norm(x, p[pre + "ln1.gamma"], p[pre + "ln1.beta"]), i, mask)
            h = layer_norm(x, p[pre + "ln2.gamma"], p[pre + "ln2.beta"])
            h = gelu(matmul(h, p[pre + "ff.w1"]) + p[pre + "ff.b1"])
            x = x + (matmul(h, p[pre + "ff.w2"]) + p[pre + "ff.b2"])
        return reshape(narrow(x, 0, length - 1, length), (self.config.d,))


class JointMlpHead(EmbeddingHead):
    """Two-layer GELU block on the second-last token's final state."""

    def __init__(self, config: HeadConfig, rng: np.random.Generator):
        super().__init__(config)
        d = config.d
        self._param("w1", rng.normal(0.0, INIT_STD, (d, d)))
        self._param("b1", np.zeros(d))
        self._param("w2", rng.normal(0.0, INIT_STD, (d, d)))
        self._param("b2", np.zeros(d))

    def forward_states(self, states):
        s = states[-1]
        length = s.shape[0]
        if length < 2:
            raise MissingLayerStates("joint_mlp pools the second-last token")
        row = narrow(s, 0, length - 2, length - 1)
        h = gelu(matmul(row, self.params["w1"]) + self.params["b1"])
        out = matmul(h, self.params["w2"]) + self.params["b2"]
        return reshape(out, (self.config.d,))


def build_head(config: HeadConfig, backbone: Backbone) -> EmbeddingHead:
    config.validate(backbone.config)
    rng = np.random.default_rng([backbone.config.seed, 0xEAD, _KIND_CODE[config.kind]])
    if config.kind == "attention_pool":
        return AttentionPoolHead(config, rng)
    if config.kind == "nv_embed_pool":
        return NvEmbedPoolHead(config, rng)
    if config.kind == "qformer":
        return QformerHead(config, rng, backbone.config.n_layers)
    if config.kind == "self_init_mhsa":
        return SelfInitHead(config, backbone)
    return JointMlpHead(config, rng)


def head_from_description(desc: dict, model_config: ModelConfig) -> EmbeddingHead:
    """Rebuild a head for checkpoint loading; parameter values are overwritten
    by the loader right after, so the fresh-backbone copy source is harmless."""
    known = {"kind", "d", "n_queries", "n_latent_value", "n_layers", "last_n"}
    extra = set(desc) - known
    if extra:
        raise BadHeadConfig(f"unknown head description fields {sorted(extra)}")
    config = HeadConfig(**desc)
    return build_head(config, Backbone(model_config))


# -- unification trainers --------------------------------------------------------


@dataclass
class UnifiedModel:
    backbone: Backbone
    head: EmbeddingHead
    stage1_curve: list
    stage2_curve: list


def train_two_stage(backbone: Backbone, vocab, suite, head_config: HeadConfig, *,
                    traces: dict | None = None, stage1_epochs: int = 1,
                    stage1_batch: int = 8, lr_backbone: float = 2e-4,
                    lr_head: float = 5e-4, steps: int = 40,
                    global_batch: int = 8, sub_batch_size: int = 4,
                    tau: float = 0.02, seed: int = 0) -> UnifiedModel:
    """Stage 1 fully fine-tunes the backbone on traces (patch rows pinned);
    stage 2 freezes it and trains only the head with InfoNCE."""
    from .embedder import build_trace_lookup, gradcache_gradients
    from .reasoner import build_sft_dataset, train_reasoner
    from .vocabulary import render_tokens

    train = suite.split("train")
    if not train:
        raise EmptyDataset("suite has no train split")
    if traces is None:
        traces = build_trace_lookup(suite, train, "teacher_exact")
    sft = build_sft_dataset(vocab, suite, traces)
    stage1 = train_reasoner(backbone, vocab, sft, epochs=stage1_epochs,
                            lr=lr_backbone, batch_size=stage1_batch, seed=seed)

    head = build_head(head_config, backbone)
    partition = set_trainable(backbone, "head_only", head=head)
    state = adam_init(partition.tensors(), lr_head)
    rng = np.random.default_rng([seed, 0x25])
    curve = []
    max_len = backbone.config.max_seq_len
    for _ in range(steps):
        idx = rng.choice(len(train), size=min(global_batch, len(train)), replace=False)
        batch = [train[int(i)] for i in idx]
        queries = [render_tokens(vocab, b.query, traces.get((b.instance_id, "query")),
                                 max_len=max_len) for b in batch]
        targets = [render_tokens(vocab, b.positive_target, max_len=max_len)
                   for b in batch]
        sub = min(sub_batch_size, len(batch))
        while len(batch) % sub:
            sub -= 1
        loss = gradcache_gradients(backbone, partition, queries, targets,
                                   sub_batch_size=sub, tau=tau, head=head)
        adam_step(partition.tensors(), partition.masked_grads(), state)
        curve.append(loss)
    return UnifiedModel(backbone=backbone, head=head,
                        stage1_curve=stage1.loss_curve, stage2_curve=curve)


def unified_embed(backbone: Backbone, head: EmbeddingHead, vocab, triplet,
                  max_new_tokens: int = 48):
    """Single-pipeline inference: decode a trace, then one forward over the
    full sequence feeds the head.  Malformed decodes embed trace-free."""
    from .reasoner import student_trace
    from .tensor import no_grad
    from .traces import MalformedTrace
    from .vocabulary import render_tokens

    try:
        trace = student_trace(backbone, vocab, triplet, max_new_tokens)
    except MalformedTrace:
        trace = None
    tokens = render_tokens(vocab, triplet, trace, max_len=backbone.config.max_seq_len)
    with no_grad():
        states, _ = backbone.forward(tokens)
        vector = head(states).data.copy()
    return trace, vector


@dataclass
class JointRun:
    backbone: Backbone
    head: EmbeddingHead
    log: list  # per step: {"step", "sft", "infonce", "total"}

    def curve(self, key: str) -> list:
        return [entry[key] for entry in self.log]


def train_joint(backbone: Backbone, vocab, suite, lam: float, *,
                steps: int = 40, global_batch: int = 8, lr: float = 2e-4,
                tau: float = 0.02, seed: int = 0) -> JointRun:
    """One backbone on lam * InfoNCE + SFT; embeddings are the second-last
    token's state through the joint_mlp block; both components logged."""
    from .embedder import EmbeddingBatch, build_trace_lookup, infonce_loss
    from .reasoner import build_sft_dataset, completion_nll
    from .vocabulary import render_tokens

    if lam <= 0:
        raise ConfigInvalid(f"lambda must be positive, got {lam}")
    train = suite.split("train")
    if not train:
        raise EmptyDataset("suite has no train split")
    traces = build_trace_lookup(suite, train, "teacher_exact")
    sft = {ex.instance_id: ex
           for ex in build_sft_dataset(vocab, suite, traces,
                                       max_len=backbone.config.max_seq_len)}

    head = build_head(HeadConfig(kind="joint_mlp", d=backbone.config.d_model), backbone)
    backbone.pin_embedding_rows(vocab.patch_token_ids())
    partition = set_trainable(backbone, "all", head=head)
    state = adam_init(partition.tensors(), lr)
    rng = np.random.default_rng([seed, 0x70])

    run = JointRun(backbone=backbone, head=head, log=[])
    max_len = backbone.config.max_seq_len
    for step in range(1, steps + 1):
        idx = rng.choice(len(train), size=min(global_batch, len(train)), replace=False)
        batch = [train[int(i)] for i in idx]
        zero_grads(partition.tensors())

        nll_total = None
        q_rows, t_rows = [], []
        for inst in batch:
            ex = sft[inst.instance_id]
            tokens = ex.tokens
            states, logits = backbone.forward(tokens)
            nll = completion_nll(logits, tokens, len(ex.prompt))
            nll_total = nll if nll_total is None else nll_total + nll
            q_rows.append(reshape(head(states), (1, -1)))
            t_states, _ = backbone.forward(
                render_tokens(vocab, inst.positive_target, max_len=max_len))
            t_rows.append(reshape(head(t_states), (1, -1)))

        sft_term = nll_total * (1.0 / len(batch))
        nce_term = infonce_loss(
            EmbeddingBatch(concat(q_rows, axis=0), concat(t_rows, axis=0)), tau)
        total = nce_term * lam + sft_term
        backward(total)
        adam_step(partition.tensors(), partition.masked_grads(), state)
        run.log.append({"step": step, "sft": sft_term.item(),
                        "infonce": nce_term.item(), "total": total.item()})
    return run
