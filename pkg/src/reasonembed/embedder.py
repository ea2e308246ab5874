"""Contrastive embedder: pooling, InfoNCE, GradCache, and the training loop.

An embedding is one hidden-state row of the backbone's final layer, pooled at
the last (or second-last) position of the rendered sequence.  Training is
uni-directional query-to-target InfoNCE over in-batch negatives with LoRA-only
backbone updates; the GradCache path reproduces full-batch gradients while
keeping only one sub-batch's differentiation graph alive at a time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import canonical_json, model_hash
from .errors import (
    ConfigInvalid,
    EmptyDataset,
    MissingReasoner,
    NonPositiveTemperature,
    ShapeMismatch,
    TooShortForSecondLast,
    ZeroNorm,
)
from .model import Backbone, lora_apply, set_trainable
from .optim import adam_init, adam_step
from .tensor import (
    Tensor,
    backward,
    log_softmax_rows,
    narrow,
    no_grad,
    reshape,
    tsqrt,
    tsum,
    zero_grads,
)
from .traces import ECRTrace, MalformedTrace, make_noisy_ecr, oracle_ecr
from .vocabulary import Vocabulary, render_tokens

POOL_MODES = ("last", "second_last")


def pool_hidden(hidden, length: int, mode: str = "last"):
    """Select the embedding row: position length-1 (last) or length-2.

    Rows at and beyond `length` are padding and never influence the result.
    Accepts a Tensor (differentiable) or a bare array.
    """
    if mode not in POOL_MODES:
        raise ShapeMismatch(f"unknown pooling mode {mode!r}")
    n_rows = hidden.shape[0]
    if not 1 <= length <= n_rows:
        raise ShapeMismatch(f"length {length} outside 1..{n_rows}")
    if mode == "second_last":
        if length < 2:
            raise TooShortForSecondLast("second_last pooling needs length >= 2")
        idx = length - 2
    else:
        idx = length - 1
    if isinstance(hidden, Tensor):
        return reshape(narrow(hidden, 0, idx, idx + 1), (hidden.shape[1],))
    return np.asarray(hidden)[idx]


def embed_tokens(backbone: Backbone, tokens: np.ndarray, mode: str = "last",
                 head=None) -> Tensor:
    """Forward a token sequence and pool its final-layer states.

    With a head attached the head consumes the full states list instead of
    plain last-token pooling.
    """
    states, _ = backbone.forward(tokens)
    if head is not None:
        return head(states)
    return pool_hidden(states[-1], len(tokens), mode)


def embed_example(backbone: Backbone, vocab: Vocabulary, triplet, ecr=None,
                  mode: str = "last", head=None) -> np.ndarray:
    """Inference-path embedding of one triplet (with optional trace)."""
    tokens = render_tokens(vocab, triplet, ecr, max_len=backbone.config.max_seq_len)
    with no_grad():
        return embed_tokens(backbone, tokens, mode, head).data.copy()


@dataclass
class EmbeddingBatch:
    """Row-aligned query/target embedding matrices; row i of Hq pairs with
    row i of Ht."""

    Hq: Tensor
    Ht: Tensor

    def __post_init__(self):
        if not isinstance(self.Hq, Tensor):
            self.Hq = Tensor(self.Hq)
        if not isinstance(self.Ht, Tensor):
            self.Ht = Tensor(self.Ht)
        if self.Hq.data.ndim != 2 or self.Hq.shape != self.Ht.shape:
            raise ShapeMismatch(f"Hq {self.Hq.shape} vs Ht {self.Ht.shape}")
        if self.Hq.shape[0] < 1:
            raise ShapeMismatch("empty embedding batch")
        for name, t in (("Hq", self.Hq), ("Ht", self.Ht)):
            if not np.isfinite(t.data).all():
                raise ShapeMismatch(f"{name} has non-finite entries")

    @property
    def n(self) -> int:
        return self.Hq.shape[0]


def _row_normalize(m: Tensor, what: str) -> Tensor:
    norms_sq = tsum(m * m, axis=1, keepdims=True)
    if (norms_sq.data < 1e-24).any():
        raise ZeroNorm(f"zero-norm row in {what}")
    return m / tsqrt(norms_sq)


def infonce_loss(batch: EmbeddingBatch, tau: float = 0.02) -> Tensor:
    """Uni-directional q->t InfoNCE: mean over rows of the negative
    log-probability of the diagonal under a row softmax of cos/tau."""
    if tau <= 0:
        raise NonPositiveTemperature(f"tau must be positive, got {tau}")
    q = _row_normalize(batch.Hq, "Hq")
    t = _row_normalize(batch.Ht, "Ht")
    scores = (q @ t.transpose()) * (1.0 / tau)
    logp = log_softmax_rows(scores)
    eye = np.eye(batch.n)
    return tsum(logp * eye) * (-1.0 / batch.n)


def gradcache_gradients(backbone: Backbone, partition, query_tokens: list,
                        target_tokens: list, sub_batch_size: int,
                        tau: float = 0.02, mode: str = "last",
                        head=None) -> float:
    """Full-batch InfoNCE gradients computed one sub-batch at a time.

    Phase 1 embeds every sequence without recording differentiation state.
    Phase 2 runs the loss on leaf embedding matrices and harvests one upstream
    gradient row per embedding.  Phase 3 re-forwards each example with
    recording on and back-propagates its row into parameter grads, so only one
    example's graph is ever alive.  Grads accumulate into partition tensors;
    the per-batch loss value is returned.
    """
    n = len(query_tokens)
    if n == 0 or len(target_tokens) != n:
        raise ShapeMismatch(f"{n} queries vs {len(target_tokens)} targets")
    if n % sub_batch_size != 0:
        raise ShapeMismatch(f"batch {n} not divisible by sub-batch {sub_batch_size}")

    zero_grads(partition.tensors())

    with no_grad():
        hq = np.stack([embed_tokens(backbone, t, mode, head).data for t in query_tokens])
        ht = np.stack([embed_tokens(backbone, t, mode, head).data for t in target_tokens])

    leaf_q = Tensor(hq, requires_grad=True)
    leaf_t = Tensor(ht, requires_grad=True)
    loss = infonce_loss(EmbeddingBatch(leaf_q, leaf_t), tau)
    backward(loss)
    row_grads_q = leaf_q.grad
    row_grads_t = leaf_t.grad

    for tokens, row_grads in ((query_tokens, row_grads_q), (target_tokens, row_grads_t)):
        for lo in range(0, n, sub_batch_size):
            for i in range(lo, lo + sub_batch_size):
                emb = embed_tokens(backbone, tokens[i], mode, head)
                backward(emb, seed=row_grads[i], accumulate=True)
    return loss.item()


@dataclass(frozen=True)
class SamplerConfig:
    """Global batch split into n_sub equal runs, each from one dataset."""

    global_batch: int
    n_sub: int
    weights: tuple

    def __post_init__(self):
        if self.global_batch < 1 or self.n_sub < 1:
            raise ConfigInvalid("global_batch and n_sub must be positive")
        if self.global_batch % self.n_sub != 0:
            raise ConfigInvalid(
                f"global_batch {self.global_batch} not divisible by n_sub {self.n_sub}")
        w = np.asarray(self.weights, dtype=np.float64)
        if w.size == 0 or (w < 0).any() or w.sum() <= 0:
            raise ConfigInvalid("weights must be non-negative and sum positive")
        object.__setattr__(self, "weights", tuple((w / w.sum()).tolist()))

    @property
    def sub_size(self) -> int:
        return self.global_batch // self.n_sub


def interleaved_batches(datasets: list, config: SamplerConfig, seed: int,
                        n_batches: int):
    """Yield n_batches global batches, each a list of (dataset_index, examples)
    sub-batches; the source of every sub-batch is drawn by weight."""
    if len(datasets) != len(config.weights):
        raise ConfigInvalid(f"{len(datasets)} datasets vs {len(config.weights)} weights")
    for d, ds in enumerate(datasets):
        if len(ds) == 0:
            raise EmptyDataset(f"dataset {d} is empty")
    rng = np.random.default_rng([seed, 0x1A7E])
    p = np.asarray(config.weights)
    for _ in range(n_batches):
        batch = []
        for _ in range(config.n_sub):
            d = int(rng.choice(len(datasets), p=p))
            ds = datasets[d]
            replace = len(ds) < config.sub_size
            idx = rng.choice(len(ds), size=config.sub_size, replace=replace)
            batch.append((d, [ds[int(i)] for i in idx]))
        yield batch


ECR_SOURCES = ("none", "teacher_exact", "teacher_noisy", "student")


def eval_trace_mode(ecr_source: str) -> str | None:
    """Trace source used at inference time for a given training source.

    Noisy training still reads clean teacher traces when evaluating; the
    student arm decodes its own traces; the baseline stays trace-free.
    """
    if ecr_source == "none":
        return None
    if ecr_source in ("teacher_exact", "teacher_noisy"):
        return "teacher_exact"
    if ecr_source == "student":
        return "student"
    raise ConfigInvalid(f"unknown ecr_source {ecr_source!r}")


def strip_cot(trace: ECRTrace) -> ECRTrace:
    """Final-only variant of a trace: think block kept, body emptied."""
    return ECRTrace(cot="", final=trace.final, mode=trace.mode)


def build_trace_lookup(suite, instances, ecr_source: str, seed: int = 0,
                       reasoner=None, vocab: Vocabulary | None = None,
                       sides=("query",), max_new_tokens: int = 48,
                       include_cot: bool = True) -> dict:
    """(instance_id, side) -> ECRTrace for the requested source.

    Student traces are greedy-decoded from the supplied reasoner backbone;
    an instance whose decode is malformed simply gets no entry, so it falls
    back to trace-free rendering downstream. include_cot=False drops every
    trace's reasoning body, leaving only the final answer.
    """
    if ecr_source not in ECR_SOURCES:
        raise ConfigInvalid(f"unknown ecr_source {ecr_source!r}")
    if ecr_source == "none":
        return {}
    instances = list(instances)
    out = {}
    if ecr_source in ("teacher_exact", "teacher_noisy"):
        base = [oracle_ecr(inst, "teacher_exact") for inst in instances]
        for s_idx, side in enumerate(sides):
            traces = base if ecr_source == "teacher_exact" else \
                make_noisy_ecr(base, seed + s_idx)
            for inst, tr in zip(instances, traces):
                out[(inst.instance_id, side)] = tr
    else:
        if reasoner is None or vocab is None:
            raise MissingReasoner("ecr_source=student needs a reasoner and vocabulary")
        from .reasoner import student_trace
        for inst in instances:
            for side in sides:
                triplet = inst.query if side == "query" else inst.positive_target
                try:
                    out[(inst.instance_id, side)] = student_trace(
                        reasoner, vocab, triplet, max_new_tokens)
                except MalformedTrace:
                    pass
    if not include_cot:
        out = {key: strip_cot(tr) for key, tr in out.items()}
    return out


@dataclass
class EmbedderRun:
    backbone: Backbone
    loss_curve: list = field(default_factory=list)
    eval_log: list = field(default_factory=list)
    ecr_source: str = "none"


def _render_pair(backbone, vocab, inst, traces, attach_target):
    q = render_tokens(vocab, inst.query, traces.get((inst.instance_id, "query")),
                      max_len=backbone.config.max_seq_len)
    t_trace = traces.get((inst.instance_id, "target")) if attach_target else None
    t = render_tokens(vocab, inst.positive_target, t_trace,
                      max_len=backbone.config.max_seq_len)
    return q, t


def train_embedder(backbone: Backbone, vocab: Vocabulary, suite,
                   ecr_source: str = "none", *, steps: int = 60,
                   global_batch: int = 16, sub_batch_size: int = 8,
                   lr: float = 2e-4, tau: float = 0.02,
                   attach_target: bool = False, seed: int = 0,
                   reasoner=None, eval_every: int = 0,
                   mode: str = "last", include_cot: bool = True) -> EmbedderRun:
    """LoRA-only contrastive training over interleaved per-task batches."""
    train = suite.split("train")
    if not train:
        raise EmptyDataset("suite has no train split")
    if ecr_source == "student" and reasoner is None:
        raise MissingReasoner("ecr_source=student needs a reasoner checkpoint")

    sides = ("query", "target") if attach_target else ("query",)
    traces = build_trace_lookup(suite, train, ecr_source, seed=seed,
                                reasoner=reasoner, vocab=vocab, sides=sides,
                                include_cot=include_cot)

    if not backbone.adapters:
        lora_apply(backbone)
    partition = set_trainable(backbone, "lora_only")
    state = adam_init(partition.tensors(), lr)

    datasets = [suite.of_task(t, "train") for t in sorted({i.task_kind for i in train})]
    cfg = SamplerConfig(global_batch=global_batch,
                        n_sub=max(1, global_batch // sub_batch_size),
                        weights=tuple(len(d) for d in datasets))

    run = EmbedderRun(backbone=backbone, ecr_source=ecr_source)
    for step, batch in enumerate(
            interleaved_batches(datasets, cfg, seed, n_batches=steps), start=1):
        insts = [inst for _, sub in batch for inst in sub]
        pairs = [_render_pair(backbone, vocab, i, traces, attach_target) for i in insts]
        loss = gradcache_gradients(backbone, partition,
                                   [q for q, _ in pairs], [t for _, t in pairs],
                                   sub_batch_size=cfg.sub_size, tau=tau, mode=mode)
        adam_step(partition.tensors(), partition.masked_grads(), state)
        run.loss_curve.append(loss)
        if eval_every and step % eval_every == 0:
            run.eval_log.append((step, held_out_precision(
                backbone, vocab, suite, ecr_source, seed=seed, mode=mode,
                reasoner=reasoner)))
    return run


def embedding_rows(backbone: Backbone, vocab: Vocabulary, instances,
                   traces: dict, mode: str = "last", head=None) -> list:
    """Query- and target-side embedding records for a set of instances."""
    rows = []
    for inst in sorted(instances, key=lambda i: i.instance_id):
        for side, triplet in (("query", inst.query), ("target", inst.positive_target)):
            vec = embed_example(backbone, vocab, triplet,
                                traces.get((inst.instance_id, side)), mode, head)
            rows.append({"id": inst.instance_id, "side": side,
                         "vector": [float(x) for x in vec]})
    return rows


def eval_embeddings(backbone: Backbone, vocab: Vocabulary, suite,
                    ecr_source: str, seed: int = 0, mode: str = "last",
                    head=None, reasoner=None, attach_target: bool = False,
                    include_cot: bool = True) -> dict:
    """Embedding lookup for scoring: eval-time traces on the query side of
    every instance, trace-free targets (unless attach_target)."""
    inference = eval_trace_mode(ecr_source)
    sides = ("query", "target") if attach_target else ("query",)
    traces = {} if inference is None else build_trace_lookup(
        suite, suite.instances, inference, seed=seed, reasoner=reasoner,
        vocab=vocab, sides=sides, include_cot=include_cot)
    out = {}
    for row in embedding_rows(backbone, vocab, suite.instances, traces, mode, head):
        out[(row["id"], row["side"])] = np.asarray(row["vector"])
    return out


def held_out_precision(backbone, vocab, suite, ecr_source, seed=0, mode="last",
                       head=None, reasoner=None, include_cot=True) -> float:
    from .metrics import suite_precision_at_1
    emb = eval_embeddings(backbone, vocab, suite, ecr_source, seed=seed,
                          mode=mode, head=head, reasoner=reasoner,
                          include_cot=include_cot)
    return suite_precision_at_1(suite, emb, suite.split("test"))


def save_embedding_dump(path, rows: list, manifest: dict) -> None:
    """JSONL rows {id, side, vector} plus a sibling .manifest.json."""
    path = str(path)
    with open(path, "w") as fh:
        for row in rows:
            fh.write(canonical_json(row) + "\n")
    with open(_manifest_path(path), "w") as fh:
        fh.write(canonical_json(manifest) + "\n")


def load_embedding_dump(path) -> tuple:
    path = str(path)
    rows = {}
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            rows[(rec["id"], rec["side"])] = np.asarray(rec["vector"], dtype=np.float64)
    with open(_manifest_path(path)) as fh:
        manifest = json.load(fh)
    return rows, manifest


def _manifest_path(path: str) -> str:
    stem = path[:-6] if path.endswith(".jsonl") else path
    return stem + ".manifest.json"


def dump_manifest(backbone: Backbone, ecr_source: str, seed: int,
                  head=None) -> dict:
    return {"model_hash": model_hash(backbone, head),
            "ecr_source": ecr_source, "seed": seed}
