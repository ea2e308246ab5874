"""Student reasoner: trace distillation by SFT, greedy decoding, answer accuracy.

The reasoner is the same backbone architecture as the embedder but trained as
a language model: given a rendered (image, instruction, text) prompt it must
emit a reasoning trace `<think> cot </think> Answer: final`.  Training
maximizes the likelihood of teacher traces over completion positions only;
patch-embedding rows stay frozen throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContextOverflow, EmptyDataset, EmptyMask, MalformedTrace
from .model import Backbone, set_trainable
from .optim import adam_init, adam_step
from .tensor import Tensor, backward, gather_rows, log_softmax_rows, no_grad, tsum, zero_grads
from .traces import ECRTrace, parse_ecr
from .vocabulary import Vocabulary, canonicalize, render_with_boundary


@dataclass(frozen=True)
class SftExample:
    """One training sequence split at the trace boundary.

    prompt covers [bos] through the separator before the trace; completion is
    the rendered trace plus [eos].  Only completion positions carry loss.
    """

    instance_id: str
    prompt: np.ndarray
    completion: np.ndarray

    def __post_init__(self):
        if len(self.completion) == 0:
            raise EmptyMask(f"{self.instance_id}: no completion tokens")
        if len(self.prompt) == 0:
            raise EmptyMask(f"{self.instance_id}: empty prompt")

    @property
    def tokens(self) -> np.ndarray:
        return np.concatenate([self.prompt, self.completion])

    @property
    def mask(self) -> np.ndarray:
        return np.concatenate([np.zeros(len(self.prompt), dtype=np.int64),
                               np.ones(len(self.completion), dtype=np.int64)])


def build_sft_example(vocab: Vocabulary, triplet, trace: ECRTrace, instance_id: str,
                      max_len: int | None = None) -> SftExample:
    ids, trace_start = render_with_boundary(vocab, triplet, ecr=trace, max_len=max_len)
    return SftExample(instance_id=instance_id, prompt=ids[:trace_start],
                      completion=ids[trace_start:])


def build_sft_dataset(vocab: Vocabulary, suite, traces: dict,
                      max_len: int | None = None) -> list[SftExample]:
    """Join a suite to query-side traces keyed by (instance_id, side)."""
    out = []
    for inst in suite:
        key = (inst.instance_id, "query")
        if key in traces:
            out.append(build_sft_example(vocab, inst.query, traces[key],
                                         inst.instance_id, max_len))
    if not out:
        raise EmptyDataset("no suite instance has a query-side trace")
    return out


def decode_prompt(vocab: Vocabulary, triplet) -> np.ndarray:
    """Prompt tokens for generation: the SFT layout up to (and including) the
    separator that precedes the trace."""
    ids, _ = render_with_boundary(vocab, triplet)
    return np.concatenate([ids[:-1], np.asarray([vocab.sep_id], dtype=np.int64)])


def completion_nll(logits: Tensor, tokens: np.ndarray, trace_start: int) -> Tensor:
    """Mean negative log-likelihood over positions trace_start..end.

    Position t is predicted by the logits row at t-1, so prompt rows beyond
    trace_start-1 never enter the loss.
    """
    length = len(tokens)
    if not 1 <= trace_start < length:
        raise EmptyMask(f"trace_start {trace_start} leaves no completion in {length}")
    rows = np.arange(trace_start - 1, length - 1)
    targets = np.asarray(tokens[trace_start:], dtype=np.int64)
    logp = log_softmax_rows(logits)
    picked = gather_rows(logp, rows)
    onehot = np.zeros((len(rows), logits.shape[1]))
    onehot[np.arange(len(rows)), targets] = 1.0
    return tsum(picked * onehot) * (-1.0 / len(rows))


def sft_loss(backbone: Backbone, batch: list[SftExample]) -> Tensor:
    """Per-example mean over completion positions, then mean over the batch."""
    if not batch:
        raise EmptyDataset("sft_loss over an empty batch")
    total = None
    for ex in batch:
        tokens = ex.tokens
        _, logits = backbone.forward(tokens)
        nll = completion_nll(logits, tokens, len(ex.prompt))
        total = nll if total is None else total + nll
    return total * (1.0 / len(batch))


@dataclass
class TrainResult:
    backbone: Backbone
    loss_curve: list = field(default_factory=list)


def train_reasoner(backbone: Backbone, vocab: Vocabulary, examples: list[SftExample],
                   epochs: int = 1, lr: float = 2e-5, batch_size: int = 8,
                   seed: int = 0) -> TrainResult:
    """Full-parameter SFT with patch-embedding rows pinned."""
    if not examples:
        raise EmptyDataset("train_reasoner needs at least one example")
    backbone.pin_embedding_rows(vocab.patch_token_ids())
    partition = set_trainable(backbone, "all")
    state = adam_init(partition.tensors(), lr)
    rng = np.random.default_rng([seed, 0x5F7])
    curve = []
    for _ in range(epochs):
        order = rng.permutation(len(examples))
        for lo in range(0, len(order), batch_size):
            batch = [examples[i] for i in order[lo:lo + batch_size]]
            zero_grads(partition.tensors())
            loss = sft_loss(backbone, batch)
            backward(loss)
            adam_step(partition.tensors(), partition.masked_grads(), state)
            curve.append(loss.item())
    return TrainResult(backbone=backbone, loss_curve=curve)


def greedy_decode(backbone: Backbone, prompt: np.ndarray, max_new_tokens: int,
                  eos_id: int) -> np.ndarray:
    """Argmax decoding until EOS, the token cap, or the context limit.

    np.argmax resolves ties toward the lowest token id.  The returned
    completion excludes EOS.
    """
    limit = backbone.config.max_seq_len
    if len(prompt) + 1 > limit:
        raise ContextOverflow(f"prompt of {len(prompt)} fills context {limit}")
    cur = list(np.asarray(prompt, dtype=np.int64))
    out = []
    with no_grad():
        for _ in range(max_new_tokens):
            if len(cur) >= limit:
                break
            _, logits = backbone.forward(np.asarray(cur, dtype=np.int64))
            nxt = int(np.argmax(logits.data[-1]))
            if nxt == eos_id:
                break
            out.append(nxt)
            cur.append(nxt)
    return np.asarray(out, dtype=np.int64)


def student_trace(backbone: Backbone, vocab: Vocabulary, triplet,
                  max_new_tokens: int = 48) -> ECRTrace:
    """Decode and parse one trace; MalformedTrace propagates to the caller."""
    prompt = decode_prompt(vocab, triplet)
    ids = greedy_decode(backbone, prompt, max_new_tokens, vocab.eos_id)
    return parse_ecr(vocab.decode(ids), mode="student")


def exact_match_eval(backbone: Backbone, vocab: Vocabulary, instances,
                     max_new_tokens: int = 48) -> float:
    """Share of instances whose decoded final answer canonicalizes to the
    suite's answer.  Malformed or overlong decodes count as mismatches."""
    instances = list(instances)
    if not instances:
        raise EmptyDataset("exact_match_eval over no instances")
    hits = 0
    for inst in instances:
        try:
            trace = student_trace(backbone, vocab, inst.query, max_new_tokens)
        except (MalformedTrace, ContextOverflow):
            continue
        if canonicalize(trace.final) == canonicalize(inst.answer_canonical):
            hits += 1
    return hits / len(instances)
