"""Reasoning-conditioned multimodal embedding at desk scale.

A micro decoder-only transformer is trained two ways over a synthetic
grid-world retrieval suite: as a reasoner that emits structured traces
(SFT), and as an embedder whose pooled hidden state is trained with a
contrastive objective, optionally conditioned on those traces.  Everything
runs on an in-package float64 autodiff engine.

Modules:
  tensor      autodiff engine and numerical kernels
  optim       Adam and the finite-difference gradient oracle
  model       micro transformer backbone, LoRA, checkpoints
  vocabulary  closed token vocabulary and sequence rendering
  gridworld   synthetic suite generation and the task answer oracle
  traces      reasoning-trace construction, corruption, parsing
  reasoner    SFT training, greedy decoding, exact-match eval
  embedder    pooling, InfoNCE, gradient caching, contrastive training
  heads       pluggable embedding heads, two-stage and joint training
  metrics     retrieval scoring and report emission
  projection  PCA and exact t-SNE to 2-D
  config      run configuration loading, validation, hashing
  cli         command-line front end
"""

__version__ = "0.1.0"

import os as _os

# REASONEMBED_THREADS caps BLAS threading; must land before numpy loads
_threads = _os.environ.get("REASONEMBED_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .tensor import Tensor, backward, cosine_similarity, no_grad, stable_softmax

__all__ = [
    "Tensor",
    "backward",
    "cosine_similarity",
    "no_grad",
    "stable_softmax",
    "__version__",
]
