"""Masked cls-token attention fusion and baseline fusion operators."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .autograd import (
    ShapeError,
    Tensor,
    concat,
    gelu,
    getitem,
    masked_fill,
    reshape,
    softmax,
    stack,
    sum_,
    transpose,
)
from .nn import Linear, Module, Parameter, count_feedforward

MASK_LOGIT = -1e9
FUSION_KINDS = ("mean", "sum", "max", "concat", "tensor")


class NoModalityError(ValueError):
    pass


class MAFusionBlock(Module):
    """Single-query multi-head attention pooling with a learnable cls query.

    Tokens get a learnable slot embedding (one per position) before the
    projections.  Only the cls row of the attention matrix is computed: the
    query is the projected cls token, keys and values are the projected
    modality tokens.  With ``attend_to_cls`` the cls token itself is also
    offered as an always-visible key/value.
    """

    def __init__(
        self,
        d: int,
        n_slots: int,
        rng: np.random.Generator,
        heads: int = 4,
        head_dim: int = 16,
        slot_embeddings: bool = True,
        attend_to_cls: bool = False,
    ):
        inner = heads * head_dim
        self.d, self.n_slots, self.heads, self.head_dim = d, n_slots, heads, head_dim
        self.cls = Parameter(0.02 * rng.standard_normal(d))
        self.slots = Parameter(0.02 * rng.standard_normal((n_slots, d))) if slot_embeddings else None
        bound = 1.0 / np.sqrt(d)
        self.w_q = Parameter(rng.uniform(-bound, bound, (d, inner)))
        self.w_k = Parameter(rng.uniform(-bound, bound, (d, inner)))
        self.w_v = Parameter(rng.uniform(-bound, bound, (d, inner)))
        self.out = Linear(inner, d, rng)
        self.dense = Linear(d, d, rng)
        self.attend_to_cls = attend_to_cls

    def attend(self, tokens: Tensor, mask) -> tuple[Tensor, np.ndarray]:
        """Concatenated per-head attention output ``(N, H*Dh)`` and weights ``(N, H, T)``."""
        if tokens.ndim != 3 or tokens.shape[2] != self.d or tokens.shape[1] > self.n_slots:
            raise ShapeError("mafusion", tokens.shape, (None, self.n_slots, self.d))
        N, T, _ = tokens.shape
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (N, T):
            raise ShapeError("mafusion", tokens.shape, mask.shape)
        if not mask.any(axis=1).all():
            raise NoModalityError("no modality available: every token of a patient is masked")

        if self.slots is not None:
            tokens = tokens + getitem(self.slots, slice(0, T))
        if self.attend_to_cls:
            cls_tok = reshape(self.cls, (1, 1, self.d)) + np.zeros((N, 1, 1))
            tokens = concat([cls_tok, tokens], axis=1)
            mask = np.concatenate([np.ones((N, 1), dtype=bool), mask], axis=1)
            T += 1

        H, Dh = self.heads, self.head_dim
        q = reshape(reshape(self.cls, (1, self.d)) @ self.w_q, (H, Dh, 1))
        k = transpose(reshape(tokens @ self.w_k, (N, T, H, Dh)), (0, 2, 1, 3))  # N,H,T,Dh
        v = transpose(reshape(tokens @ self.w_v, (N, T, H, Dh)), (0, 2, 1, 3))
        scores = reshape(k @ q, (N, H, T)) / np.sqrt(Dh)
        keep = np.broadcast_to(mask[:, None, :], (N, H, T))
        weights = softmax(masked_fill(scores, keep, MASK_LOGIT), axis=-1)
        pooled = reshape(reshape(weights, (N, H, 1, T)) @ v, (N, H * Dh))
        return pooled, weights.data

    def __call__(self, tokens: Tensor, mask) -> Tensor:
        pooled, _ = self.attend(tokens, mask)
        return self.dense(gelu(self.out(pooled)))


def mafusion(block: MAFusionBlock, tokens: Tensor, mask) -> Tensor:
    return block(tokens, mask)


def fuse_shared(h_s: MAFusionBlock, shared: Sequence[Tensor], present) -> Tensor:
    """Fuse the per-modality shared representations into one global vector per patient."""
    present = np.asarray(present, dtype=bool)
    return h_s(stack(list(shared), axis=1), present.T)


def fuse_unique(h_u: MAFusionBlock, unique: Sequence[Tensor], s: Tensor, present) -> Tensor:
    """Fuse unique representations with the global shared vector (always visible)."""
    present = np.asarray(present, dtype=bool)
    tokens = stack(list(unique) + [s], axis=1)
    mask = np.concatenate([present.T, np.ones((s.shape[0], 1), dtype=bool)], axis=1)
    return h_u(tokens, mask)


def mafusion_param_count(d: int, n_slots: int, heads: int, head_dim: int, slot_embeddings: bool = True) -> int:
    inner = heads * head_dim
    count = d + 3 * d * inner + count_feedforward([inner, d]) + count_feedforward([d, d])
    return count + (n_slots * d if slot_embeddings else 0)


# -- baselines ---------------------------------------------------------------------------


def audit_tensor_params(n_modalities: int, d: int, d_out: int, include_bias: bool = False) -> int:
    """Weights of the linear map applied to the flattened outer product ``(d+1)^M``."""
    if min(n_modalities, d, d_out) < 1:
        raise ValueError("audit_tensor_params: all arguments must be positive")
    count = (int(d) + 1) ** int(n_modalities) * int(d_out)
    return count + int(d_out) if include_bias else count


class TensorBudgetError(ValueError):
    def __init__(self, count: int, budget: int):
        self.count, self.budget = count, budget
        super().__init__(f"tensor fusion needs {count:,} parameters, budget is {budget:,}")


def baseline_fuse(kind: str, reps: Sequence[Tensor], present, projection: Linear | None = None) -> Tensor:
    """Parameter-free fusion of ``M`` representations of shape ``(N, d)``.

    ``mean``/``sum``/``max`` reduce over present modalities only; ``concat``
    and ``tensor`` zero-fill absent ones.  ``tensor`` returns the flattened
    outer product of the 1-appended vectors, passed through ``projection``
    when one is given.
    """
    if kind not in FUSION_KINDS:
        raise ValueError(f"unknown fusion kind {kind!r}; expected one of {FUSION_KINDS}")
    present = np.asarray(present, dtype=bool)
    N = reps[0].shape[0]
    if present.shape != (len(reps), N):
        raise ShapeError(f"baseline_fuse[{kind}]", present.shape, (len(reps), N))
    weights = present.T[:, :, None].astype(reps[0].dtype)  # N, M, 1
    stacked = stack(list(reps), axis=1)  # N, M, d

    if kind in ("mean", "sum", "max") and not present.any(axis=0).all():
        raise NoModalityError("no modality available for at least one patient")
    if kind == "sum":
        return sum_(stacked * weights, axis=1)
    if kind == "mean":
        return sum_(stacked * weights, axis=1) / weights.sum(axis=1)
    if kind == "max":
        candidates = np.where(present.T[:, :, None], stacked.data, -np.inf)
        best = np.argmax(candidates, axis=1)  # N, d
        n_idx, d_idx = np.meshgrid(np.arange(N), np.arange(stacked.shape[2]), indexing="ij")
        return getitem(stacked, (n_idx, best, d_idx))

    filled = [r * weights[:, m, :] for m, r in enumerate(reps)]
    if kind == "concat":
        return concat(filled, axis=1)

    ones = np.ones((N, 1), dtype=reps[0].dtype)
    acc = concat([filled[0], ones], axis=1)
    for r in filled[1:]:
        z = concat([r, ones], axis=1)
        a, b = acc.shape[1], z.shape[1]
        acc = reshape(reshape(acc, (N, a, 1)) * reshape(z, (N, 1, b)), (N, a * b))
    return projection(acc) if projection is not None else acc


class BaselineFusion(Module):
    """Baseline fusion with its output width; ``tensor`` owns the projection to ``d_out``."""

    def __init__(self, kind: str, n_modalities: int, d: int, rng: np.random.Generator,
                 d_out: int | None = None, tensor_budget: int = 100_000_000):
        if kind not in FUSION_KINDS:
            raise ValueError(f"unknown fusion kind {kind!r}; expected one of {FUSION_KINDS}")
        self.kind, self.n_modalities, self.d = kind, n_modalities, d
        self.projection = None
        if kind == "tensor":
            d_out = d_out or d
            count = audit_tensor_params(n_modalities, d, d_out)
            if count > tensor_budget:
                raise TensorBudgetError(count, tensor_budget)
            self.projection = Linear((d + 1) ** n_modalities, d_out, rng)
            self.out_dim = d_out
        elif kind == "concat":
            self.out_dim = n_modalities * d
        else:
            self.out_dim = d

    def __call__(self, reps: Sequence[Tensor], present) -> Tensor:
        return baseline_fuse(self.kind, reps, present, self.projection)
