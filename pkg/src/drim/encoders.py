"""Per-modality encoders, discriminators, decoders, survival heads and checkpoints."""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .autograd import ShapeError, Tensor, concat, l2_normalize_rows, reshape, sigmoid
from .nn import FeedForward, Linear, Module


class NonFiniteInputError(ValueError):
    def __init__(self, patient: int, modality: int):
        self.patient, self.modality = patient, modality
        super().__init__(f"non-finite input for patient {patient} in modality {modality}")


class EncoderPair(Module):
    """Shared encoder (phi) and unique encoder (xi) for one modality."""

    def __init__(
        self,
        in_dim: int,
        d: int,
        rng: np.random.Generator,
        modality: int = 0,
        dropout: float = 0.1,
        normalize_shared: bool = True,
    ):
        hidden = 4 * d
        self.shared = FeedForward([in_dim, hidden, hidden, d], rng, dropout=dropout)
        self.unique = FeedForward([in_dim, hidden, hidden, d], rng, dropout=dropout)
        self.modality = modality
        self.in_dim, self.d = in_dim, d
        self.normalize_shared = normalize_shared


def encode(pair: EncoderPair, x, present) -> tuple[Tensor, Tensor]:
    """Encode one modality; rows with ``present`` False come out as exact zeros."""
    x_arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    present = np.asarray(present, dtype=bool)
    if present.shape != (x_arr.shape[0],):
        raise ShapeError("encode", x_arr.shape, present.shape)
    if x_arr.ndim != 2 or x_arr.shape[1] != pair.in_dim:
        raise ShapeError("encode", x_arr.shape, (x_arr.shape[0], pair.in_dim))
    finite = np.isfinite(x_arr).all(axis=1)
    if not finite.all():
        raise NonFiniteInputError(int(np.flatnonzero(~finite)[0]), pair.modality)
    x = x if isinstance(x, Tensor) else Tensor(x_arr)
    keep = present[:, None].astype(x.dtype)
    s = pair.shared(x)
    if pair.normalize_shared:
        s = l2_normalize_rows(s)
    u = pair.unique(x)
    return s * keep, u * keep


class Discriminator(Module):
    """Scores a (shared, unique) pair; trained to output high values on shuffled pairs."""

    def __init__(self, d: int, rng: np.random.Generator, dropout: float = 0.0):
        self.net = FeedForward([2 * d, 2 * d, 2 * d, 1], rng, dropout=dropout, out_sigmoid=True)
        self.d = d

    def __call__(self, s: Tensor, u: Tensor) -> Tensor:
        return discriminate(self, s, u)


def discriminate(D: Discriminator, s: Tensor, u: Tensor) -> Tensor:
    if s.ndim != 2 or u.ndim != 2 or s.shape[0] != u.shape[0] or s.shape[1] + u.shape[1] != 2 * D.d:
        raise ShapeError("discriminate", s.shape, u.shape)
    out = D.net(concat([s, u], axis=1))
    return reshape(out, (s.shape[0],))


class SurvivalHead(Module):
    """Maps a representation to conditional hazards for each of ``n_intervals``."""

    def __init__(self, d: int, n_intervals: int, rng: np.random.Generator):
        self.linear = Linear(d, n_intervals, rng)
        self.n_intervals = n_intervals

    def __call__(self, h: Tensor) -> Tensor:
        return sigmoid(self.linear(h))


class Decoder(Module):
    def __init__(self, d: int, out_dim: int, rng: np.random.Generator, dropout: float = 0.1):
        self.net = FeedForward([d, 4 * d, 4 * d, out_dim], rng, dropout=dropout)
        self.out_dim = out_dim

    def __call__(self, u: Tensor) -> Tensor:
        return self.net(u)


# -- checkpoints ------------------------------------------------------------------

CHECKPOINT_VERSION = 1
_META_KEY = "__meta__"


def save_checkpoint(path, state: dict[str, np.ndarray], metadata: dict) -> Path:
    """Write named arrays plus a JSON metadata record; the rename makes it atomic."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if _META_KEY in state:
        raise ValueError(f"parameter name {_META_KEY!r} is reserved")
    meta = dict(metadata, version=CHECKPOINT_VERSION)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **state, **{_META_KEY: np.array(json.dumps(meta, sort_keys=True))})
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(Path(path), allow_pickle=False) as archive:
        state = {k: archive[k] for k in archive.files if k != _META_KEY}
        meta = json.loads(str(archive[_META_KEY]))
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    return state, meta
