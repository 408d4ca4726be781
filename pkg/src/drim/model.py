"""Full models: per-modality encoders, fusion and survival heads."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .autograd import Tensor
from .encoders import Decoder, Discriminator, EncoderPair, SurvivalHead, encode
from .fusion import BaselineFusion, MAFusionBlock, fuse_shared, fuse_unique
from .nn import FeedForward, Module


@dataclass
class ModelConfig:
    feature_dims: list[int] = field(default_factory=lambda: [32, 32, 32])
    d: int = 16
    n_intervals: int = 20
    heads: int = 4
    head_dim: int = 16
    dropout: float = 0.1
    fusion: str = "mafusion"  # or one of the baseline kinds
    normalize_shared: bool = True
    slot_embeddings: bool = True
    attend_to_cls: bool = False
    aux_unique_heads: bool = True
    decoders: bool = False
    tensor_budget: int = 100_000_000

    @property
    def n_modalities(self) -> int:
        return len(self.feature_dims)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        known = {k: raw[k] for k in cls.__dataclass_fields__ if k in raw}
        return cls(**known)


def _as_tensors(features) -> list[Tensor]:
    return [x if isinstance(x, Tensor) else Tensor(np.asarray(x)) for x in features]


class DRIMModel(Module):
    """Shared/unique encoders per modality, two-scale attention fusion, hazard head.

    Parameters are named ``mod{m}.shared.*``, ``mod{m}.unique.*``,
    ``disc{m}.*``, ``dec{m}.*``, ``aux{m}.*``, ``fusion_shared.*``,
    ``fusion_unique.*`` and ``head.*``.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        if config.fusion != "mafusion":
            raise ValueError("DRIMModel fuses with mafusion; use BaselineModel for other kinds")
        c = config
        M, d = c.n_modalities, c.d
        self.config = c
        self.encoders = [
            EncoderPair(dm, d, rng, modality=m, dropout=c.dropout, normalize_shared=c.normalize_shared)
            for m, dm in enumerate(c.feature_dims)
        ]
        self.discriminators = [Discriminator(d, rng) for _ in range(M)]
        self.decoders = [Decoder(d, dm, rng, dropout=c.dropout) for dm in c.feature_dims] if c.decoders else []
        self.build_task_stack(rng)

    def build_task_stack(self, rng: np.random.Generator) -> None:
        """(Re)initialise fusion blocks and heads, leaving encoders untouched."""
        c = self.config
        M, d = c.n_modalities, c.d
        kw = dict(heads=c.heads, head_dim=c.head_dim, slot_embeddings=c.slot_embeddings,
                  attend_to_cls=c.attend_to_cls)
        self.fusion_shared = MAFusionBlock(d, M, rng, **kw)
        self.fusion_unique = MAFusionBlock(d, M + 1, rng, **kw)
        self.head = SurvivalHead(d, c.n_intervals, rng)
        self.aux_heads = [SurvivalHead(d, c.n_intervals, rng) for _ in range(M)] if c.aux_unique_heads else []
        self.assign_names()

    def named_parameters(self, prefix: str = ""):
        for m, enc in enumerate(self.encoders):
            yield from enc.named_parameters(f"{prefix}mod{m}.")
        for m, D in enumerate(self.discriminators):
            yield from D.named_parameters(f"{prefix}disc{m}.")
        for m, R in enumerate(self.decoders):
            yield from R.named_parameters(f"{prefix}dec{m}.")
        yield from self.fusion_shared.named_parameters(f"{prefix}fusion_shared.")
        yield from self.fusion_unique.named_parameters(f"{prefix}fusion_unique.")
        yield from self.head.named_parameters(f"{prefix}head.")
        for m, h in enumerate(self.aux_heads):
            yield from h.named_parameters(f"{prefix}aux{m}.")

    def modules(self):
        yield self
        for group in (self.encoders, self.discriminators, self.decoders, self.aux_heads):
            for mod in group:
                yield from mod.modules()
        for mod in (self.fusion_shared, self.fusion_unique, self.head):
            yield from mod.modules()

    # groups used by the optimisers
    def encoder_parameters(self):
        return [p for enc in self.encoders for p in enc.parameters()]

    def discriminator_parameters(self):
        return [p for D in self.discriminators for p in D.parameters()]

    def decoder_parameters(self):
        return [p for R in self.decoders for p in R.parameters()]

    def task_parameters(self):
        mods = [self.fusion_shared, self.fusion_unique, self.head, *self.aux_heads]
        return [p for mod in mods for p in mod.parameters()]

    def encode(self, features, present) -> tuple[list[Tensor], list[Tensor]]:
        present = np.asarray(present, dtype=bool)
        pairs = [encode(enc, x, present[m]) for m, (enc, x) in enumerate(zip(self.encoders, _as_tensors(features)))]
        return [p[0] for p in pairs], [p[1] for p in pairs]

    def fuse(self, shared, unique, present) -> Tensor:
        s = fuse_shared(self.fusion_shared, shared, present)
        return fuse_unique(self.fusion_unique, unique, s, present)

    def hazards(self, features, present) -> Tensor:
        shared, unique = self.encode(features, present)
        return self.head(self.fuse(shared, unique, present))

    def predict(self, features, present) -> np.ndarray:
        was = self.training
        self.eval()
        try:
            return self.hazards(features, present).data
        finally:
            self.train(was)

    def parameter_report(self) -> dict[str, int]:
        report = {
            "encoders": sum(p.data.size for p in self.encoder_parameters()),
            "discriminators": sum(p.data.size for p in self.discriminator_parameters()),
            "decoders": sum(p.data.size for p in self.decoder_parameters()),
            "fusion_shared": self.fusion_shared.num_parameters(),
            "fusion_unique": self.fusion_unique.num_parameters(),
            "head": self.head.num_parameters(),
            "aux_heads": sum(h.num_parameters() for h in self.aux_heads),
        }
        report["total"] = sum(report.values())
        return {k: int(v) for k, v in report.items()}


class BaselineModel(Module):
    """One encoder per modality, a baseline fusion operator and a hazard head."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        c = config
        self.config = c
        self.encoders = [FeedForward([dm, 4 * c.d, 4 * c.d, c.d], rng, dropout=c.dropout) for dm in c.feature_dims]
        self.fusion = BaselineFusion(c.fusion, c.n_modalities, c.d, rng, tensor_budget=c.tensor_budget)
        self.head = SurvivalHead(self.fusion.out_dim, c.n_intervals, rng)
        self.assign_names()

    def named_parameters(self, prefix: str = ""):
        for m, enc in enumerate(self.encoders):
            yield from enc.named_parameters(f"{prefix}mod{m}.encoder.")
        yield from self.fusion.named_parameters(f"{prefix}fusion.")
        yield from self.head.named_parameters(f"{prefix}head.")

    def modules(self):
        yield self
        for enc in self.encoders:
            yield from enc.modules()
        yield from self.fusion.modules()
        yield from self.head.modules()

    def hazards(self, features, present) -> Tensor:
        present = np.asarray(present, dtype=bool)
        reps = []
        for m, (enc, x) in enumerate(zip(self.encoders, _as_tensors(features))):
            reps.append(enc(x) * present[m][:, None].astype(x.dtype))
        return self.head(self.fusion(reps, present))

    def predict(self, features, present) -> np.ndarray:
        was = self.training
        self.eval()
        try:
            return self.hazards(features, present).data
        finally:
            self.train(was)

    def parameter_report(self) -> dict[str, int]:
        report = {
            "encoders": sum(e.num_parameters() for e in self.encoders),
            "fusion": self.fusion.num_parameters(),
            "head": self.head.num_parameters(),
        }
        report["total"] = sum(report.values())
        return {k: int(v) for k, v in report.items()}


def build_model(config: ModelConfig, rng: np.random.Generator) -> Module:
    return DRIMModel(config, rng) if config.fusion == "mafusion" else BaselineModel(config, rng)
