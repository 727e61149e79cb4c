"""The four ablation variants: single-stream baseline, disentangled streams, and
phonological semi-supervision on either.

Multi-stream models run one encoder/decoder pair per articulator stream and
quantize against four codebooks; the two hands share one book and the two
wrist trajectories share another. Semi-supervised models reserve a block of
codes per labelled feature and, during training, occasionally force the
feature's designated latent slot onto the code of the sign's class.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .corpus import PhonoFeatureSchema, SignRecord, default_schema
from .pose import STREAMS, StreamId, flatten_stream, partition_pose
from .seq import EncoderConfig, SequenceDecoder, SequenceEncoder, masked_squared_error
from .vq import Codebook, QuantizeOutcome, quantize_gumbel, quantize_hard, straight_through, with_forced

__all__ = [
    "Variant",
    "ConfigError",
    "CapacityPlan",
    "PssConfig",
    "FeatureSlot",
    "ModelConfig",
    "Batch",
    "ForwardOutcome",
    "SignVQ",
    "assign_feature_slots",
    "build_model",
    "pss_force",
    "prepare_record",
    "collate",
    "count_parameters",
]

ALL = StreamId.ALL


class ConfigError(ValueError):
    pass


class Variant(str, enum.Enum):
    BASELINE = "baseline"
    PD = "pd"
    PSS = "pss"
    FULL = "full"

    @property
    def multi_stream(self) -> bool:
        return self in (Variant.PD, Variant.FULL)

    @property
    def supervised(self) -> bool:
        return self in (Variant.PSS, Variant.FULL)


#: Canonical table order.
VARIANT_ORDER = (Variant.BASELINE, Variant.PD, Variant.PSS, Variant.FULL)


@dataclass(frozen=True)
class CapacityPlan:
    """Latent slots per stream, codebook sizes, and which book each stream quantizes against."""

    latent_counts: dict
    book_sizes: dict
    sharing: dict

    def __post_init__(self):
        lc = {StreamId(k): int(v) for k, v in self.latent_counts.items()}
        sh = {StreamId(k): str(v) for k, v in self.sharing.items()}
        object.__setattr__(self, "latent_counts", lc)
        object.__setattr__(self, "sharing", sh)
        object.__setattr__(self, "book_sizes", {str(k): int(v) for k, v in self.book_sizes.items()})
        if set(lc) != set(sh):
            raise ConfigError("every stream needs both a latent count and a codebook")
        if any(v < 1 for v in lc.values()) or any(v < 1 for v in self.book_sizes.values()):
            raise ConfigError("latent counts and codebook sizes must be >= 1")
        if set(sh.values()) != set(self.book_sizes):
            raise ConfigError("sharing map and book sizes name different codebooks")

    @property
    def multi_stream(self) -> bool:
        return ALL not in self.latent_counts

    @property
    def streams(self) -> tuple[StreamId, ...]:
        return (ALL,) if not self.multi_stream else tuple(s for s in STREAMS if s in self.latent_counts)

    @property
    def total_latents(self) -> int:
        return sum(self.latent_counts.values())

    @property
    def total_codes(self) -> int:
        return sum(self.book_sizes.values())

    @classmethod
    def single(cls, latent_count: int = 30, codebook_size: int = 200) -> "CapacityPlan":
        return cls({ALL: latent_count}, {"all": codebook_size}, {ALL: "all"})

    @classmethod
    def disentangled(cls) -> "CapacityPlan":
        return cls(
            latent_counts={StreamId.RH: 7, StreamId.LH: 7, StreamId.NMM: 3,
                           StreamId.BODY: 3, StreamId.MOVR: 5, StreamId.MOVL: 5},
            book_sizes={"hand": 80, "move": 40, "nmm": 40, "body": 40},
            sharing={StreamId.RH: "hand", StreamId.LH: "hand", StreamId.NMM: "nmm",
                     StreamId.BODY: "body", StreamId.MOVR: "move", StreamId.MOVL: "move"},
        )

    def to_dict(self) -> dict:
        return {
            "latent_counts": {k.value: v for k, v in self.latent_counts.items()},
            "book_sizes": dict(self.book_sizes),
            "sharing": {k.value: v for k, v in self.sharing.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CapacityPlan":
        return cls(d["latent_counts"], d["book_sizes"], d["sharing"])


@dataclass(frozen=True)
class PssConfig:
    """Labelled features to supervise (name, class count, streams) and the forcing probability."""

    features: tuple
    p_force: float = 0.5

    def __post_init__(self):
        feats = tuple((str(n), int(c), tuple(StreamId(s) for s in st)) for n, c, st in self.features)
        object.__setattr__(self, "features", feats)
        if not 0.0 <= self.p_force <= 1.0:
            raise ConfigError(f"p_force={self.p_force} outside [0, 1]")

    @classmethod
    def from_schema(cls, schema: PhonoFeatureSchema | None = None, p_force: float = 0.5) -> "PssConfig":
        schema = default_schema() if schema is None else schema
        return cls(tuple((f.name, f.classes, f.streams) for f in schema.features), p_force)

    def to_dict(self) -> dict:
        return {"features": [[n, c, [s.value for s in st]] for n, c, st in self.features],
                "p_force": self.p_force}

    @classmethod
    def from_dict(cls, d: dict) -> "PssConfig":
        return cls(tuple(tuple(f) for f in d["features"]), d["p_force"])


@dataclass(frozen=True)
class FeatureSlot:
    stream: StreamId
    slot: int
    book: str
    start: int
    stop: int


def assign_feature_slots(plan: CapacityPlan, pss: PssConfig | None) -> dict[str, list[FeatureSlot]]:
    """Deterministic feature -> (stream, latent slot, reserved code range) map.

    Features are taken in name order. Within each codebook, reserved ranges
    are packed upward from index 0. Within each stream, the k-th hosted
    feature gets latent slot ``k mod latent_count``. Single-stream plans host
    every feature on the one stream.
    """
    if pss is None or not pss.features:
        return {}
    features = sorted(pss.features, key=lambda f: f[0])
    cursor = {name: 0 for name in plan.book_sizes}
    ranges: dict[tuple[str, str], tuple[int, int]] = {}
    hosted: dict[StreamId, int] = {s: 0 for s in plan.streams}
    out: dict[str, list[FeatureSlot]] = {}
    for name, classes, streams in features:
        targets = [ALL] if not plan.multi_stream else [s for s in STREAMS if s in streams]
        missing = [s for s in targets if s not in plan.latent_counts]
        if missing:
            raise ConfigError(f"feature {name!r} maps to streams {missing} absent from the plan")
        slots = []
        for s in targets:
            book = plan.sharing[s]
            if (name, book) not in ranges:
                start = cursor[book]
                if start + classes > plan.book_sizes[book]:
                    from .corpus import CapacityError
                    raise CapacityError(
                        f"codebook {book!r} (size {plan.book_sizes[book]}) has no room for {name!r}")
                ranges[(name, book)] = (start, start + classes)
                cursor[book] = start + classes
            start, stop = ranges[(name, book)]
            slots.append(FeatureSlot(s, hosted[s] % plan.latent_counts[s], book, start, stop))
            hosted[s] += 1
        out[name] = slots
    return out


@dataclass(frozen=True)
class ModelConfig:
    model_dim: int = 256
    layers: int = 5
    heads: int = 4
    latent_dim: int = 32
    latent_count: int = 30
    codebook_size: int = 200
    dropout: float = 0.2
    max_frames: int = 64
    sample_count: int = 16
    ff_mult: int = 4
    stream_model_dim: int | None = None
    diversity_tau: float = 1.0
    mirror_left: bool = True
    zero_init_head: bool = False

    def encoder_config(self, latent_count: int, model_dim: int | None = None) -> EncoderConfig:
        return EncoderConfig(model_dim or self.model_dim, self.layers, self.heads, self.latent_dim,
                             latent_count, self.dropout, self.max_frames, self.ff_mult)


def stream_features(stream: StreamId, layout_joints: int = 75) -> int:
    return {StreamId.RH: 63, StreamId.LH: 63, StreamId.NMM: 60, StreamId.BODY: 39,
            StreamId.MOVR: 3, StreamId.MOVL: 3, ALL: 3 * layout_joints}[stream]


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def _stack_params(cfg: ModelConfig, plan: CapacityPlan, width: int) -> int:
    total = 0
    for s in plan.streams:
        ec = cfg.encoder_config(plan.latent_counts[s], width)
        total += count_parameters(SequenceEncoder(stream_features(s), ec))
        total += count_parameters(SequenceDecoder(stream_features(s), ec))
    return total + plan.total_codes * cfg.latent_dim


def matched_stream_width(cfg: ModelConfig, plan: CapacityPlan) -> int:
    """Per-stream model width whose total parameter count best matches the baseline."""
    target = _stack_params(cfg, CapacityPlan.single(cfg.latent_count, cfg.codebook_size), cfg.model_dim)
    guess = cfg.model_dim / math.sqrt(len(plan.streams))
    candidates = {max(cfg.heads, cfg.heads * round(guess / cfg.heads) + k * cfg.heads) for k in range(-2, 3)}
    return min(sorted(candidates), key=lambda w: abs(_stack_params(cfg, plan, w) - target))


# ---------------------------------------------------------------------------
# batches


def prepare_record(record: SignRecord, multi_stream: bool, sample_count: int = 16,
                   mirror_left: bool = True) -> dict[StreamId, np.ndarray]:
    """Frame-major float32 matrices per stream, ready for batching."""
    if not multi_stream:
        return {ALL: flatten_stream(record.pose.frames).astype(np.float32)}
    bundle = partition_pose(record.pose, sample_count=sample_count)
    out = {}
    for s in STREAMS:
        sub = bundle[s]
        if mirror_left and s in (StreamId.LH, StreamId.MOVL):
            sub = sub * np.array([-1.0, 1.0, 1.0])
        out[s] = flatten_stream(sub).astype(np.float32)
    return out


@dataclass
class Batch:
    """Padded per-stream inputs. ``labels`` is ``B x n_features`` in schema order, or None."""

    x: dict
    lengths: dict
    labels: torch.Tensor | None = None
    gloss: torch.Tensor | None = None

    @property
    def size(self) -> int:
        return next(iter(self.lengths.values())).shape[0]


def collate(items: list[dict], labels=None, gloss=None, dtype=torch.float32) -> Batch:
    x, lengths = {}, {}
    for s in items[0]:
        mats = [it[s] for it in items]
        T = max(m.shape[0] for m in mats)
        buf = np.zeros((len(mats), T, mats[0].shape[1]), dtype=np.float64)
        for i, m in enumerate(mats):
            buf[i, :m.shape[0]] = m
        x[s] = torch.as_tensor(buf, dtype=dtype)
        lengths[s] = torch.tensor([m.shape[0] for m in mats], dtype=torch.long)
    lab = None if labels is None else torch.as_tensor(np.asarray(labels), dtype=torch.long)
    gl = None if gloss is None else torch.as_tensor(np.asarray(gloss), dtype=torch.long)
    return Batch(x, lengths, lab, gl)


# ---------------------------------------------------------------------------
# model


@dataclass
class ForwardOutcome:
    reconstructions: dict
    outcomes: dict
    total_loss: torch.Tensor
    breakdown: dict
    sq_error: dict = field(default_factory=dict)
    element_count: dict = field(default_factory=dict)
    z_e: dict = field(default_factory=dict)


def pss_force(outcome: QuantizeOutcome, book: Codebook, targets: torch.Tensor, p_force: float,
              generator: torch.Generator | None = None) -> QuantizeOutcome:
    """Force designated rows onto their label codes with probability ``p_force``.

    ``targets`` holds, per row, the code index the row's label maps to, or -1
    for rows with no designated feature. Forced rows take the code vector,
    and the codebook and commitment losses are recomputed against the final
    selection.
    """
    if targets.shape != outcome.indices.shape:
        raise ValueError("targets must give one entry per quantized row")
    designated = targets >= 0
    if (targets >= book.size).any():
        raise ConfigError("label-mapped code index outside the codebook")
    if p_force <= 0 or not designated.any():
        return outcome
    draw = torch.rand(targets.shape, generator=generator, dtype=torch.float64)
    mask = designated & (draw < p_force)
    return with_forced(outcome, book, targets.clamp_min(0), mask)


class SignVQ(nn.Module):
    """Vector-quantized autoencoder over one or six pose streams."""

    def __init__(self, variant: Variant, plan: CapacityPlan, pss: PssConfig | None, cfg: ModelConfig,
                 schema_names: list[str] | None = None):
        super().__init__()
        self.variant = Variant(variant)
        self.plan = plan
        self.pss = pss
        self.cfg = cfg
        self.feature_names = list(schema_names) if schema_names is not None else default_schema().names
        width = cfg.model_dim
        if plan.multi_stream:
            width = cfg.stream_model_dim or matched_stream_width(cfg, plan)
        self.stream_width = width

        self.encoders = nn.ModuleDict()
        self.decoders = nn.ModuleDict()
        for s in plan.streams:
            ec = cfg.encoder_config(plan.latent_counts[s], width)
            self.encoders[s.value] = SequenceEncoder(stream_features(s), ec)
            self.decoders[s.value] = SequenceDecoder(stream_features(s), ec, cfg.zero_init_head)
        self.codebooks = nn.ModuleDict()
        for name in sorted(plan.book_sizes):
            users = tuple(s for s in plan.streams if plan.sharing[s] == name)
            self.codebooks[name] = Codebook(plan.book_sizes[name], cfg.latent_dim, users)

        self.slots = assign_feature_slots(plan, pss)
        for feature, slots in self.slots.items():
            for fs in slots:
                self.codebooks[fs.book].reserve(feature, fs.start, fs.stop)

    # -- helpers ---------------------------------------------------------

    def book_for(self, stream: StreamId) -> Codebook:
        return self.codebooks[self.plan.sharing[StreamId(stream)]]

    @property
    def streams(self) -> tuple[StreamId, ...]:
        return self.plan.streams

    @property
    def bottleneck(self) -> int:
        return self.plan.total_latents * self.cfg.latent_dim

    def prepare(self, record: SignRecord) -> dict:
        return prepare_record(record, self.plan.multi_stream, self.cfg.sample_count, self.cfg.mirror_left)

    def batch(self, records: list[SignRecord], with_labels: bool = True, dtype=torch.float32) -> Batch:
        labels = [[r.labels[n] for n in self.feature_names] for r in records] if with_labels else None
        return collate([self.prepare(r) for r in records], labels, [r.gloss_id for r in records], dtype)

    def encode(self, batch: Batch) -> dict:
        return {s: self.encoders[s.value](batch.x[s], batch.lengths[s]) for s in self.streams}

    def _targets(self, book_name: str, labels: torch.Tensor, B: int) -> torch.Tensor:
        """Per-row label-mapped code index for one book's concatenated rows (-1 if none)."""
        parts = []
        for s in self.streams:
            if self.plan.sharing[s] != book_name:
                continue
            t = torch.full((B, self.plan.latent_counts[s]), -1, dtype=torch.long)
            for i, feature in enumerate(self.feature_names):
                for fs in self.slots.get(feature, ()):
                    if fs.stream == s:
                        t[:, fs.slot] = fs.start + labels[:, i]
            parts.append(t.reshape(-1))
        return torch.cat(parts)

    # -- forward ---------------------------------------------------------

    def forward(self, batch: Batch, train: bool = False, temperature: float | None = None,
                generator: torch.Generator | None = None, p_force: float | None = None,
                beta: float = 3e-6, gamma: float = 3.0) -> ForwardOutcome:
        """Encode, quantize per codebook, decode per stream and sum the losses.

        Outside ``train`` mode codes are never forced, never sampled, and
        usage counts are left alone.
        """
        supervised = train and self.variant.supervised and self.slots
        p = (self.pss.p_force if self.pss is not None else 0.0) if p_force is None else p_force
        if supervised and p > 0 and batch.labels is None:
            raise ValueError("semi-supervised training needs phonological labels")
        B = batch.size
        z_e = self.encode(batch)

        outcomes, rows = {}, {}
        for name, book in self.codebooks.items():
            users = [s for s in self.streams if self.plan.sharing[s] == name]
            flat = torch.cat([z_e[s].reshape(-1, self.cfg.latent_dim) for s in users])
            if train and temperature is not None:
                out = quantize_gumbel(flat, book, temperature, generator, update_usage=False,
                                      diversity_tau=self.cfg.diversity_tau)
            else:
                out = quantize_hard(flat, book, update_usage=False, diversity_tau=self.cfg.diversity_tau)
            if supervised and p > 0:
                out = pss_force(out, book, self._targets(name, batch.labels, B), p, generator)
            if train:
                book.record_usage(out.indices)
            outcomes[name] = out
            offset = 0
            for s in users:
                n = B * self.plan.latent_counts[s]
                rows[s] = (name, offset, offset + n)
                offset += n

        recon, sq, count, terms = {}, {}, {}, {}
        for s in self.streams:
            name, a, b = rows[s]
            zq = outcomes[name].z_q[a:b].reshape(z_e[s].shape)
            dec_in = straight_through(z_e[s], zq)
            x = batch.x[s]
            x_hat = self.decoders[s.value](dec_in, x.shape[1], batch.lengths[s])
            recon[s] = x_hat
            err, n = masked_squared_error(x, x_hat, batch.lengths[s])
            sq[s], count[s] = err, n
            terms[f"recon/{s.value}"] = err / n

        for name, out in outcomes.items():
            terms[f"codebook/{name}"] = out.loss_codebook
            terms[f"commit/{name}"] = beta * out.loss_commit
            terms[f"diversity/{name}"] = gamma * out.loss_diversity
        total = sum(terms.values())
        return ForwardOutcome(recon, outcomes, total, terms, sq, count, z_e)

    @torch.no_grad()
    def codes(self, batch: Batch) -> torch.Tensor:
        """Eval-mode quantized latents, flattened to ``B x (N_p * L_c)`` in stream order."""
        z_e = self.encode(batch)
        parts = []
        for s in self.streams:
            flat = z_e[s].reshape(-1, self.cfg.latent_dim)
            out = quantize_hard(flat, self.book_for(s), update_usage=False)
            parts.append(out.z_q.reshape(batch.size, -1))
        return torch.cat(parts, dim=1)

    @torch.no_grad()
    def code_indices(self, batch: Batch) -> dict:
        z_e = self.encode(batch)
        return {s: quantize_hard(z_e[s].reshape(-1, self.cfg.latent_dim), self.book_for(s),
                                 update_usage=False).indices.reshape(batch.size, -1) for s in self.streams}

    def describe(self) -> dict:
        return {
            "variant": self.variant.value,
            "plan": self.plan.to_dict(),
            "pss": None if self.pss is None else self.pss.to_dict(),
            "model": asdict(self.cfg),
            "feature_names": self.feature_names,
        }


def build_model(variant: Variant | str, plan: CapacityPlan | None = None, pss: PssConfig | None = None,
                cfg: ModelConfig | None = None, seed: int = 0, schema: PhonoFeatureSchema | None = None) -> SignVQ:
    """Construct a variant with deterministic initial weights.

    ``plan`` and ``pss`` default to the variant's standard choices; passing
    ones that contradict the variant is a configuration error.
    """
    variant = Variant(variant)
    cfg = ModelConfig() if cfg is None else cfg
    schema = default_schema() if schema is None else schema
    if plan is None:
        plan = CapacityPlan.disentangled() if variant.multi_stream else CapacityPlan.single(
            cfg.latent_count, cfg.codebook_size)
    if pss is None and variant.supervised:
        pss = PssConfig.from_schema(schema)
    if variant.supervised != (pss is not None):
        raise ConfigError(f"{variant.value}: semi-supervision config must be given iff the variant is supervised")
    if variant.multi_stream != plan.multi_stream:
        raise ConfigError(f"{variant.value}: capacity plan must be {'multi' if variant.multi_stream else 'single'}-stream")
    if plan.total_latents != cfg.latent_count:
        raise ConfigError(f"plan has {plan.total_latents} latents, config expects {cfg.latent_count}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return SignVQ(variant, plan, pss, cfg, schema.names)
