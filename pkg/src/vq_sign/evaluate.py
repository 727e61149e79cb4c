"""Reconstruction fidelity, frozen-code probes and ranking metrics."""

from __future__ import annotations

import csv
import enum
import logging
from pathlib import Path
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .corpus import SignRecord, SplitSpec
from .model import ConfigError, SignVQ
from .pose import STREAMS
from .vq import perplexity

__all__ = [
    "ReconstructionReport",
    "eval_reconstruction",
    "extract_codes",
    "code_perplexities",
    "ProbeKind",
    "ProbeConfig",
    "Probe",
    "train_probe",
    "score_ranking",
    "ranks_of_true",
    "support_eval_split",
    "run_isr_protocol",
    "run_oov_isr_protocol",
    "run_pfr_protocol",
    "MetricsReport",
    "evaluate_model",
    "CSV_COLUMNS",
    "append_csv_row",
]

log = logging.getLogger(__name__)


def _batches(records, size):
    for i in range(0, len(records), size):
        yield records[i:i + size]


@dataclass
class ReconstructionReport:
    overall: float
    per_stream: dict
    sums: dict
    counts: dict


@torch.no_grad()
def eval_reconstruction(model: SignVQ, records: list[SignRecord], batch_size: int = 64) -> ReconstructionReport:
    """Eval-mode MSE per stream (in each stream's normalized frame) and overall.

    Overall MSE is total squared error over total element count, so it is
    the element-weighted mean of the per-stream values.
    """
    if not records:
        raise ValueError("need at least one record")
    model.eval()
    sums = {s: 0.0 for s in model.streams}
    counts = {s: 0 for s in model.streams}
    for chunk in _batches(records, batch_size):
        out = model(model.batch(chunk, with_labels=False), train=False)
        for s in model.streams:
            sums[s] += float(out.sq_error[s])
            counts[s] += int(out.element_count[s])
    per_stream = {s: sums[s] / counts[s] for s in model.streams}
    overall = sum(sums.values()) / sum(counts.values())
    return ReconstructionReport(overall, per_stream if model.plan.multi_stream else {}, sums, counts)


@torch.no_grad()
def code_indices(model: SignVQ, records: list[SignRecord], batch_size: int = 128) -> dict:
    """Eval-mode hard indices per stream, each ``N x n_s``."""
    model.eval()
    parts = {s: [] for s in model.streams}
    for chunk in _batches(records, batch_size):
        for s, idx in model.code_indices(model.batch(chunk, with_labels=False)).items():
            parts[s].append(idx)
    return {s: torch.cat(p) if p else torch.zeros(0, model.plan.latent_counts[s], dtype=torch.long)
            for s, p in parts.items()}


def codes_from_indices(model: SignVQ, indices: dict) -> np.ndarray:
    rows = [model.book_for(s).weight.detach()[indices[s]].flatten(1) for s in model.streams]
    return torch.cat(rows, dim=1).numpy()


def perplexities_from_indices(model: SignVQ, indices: dict) -> dict:
    hist = {name: torch.zeros(book.size, dtype=torch.long) for name, book in model.codebooks.items()}
    for s, idx in indices.items():
        name = model.plan.sharing[s]
        hist[name] += torch.bincount(idx.reshape(-1), minlength=hist[name].numel())
    return {name: perplexity(h) for name, h in hist.items()}


def extract_codes(model: SignVQ, records: list[SignRecord], batch_size: int = 128) -> np.ndarray:
    """Flattened eval-mode quantized latents, one ``N_p * L_c`` row per record."""
    return codes_from_indices(model, code_indices(model, records, batch_size))


def code_perplexities(model: SignVQ, records: list[SignRecord], batch_size: int = 128) -> dict:
    """Per-codebook perplexity of eval-mode hard code usage over ``records``."""
    return perplexities_from_indices(model, code_indices(model, records, batch_size))


# ---------------------------------------------------------------------------
# probes


class ProbeKind(str, enum.Enum):
    ISR = "isr"
    PFR = "pfr"


@dataclass(frozen=True)
class ProbeConfig:
    kind: ProbeKind = ProbeKind.ISR
    hidden: int = 256
    layers: int = 2
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    support_fraction: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "kind", ProbeKind(self.kind))
        if not 0.0 < self.support_fraction < 1.0:
            raise ValueError("support_fraction must lie in (0, 1)")
        if self.layers < 1 or self.hidden < 1 or self.epochs < 0:
            raise ValueError("invalid probe size")


class Probe(nn.Module):
    """MLP trunk with one softmax head per target column."""

    def __init__(self, in_features: int, class_counts: list[int], hidden: int = 256, layers: int = 2):
        super().__init__()
        trunk: list[nn.Module] = []
        width = in_features
        for _ in range(layers - 1):
            trunk += [nn.Linear(width, hidden), nn.ReLU()]
            width = hidden
        self.trunk = nn.Sequential(*trunk)
        self.heads = nn.ModuleList(nn.Linear(width, c) for c in class_counts)
        self.register_buffer("mean", torch.zeros(in_features))
        self.register_buffer("scale", torch.ones(in_features))

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        h = self.trunk((x - self.mean) / self.scale)
        return [head(h) for head in self.heads]

    @torch.no_grad()
    def scores(self, features) -> list[np.ndarray]:
        self.eval()
        x = torch.as_tensor(np.asarray(features), dtype=torch.float32)
        return [s.numpy() for s in self(x)]


def train_probe(features, targets, cfg: ProbeConfig, seed: int = 0, class_counts: list[int] | None = None) -> Probe:
    """Fit a probe with summed cross-entropy over its heads.

    ``targets`` is ``N`` (one head) or ``N x H`` (``H`` heads). Classes are
    indexed ``0..C-1`` per head; ``class_counts`` defaults to ``max + 1``.
    """
    X = torch.as_tensor(np.asarray(features), dtype=torch.float32)
    Y = torch.as_tensor(np.asarray(targets), dtype=torch.long)
    if Y.ndim == 1:
        Y = Y[:, None]
    if class_counts is None:
        class_counts = [int(Y[:, h].max()) + 1 for h in range(Y.shape[1])]
    for h, c in enumerate(class_counts):
        present = torch.bincount(Y[:, h], minlength=c)
        if c < 2:
            raise ConfigError(f"head {h}: need at least 2 classes")
        if (present == 0).any():
            missing = torch.nonzero(present == 0).flatten().tolist()
            raise ConfigError(f"head {h}: classes {missing[:5]} have no training examples")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        probe = Probe(X.shape[1], class_counts, cfg.hidden, cfg.layers)
        probe.mean.copy_(X.mean(0))
        probe.scale.copy_(X.std(0, unbiased=False).clamp_min(1e-6))
        opt = torch.optim.Adam(probe.parameters(), lr=cfg.learning_rate)
        gen = torch.Generator().manual_seed(seed)
        loss_fn = nn.CrossEntropyLoss()
        probe.train()
        for _ in range(cfg.epochs):
            perm = torch.randperm(X.shape[0], generator=gen)
            for i in range(0, X.shape[0], cfg.batch_size):
                idx = perm[i:i + cfg.batch_size]
                logits = probe(X[idx])
                loss = sum(loss_fn(lg, Y[idx, h]) for h, lg in enumerate(logits))
                opt.zero_grad()
                loss.backward()
                opt.step()
    probe.eval()
    return probe


def ranks_of_true(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """1-based rank of each true class under descending scores, ties going to the lower class index."""
    scores = np.asarray(scores)
    targets = np.asarray(targets)
    true = scores[np.arange(len(targets)), targets][:, None]
    cls = np.arange(scores.shape[1])[None, :]
    ahead = (scores > true) | ((scores == true) & (cls < targets[:, None]))
    return 1 + ahead.sum(1)


def score_ranking(classifier, features, targets, k: int = 10) -> tuple[float, float]:
    """Mean reciprocal rank and Recall@k (percent).

    ``classifier`` is a :class:`Probe` or a precomputed score matrix (or a
    list of them, one per head). Multi-head results are the unweighted mean
    over heads.
    """
    if isinstance(classifier, Probe):
        score_list = classifier.scores(features)
    elif isinstance(classifier, (list, tuple)):
        score_list = [np.asarray(s) for s in classifier]
    else:
        score_list = [np.asarray(classifier)]
    T = np.asarray(targets)
    if T.ndim == 1:
        T = T[:, None]
    if T.shape[1] != len(score_list):
        raise ValueError(f"{len(score_list)} heads but targets have {T.shape[1]} columns")
    mrr, rec = [], []
    for h, s in enumerate(score_list):
        r = ranks_of_true(s, T[:, h])
        mrr.append(float(np.mean(1.0 / r)))
        rec.append(float(100.0 * np.mean(r <= k)))
    return float(np.mean(mrr)), float(np.mean(rec))


def support_eval_split(gloss_ids, fraction: float = 0.5, seed: int = 0):
    """Per-gloss split of instance positions into probe-support and probe-eval.

    Glosses with a single instance are dropped with a warning.
    """
    gloss_ids = np.asarray(gloss_ids)
    rng = np.random.default_rng(seed)
    support, evaluation = [], []
    for g in np.unique(gloss_ids):
        members = np.flatnonzero(gloss_ids == g)
        if len(members) < 2:
            log.warning("gloss %d has a single instance; excluded from the probe protocol", g)
            continue
        members = rng.permutation(members)
        n_sup = min(max(1, int(round(fraction * len(members)))), len(members) - 1)
        support.extend(members[:n_sup].tolist())
        evaluation.extend(members[n_sup:].tolist())
    return np.array(sorted(support), dtype=int), np.array(sorted(evaluation), dtype=int)


def _relabel(gloss_ids):
    uniq, inv = np.unique(np.asarray(gloss_ids), return_inverse=True)
    return inv, len(uniq)


def run_isr_protocol(features, gloss_ids, cfg: ProbeConfig, seed: int = 0, leak: bool = False) -> tuple[float, float]:
    """Train a gloss classifier on per-gloss support instances and rank the held-out ones.

    ``leak=True`` scores on the support set itself; it exists only to
    sanity-check that the honest split is harder.
    """
    features = np.asarray(features)
    support, evaluation = support_eval_split(gloss_ids, cfg.support_fraction, seed)
    if len(np.unique(np.asarray(gloss_ids)[support])) < 2:
        raise ConfigError("the recognition protocol needs at least two glosses with two or more instances")
    y, n = _relabel(gloss_ids)
    probe = train_probe(features[support], y[support], cfg, seed, [n])
    held = support if leak else evaluation
    return score_ranking(probe, features[held], y[held])


def run_oov_isr_protocol(model: SignVQ, test_records: list[SignRecord], cfg: ProbeConfig, seed: int = 0,
                         leak: bool = False) -> tuple[float, float]:
    """Recognition probe over glosses the autoencoder never trained on."""
    features = extract_codes(model, test_records)
    return run_isr_protocol(features, [r.gloss_id for r in test_records], cfg, seed, leak)


def run_pfr_protocol(train_features, train_labels, eval_sets: dict, cfg: ProbeConfig, class_counts, seed: int = 0):
    """One multi-head feature probe trained once, scored on every named evaluation set."""
    probe = train_probe(train_features, train_labels, cfg, seed, list(class_counts))
    return {name: score_ranking(probe, X, Y) for name, (X, Y) in eval_sets.items()}


# ---------------------------------------------------------------------------
# reports

CSV_COLUMNS = (
    "variant", "seed", "mse_train", "mse_test",
    "mse_rh", "mse_lh", "mse_nmm", "mse_body", "mse_movr", "mse_movl",
    "isr_mrr_iv", "isr_r10_iv", "isr_mrr_oov", "isr_r10_oov",
    "pfr_mrr_iv", "pfr_r10_iv", "pfr_mrr_oov", "pfr_r10_oov",
    "perplexity_mean",
)


@dataclass
class MetricsReport:
    variant: str
    seed: int
    mse_train: float
    mse_test: float
    mse_streams: dict = field(default_factory=dict)
    isr_iv: tuple = (float("nan"), float("nan"))
    isr_oov: tuple = (float("nan"), float("nan"))
    pfr_iv: tuple = (float("nan"), float("nan"))
    pfr_oov: tuple = (float("nan"), float("nan"))
    perplexity: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    @property
    def perplexity_mean(self) -> float:
        return float(np.mean(list(self.perplexity.values()))) if self.perplexity else float("nan")

    def csv_row(self) -> dict:
        row = {"variant": self.variant, "seed": self.seed,
               "mse_train": self.mse_train, "mse_test": self.mse_test}
        for s in STREAMS:
            v = self.mse_streams.get(s.value)
            row[f"mse_{s.value.lower()}"] = "" if v is None else v
        row.update({
            "isr_mrr_iv": self.isr_iv[0], "isr_r10_iv": self.isr_iv[1],
            "isr_mrr_oov": self.isr_oov[0], "isr_r10_oov": self.isr_oov[1],
            "pfr_mrr_iv": self.pfr_iv[0], "pfr_r10_iv": self.pfr_iv[1],
            "pfr_mrr_oov": self.pfr_oov[0], "pfr_r10_oov": self.pfr_oov[1],
            "perplexity_mean": self.perplexity_mean,
        })
        return {k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["perplexity_mean"] = self.perplexity_mean
        return d


def append_csv_row(path, report: MetricsReport) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        if new:
            writer.writeheader()
        writer.writerow(report.csv_row())


def evaluate_model(model: SignVQ, records: list[SignRecord], split: SplitSpec, probe_cfg: ProbeConfig | None = None,
                   seed: int = 0, class_counts: list[int] | None = None, probes: bool = True) -> MetricsReport:
    """Everything one ablation row needs: MSEs, both probes on both vocabularies, perplexities.

    Recognition probes are trained on per-gloss support instances and scored
    on the held-out instances of the same vocabulary. The feature probe is
    trained on the training vocabulary's support instances and scored on the
    held-out training instances and on every test-vocabulary instance.
    """
    probe_cfg = ProbeConfig() if probe_cfg is None else probe_cfg
    train_recs = [r for r in records if r.gloss_id in split.train]
    test_recs = [r for r in records if r.gloss_id in split.test]
    rec_train = eval_reconstruction(model, train_recs)
    rec_test = eval_reconstruction(model, test_recs)
    idx_train = code_indices(model, train_recs)
    report = MetricsReport(
        variant=model.variant.value, seed=seed,
        mse_train=rec_train.overall, mse_test=rec_test.overall,
        mse_streams={s.value: v for s, v in rec_test.per_stream.items()},
        perplexity=perplexities_from_indices(model, idx_train),
        notes=["recognition probes: per-gloss support/eval split of each vocabulary's instances"],
    )
    if not probes:
        return report
    names = model.feature_names
    if class_counts is None:
        all_labels = np.array([[r.labels[n] for n in names] for r in records])
        class_counts = (all_labels.max(0) + 1).tolist()
    F_train = codes_from_indices(model, idx_train)
    F_test = extract_codes(model, test_recs)
    g_train = np.array([r.gloss_id for r in train_recs])
    g_test = np.array([r.gloss_id for r in test_recs])
    isr_cfg = ProbeConfig(**{**asdict(probe_cfg), "kind": ProbeKind.ISR})
    report.isr_iv = run_isr_protocol(F_train, g_train, isr_cfg, seed)
    report.isr_oov = run_isr_protocol(F_test, g_test, isr_cfg, seed)

    L_train = np.array([[r.labels[n] for n in names] for r in train_recs])
    L_test = np.array([[r.labels[n] for n in names] for r in test_recs])
    support, held = support_eval_split(g_train, probe_cfg.support_fraction, seed)
    pfr_cfg = ProbeConfig(**{**asdict(probe_cfg), "kind": ProbeKind.PFR})
    res = run_pfr_protocol(F_train[support], L_train[support],
                           {"iv": (F_train[held], L_train[held]), "oov": (F_test, L_test)},
                           pfr_cfg, class_counts, seed)
    report.pfr_iv, report.pfr_oov = res["iv"], res["oov"]
    return report
