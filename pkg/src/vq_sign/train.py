"""Training loop and checkpoint archives."""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch

from .corpus import SignRecord, SplitSpec
from .model import CapacityPlan, ModelConfig, PssConfig, SignVQ, Variant, build_model, collate
from .vq import GumbelSchedule, dead_code_threshold, perplexity, reinit_dead_codes

__all__ = [
    "TrainConfig",
    "NonFiniteLossError",
    "TrainState",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_VERSION = 1


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, term: str, value: float):
        super().__init__(f"step {step}: loss term {term!r} is {value}")
        self.step, self.term, self.value = step, term, value


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20000
    batch_size: int = 64
    learning_rate: float = 8.61e-5
    beta: float = 3e-6
    gamma: float = 3.0
    gumbel: bool = True
    gumbel_fraction: float = 0.5
    tau_start: float = 1.0
    tau_end: float = 0.1
    tau_decay_steps: float | None = None
    reinit: bool = True
    reinit_interval: int = 1000
    reinit_fraction: float = 0.01
    reinit_sample_size: int = 8
    p_force: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.reinit and 0 < self.steps < self.reinit_interval:
            raise ValueError(f"steps={self.steps} shorter than the dead-code interval {self.reinit_interval}")
        for name in ("learning_rate", "tau_start", "tau_end", "reinit_interval"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.beta < 0 or self.gamma < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 <= self.gumbel_fraction <= 1.0 or not 0.0 <= self.p_force <= 1.0:
            raise ValueError("gumbel_fraction and p_force must lie in [0, 1]")

    def schedule(self) -> GumbelSchedule:
        gumbel_steps = max(1.0, self.gumbel_fraction * self.steps)
        ratio = self.tau_start / self.tau_end
        decay = self.tau_decay_steps or (gumbel_steps / math.log(ratio) if ratio > 1 else gumbel_steps)
        return GumbelSchedule(self.tau_start, self.tau_end, decay)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    step: int = 0
    optimizer: dict | None = None


def _check_finite(step: int, terms: dict) -> None:
    for name, value in terms.items():
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(v):
            raise NonFiniteLossError(step, name, v)


def train(model: SignVQ, records: list[SignRecord], split: SplitSpec, cfg: TrainConfig,
          state: TrainState | None = None, log=None, progress=None) -> tuple[SignVQ, list[dict], TrainState]:
    """Run ``cfg.steps`` Adam steps on the training vocabulary.

    Batches are drawn from per-epoch shuffles of the training records. Every
    ``reinit_interval`` steps the usage window closes and its perplexity is
    logged; with ``reinit`` on, codes used less than the dead-code threshold
    in that window are first moved onto the current batch's encoder outputs. With ``gumbel`` on, the first ``gumbel_fraction``
    of steps sample codes at an annealed temperature.

    ``log`` may be a callable receiving each step's record. Resuming from
    ``state`` continues step numbering and optimizer moments.
    """
    state = TrainState() if state is None else state
    history: list[dict] = []
    if cfg.steps == 0:
        return model, history, state
    train_records = [r for r in records if r.gloss_id in split.train]
    if not train_records:
        raise ValueError("no training records in the corpus")

    prepared = [model.prepare(r) for r in train_records]
    labels = np.array([[r.labels[n] for n in model.feature_names] for r in train_records])
    gloss = np.array([r.gloss_id for r in train_records])

    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    if state.optimizer is not None:
        optimizer.load_state_dict(state.optimizer)
    schedule = cfg.schedule()
    gumbel_steps = int(cfg.gumbel_fraction * cfg.steps) if cfg.gumbel else 0
    first = state.step
    gen = torch.Generator().manual_seed(cfg.seed * 7919 + first)
    window = {name: 0 for name in model.codebooks}
    if first == 0:
        for book in model.codebooks.values():
            book.usage_counts.zero_()

    order: list[int] = []
    model.train()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed * 1_000_003 + first)
        for k in range(cfg.steps):
            step = first + k
            if len(order) < cfg.batch_size:
                order.extend(torch.randperm(len(prepared), generator=gen).tolist())
            idx, order = order[:cfg.batch_size], order[cfg.batch_size:]
            batch = collate([prepared[i] for i in idx], labels[idx], gloss[idx])
            tau = schedule.temperature(k) if k < gumbel_steps else None
            out = model(batch, train=True, temperature=tau, generator=gen, p_force=cfg.p_force,
                        beta=cfg.beta, gamma=cfg.gamma)
            _check_finite(step, {"total": out.total_loss, **out.breakdown})
            optimizer.zero_grad(set_to_none=True)
            out.total_loss.backward()
            optimizer.step()

            entry = {"step": step, "loss": out.total_loss.item(),
                     **{k2: v.item() for k2, v in out.breakdown.items()},
                     **{f"perplexity/{n}": o.perplexity for n, o in out.outcomes.items()}}
            if tau is not None:
                entry["temperature"] = tau
            for name, o in out.outcomes.items():
                window[name] += o.indices.numel()
            if (k + 1) % cfg.reinit_interval == 0:
                # windows close on the same schedule with or without reinit, so usage stays comparable
                for name, book in model.codebooks.items():
                    entry[f"window_perplexity/{name}"] = perplexity(book.usage_counts) if window[name] else 1.0
                    if cfg.reinit:
                        threshold = dead_code_threshold(window[name], book.size, cfg.reinit_fraction)
                        sample = out.outcomes[name].z_e.detach()
                        entry[f"reinit/{name}"] = reinit_dead_codes(book, sample, threshold, gen,
                                                                    cfg.reinit_sample_size)
                    book.usage_counts.zero_()
                    window[name] = 0
            history.append(entry)
            if log is not None:
                log(entry)
            if progress is not None:
                progress(step)
    model.eval()
    state = TrainState(first + cfg.steps, optimizer.state_dict())
    return model, history, state


# ---------------------------------------------------------------------------
# checkpoints

_EPOCH = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(array), allow_pickle=False)
    return buf.getvalue()


def _write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(path, model: SignVQ, state: TrainState | None = None, train_cfg: TrainConfig | None = None,
                    extra: dict | None = None) -> None:
    """Write a zip archive of ``.npy`` tensors plus a ``meta.json`` manifest.

    Entry order and timestamps are fixed, so identical models produce
    identical bytes.
    """
    state = TrainState() if state is None else state
    meta = {
        "checkpoint_version": CHECKPOINT_VERSION,
        **model.describe(),
        "train": None if train_cfg is None else train_cfg.to_dict(),
        "step": state.step,
        "reserved": {n: {f: list(r) for f, r in sorted(b.reserved.items())} for n, b in model.codebooks.items()},
        **(extra or {}),
    }
    with zipfile.ZipFile(path, "w") as zf:
        _write(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        for name, tensor in sorted(model.state_dict().items()):
            _write(zf, f"weights/{name}.npy", _npy_bytes(tensor.detach().cpu().numpy()))
        if state.optimizer is not None:
            opt = state.optimizer
            groups = [{k: v for k, v in g.items() if k != "params"} | {"params": list(g["params"])}
                      for g in opt["param_groups"]]
            _write(zf, "optimizer/param_groups.json", json.dumps(groups, sort_keys=True).encode())
            for pid in sorted(opt["state"]):
                for key, value in sorted(opt["state"][pid].items()):
                    arr = value.detach().cpu().numpy() if torch.is_tensor(value) else np.asarray(value)
                    _write(zf, f"optimizer/state/{pid}/{key}.npy", _npy_bytes(arr))


def read_checkpoint_meta(path) -> dict:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("meta.json"))


def load_checkpoint(path) -> tuple[SignVQ, dict, TrainState]:
    """Rebuild the model recorded in ``path``; returns ``(model, meta, state)``."""
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint_version {meta.get('checkpoint_version')!r}")
        cfg = ModelConfig(**meta["model"])
        plan = CapacityPlan.from_dict(meta["plan"])
        pss = None if meta["pss"] is None else PssConfig.from_dict(meta["pss"])
        model = build_model(Variant(meta["variant"]), plan, pss, cfg)
        model.feature_names = list(meta["feature_names"])
        weights = {}
        for name in zf.namelist():
            if name.startswith("weights/"):
                arr = np.lib.format.read_array(io.BytesIO(zf.read(name)))
                weights[name[len("weights/"):-len(".npy")]] = torch.from_numpy(arr)
        model.load_state_dict(weights)
        optimizer = None
        if "optimizer/param_groups.json" in zf.namelist():
            groups = json.loads(zf.read("optimizer/param_groups.json"))
            opt_state: dict = {}
            for name in zf.namelist():
                if name.startswith("optimizer/state/"):
                    _, _, pid, key = name.split("/", 3)
                    arr = np.lib.format.read_array(io.BytesIO(zf.read(name)))
                    opt_state.setdefault(int(pid), {})[key[:-len(".npy")]] = torch.from_numpy(arr)
            optimizer = {"state": opt_state, "param_groups": groups}
    model.eval()
    return model, meta, TrainState(meta.get("step", 0), optimizer)
