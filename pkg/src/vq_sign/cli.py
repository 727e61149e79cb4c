"""Command-line entry point: ``vq-sign {gen,train,eval,probe,ablation}``.

Settings come from built-in defaults, then an optional ``--config`` JSON
file, then command-line flags (``--set section.key=value`` or the
shortcuts each subcommand offers). Every output directory receives the
effective configuration as ``config.json``.

Exit codes: 0 success, 2 configuration error, 3 I/O or dataset error,
4 non-finite loss.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .corpus import DatasetParseError, DatasetVersionError, generate_corpus, load_dataset, write_dataset
from .evaluate import (CSV_COLUMNS, ProbeConfig, ProbeKind, append_csv_row, evaluate_model, extract_codes,
                       run_isr_protocol, run_pfr_protocol, support_eval_split)
from .model import VARIANT_ORDER, CapacityPlan, ConfigError, ModelConfig, PssConfig, Variant, build_model
from .train import NonFiniteLossError, TrainConfig, TrainState, load_checkpoint, save_checkpoint, train

log = logging.getLogger("vq_sign")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

CORPUS_DEFAULTS = {
    "n_signs": 600,
    "instances_per_sign": 10,
    "n_signers": 8,
    "splits": [0.8, 0.1, 0.1],
    "noise_scale": 0.01,
    "frame_range": [24, 48],
}


def _defaults(cls, drop=()) -> dict:
    return {k: v for k, v in asdict(cls()).items() if k not in drop}


def default_config() -> dict:
    probe = _defaults(ProbeConfig)
    probe["kind"] = ProbeKind(probe["kind"]).value
    return {
        "seed": 0,
        "variant": Variant.BASELINE.value,
        "corpus": dict(CORPUS_DEFAULTS),
        "model": _defaults(ModelConfig),
        "plan": None,
        "pss": {"p_force": 0.5},
        "train": _defaults(TrainConfig, drop=("seed",)),
        "probe": probe,
        "ablation": {"seeds": [0], "variants": [v.value for v in VARIANT_ORDER]},
    }


def _merge(base: dict, override: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_path(tree: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted!r}: {k!r} is not a section")
    node[keys[-1]] = value


def resolve_config(path: str | None, sets: list[str], shortcuts: dict) -> dict:
    """Defaults, then the config file, then ``--set`` pairs, then subcommand shortcuts."""
    cfg = default_config()
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc.msg})") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be an object")
        cfg = _merge(cfg, loaded)
    override: dict = {}
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        _set_path(override, key.strip(), _parse_value(value))
    for key, value in shortcuts.items():
        if value is not None:
            _set_path(override, key, value)
    cfg = _merge(cfg, override)
    validate_config(cfg)
    return cfg


def _build(kind, section: str, values: dict):
    try:
        return kind(**values)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"{section}: {exc}") from None


def validate_config(cfg: dict) -> None:
    try:
        Variant(cfg["variant"])
    except ValueError:
        raise ConfigError(f"variant: {cfg['variant']!r} is not one of "
                          f"{[v.value for v in Variant]}") from None
    corpus = cfg["corpus"]
    splits = corpus["splits"]
    if (not isinstance(splits, (list, tuple)) or len(splits) != 3
            or any(not isinstance(f, (int, float)) or f < 0 for f in splits)):
        raise ConfigError("corpus.splits: need three non-negative fractions")
    if abs(sum(splits) - 1.0) > 1e-9:
        raise ConfigError(f"corpus.splits: fractions sum to {sum(splits):g}, not 1")
    for key in ("n_signs", "instances_per_sign", "n_signers"):
        if not isinstance(corpus[key], int) or corpus[key] < 1:
            raise ConfigError(f"corpus.{key}: must be a positive integer")
    model_cfg(cfg)
    train_cfg(cfg)
    probe_cfg(cfg)
    plan_of(cfg)
    if not 0.0 <= float(cfg["pss"]["p_force"]) <= 1.0:
        raise ConfigError("pss.p_force: must lie in [0, 1]")
    for v in cfg["ablation"]["variants"]:
        if v not in {x.value for x in Variant}:
            raise ConfigError(f"ablation.variants: unknown variant {v!r}")


def model_cfg(cfg: dict) -> ModelConfig:
    return _build(ModelConfig, "model", cfg["model"])


def train_cfg(cfg: dict, seed: int | None = None) -> TrainConfig:
    return _build(TrainConfig, "train", {**cfg["train"], "seed": cfg["seed"] if seed is None else seed})


def probe_cfg(cfg: dict) -> ProbeConfig:
    return _build(ProbeConfig, "probe", cfg["probe"])


def plan_of(cfg: dict, variant: Variant | None = None) -> CapacityPlan | None:
    """The configured capacity plan, if it fits ``variant``'s stream layout; otherwise the variant default."""
    if cfg["plan"] is None:
        return None
    plan = cfg["plan"]
    if variant is not None and variant.multi_stream != ("ALL" not in plan.get("latent_counts", {})):
        return None
    try:
        return CapacityPlan.from_dict(plan)
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"plan: {exc}") from None


def config_hash(section: dict) -> str:
    return hashlib.sha256(json.dumps(section, sort_keys=True).encode()).hexdigest()


def write_effective(out_dir: Path, cfg: dict, command: str, extra: dict | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"tool_version": __version__, "command": command, "config": cfg,
           "train_config_sha256": config_hash(cfg["train"]), **(extra or {})}
    (out_dir / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _dataset(path):
    if path is None:
        raise ConfigError("--data is required")
    return load_dataset(path)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args, cfg: dict) -> int:
    c = cfg["corpus"]
    out = Path(args.out)
    records, split = generate_corpus(
        n_signs=c["n_signs"], instances_per_sign=c["instances_per_sign"], n_signers=c["n_signers"],
        splits=tuple(c["splits"]), noise_scale=c["noise_scale"], seed=cfg["seed"],
        frame_range=tuple(c["frame_range"]))
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(records, split, out)
    (out.parent / (out.name + ".config.json")).write_text(
        json.dumps({"tool_version": __version__, "command": "gen", "config": cfg}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    print(f"wrote {len(records)} records ({len(split.train)}/{len(split.validation)}/{len(split.test)} glosses) to {out}")
    return EXIT_OK


def _pss_for(cfg: dict, variant: Variant, schema) -> PssConfig | None:
    return PssConfig.from_schema(schema, cfg["pss"]["p_force"]) if variant.supervised else None


def train_run(cfg: dict, data_path, out_dir, resume=None, seed: int | None = None,
              variant: str | None = None) -> Path:
    """Train one variant into ``out_dir``; returns the checkpoint path."""
    out_dir = Path(out_dir)
    seed = cfg["seed"] if seed is None else seed
    ds = _dataset(data_path)
    tc = train_cfg(cfg, seed)
    if resume:
        model, meta, state = load_checkpoint(resume)
        if variant is not None and Variant(variant) != model.variant:
            raise ConfigError(f"variant: checkpoint holds {model.variant.value!r}, not {variant!r}")
    else:
        v = Variant(variant or cfg["variant"])
        model = build_model(v, plan_of(cfg, v), _pss_for(cfg, v, ds.schema), model_cfg(cfg), seed, ds.schema)
        state = TrainState()
    run_cfg = {**cfg, "seed": seed, "variant": model.variant.value}
    write_effective(out_dir, run_cfg, "train", {"resumed_from": str(resume) if resume else None})
    log_path = out_dir / "train_log.jsonl"
    with open(log_path, "a", encoding="utf-8") as fh:
        def sink(entry):
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
        model, _, state = train(model, ds.records, ds.split, tc, state=state, log=sink)
    ckpt = out_dir / "checkpoint.zip"
    save_checkpoint(ckpt, model, state, tc, {"seed": seed})
    return ckpt


def cmd_train(args, cfg: dict) -> int:
    ckpt = train_run(cfg, args.data, args.out, resume=args.resume, variant=args.variant)
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def eval_run(cfg: dict, ckpt, data_path, out_dir, csv_path=None, variant: str | None = None,
             probes: bool = True):
    out_dir = Path(out_dir)
    if not Path(ckpt).exists():
        raise FileNotFoundError(ckpt)
    model, meta, _ = load_checkpoint(ckpt)
    if variant is not None and Variant(variant) != model.variant:
        raise ConfigError(f"variant: checkpoint holds {model.variant.value!r}, not {variant!r}")
    ds = _dataset(data_path)
    seed = int(meta.get("seed", cfg["seed"]))
    counts = [ds.schema[n].classes for n in model.feature_names]
    report = evaluate_model(model, ds.records, ds.split, probe_cfg(cfg), seed, counts, probes=probes)
    write_effective(out_dir, {**cfg, "seed": seed, "variant": model.variant.value}, "eval",
                    {"checkpoint": str(ckpt)})
    (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
    append_csv_row(Path(csv_path) if csv_path else out_dir / "metrics.csv", report)
    return report


def cmd_eval(args, cfg: dict) -> int:
    report = eval_run(cfg, args.checkpoint, args.data, args.out, args.csv, args.variant, not args.no_probes)
    print(json.dumps(report.csv_row()))
    return EXIT_OK


def cmd_probe(args, cfg: dict) -> int:
    model, meta, _ = load_checkpoint(args.checkpoint)
    ds = _dataset(args.data)
    pc = probe_cfg(cfg)
    seed = int(meta.get("seed", cfg["seed"]))
    gloss_set = ds.split.train if args.vocab == "train" else ds.split.test
    recs = [r for r in ds.records if r.gloss_id in gloss_set]
    feats = extract_codes(model, recs)
    gloss = np.array([r.gloss_id for r in recs])
    if pc.kind is ProbeKind.ISR:
        mrr, r10 = run_isr_protocol(feats, gloss, pc, seed)
    else:
        names = model.feature_names
        labels = np.array([[r.labels[n] for n in names] for r in recs])
        support, held = support_eval_split(gloss, pc.support_fraction, seed)
        res = run_pfr_protocol(feats[support], labels[support], {"eval": (feats[held], labels[held])}, pc,
                               [ds.schema[n].classes for n in names], seed)
        mrr, r10 = res["eval"]
    out_dir = Path(args.out)
    write_effective(out_dir, cfg, "probe", {"checkpoint": str(args.checkpoint), "vocab": args.vocab})
    result = {"kind": pc.kind.value, "vocab": args.vocab, "mrr": mrr, "r10": r10, "seed": seed}
    (out_dir / f"probe_{pc.kind.value}_{args.vocab}.json").write_text(json.dumps(result, indent=2) + "\n")
    print(json.dumps(result))
    return EXIT_OK


def _ablation_job(job):
    cfg, data, out_dir, seed, variant, threads = job
    torch.set_num_threads(threads)
    try:
        ckpt = train_run(cfg, data, out_dir, seed=seed, variant=variant)
        report = eval_run(cfg, ckpt, data, out_dir)
        return variant, seed, report.csv_row(), None
    except Exception as exc:  # reported by the parent; sibling runs keep going
        return variant, seed, None, f"{type(exc).__name__}: {exc}"


def cmd_ablation(args, cfg: dict) -> int:
    out = Path(args.out)
    seeds = cfg["ablation"]["seeds"]
    variants = [Variant(v) for v in cfg["ablation"]["variants"]]
    threads = _thread_cap()
    jobs = [(cfg, args.data, out / f"seed{seed}" / v.value, seed, v.value, max(1, threads // max(1, args.jobs)))
            for seed in seeds for v in variants]
    write_effective(out, cfg, "ablation")
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_ablation_job, jobs))
    else:
        results = [_ablation_job(j) for j in jobs]
    rank = {v.value: i for i, v in enumerate(VARIANT_ORDER)}
    rows = sorted((r for r in results if r[2] is not None), key=lambda r: (rank[r[0]], r[1]))
    with open(out / "table.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for _, _, row, _ in rows:
            writer.writerow(row)
    failures = [r for r in results if r[3] is not None]
    for variant, seed, _, err in failures:
        print(f"{variant} seed {seed} failed: {err}", file=sys.stderr)
    print(f"table: {out / 'table.csv'} ({len(rows)} rows)")
    if failures:
        return EXIT_NUMERIC if any("NonFiniteLossError" in f[3] for f in failures) else EXIT_CONFIG
    return EXIT_OK


# ---------------------------------------------------------------------------


def _thread_cap() -> int:
    raw = os.environ.get("VQ_SIGN_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"VQ_SIGN_THREADS={raw!r} is not an integer") from None


def _splits(text: str):
    try:
        return [float(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated fractions") from None


def _seeds(text: str):
    return [int(x) for x in text.split(",")]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vq-sign", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of settings")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one setting, e.g. train.steps=500 (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output .slds file")
    p.add_argument("--signs", type=int)
    p.add_argument("--instances", type=int)
    p.add_argument("--signers", type=int)
    p.add_argument("--splits", type=_splits)
    p.add_argument("--noise", type=float)

    p = sub.add_parser("train", parents=[common], help="train one variant")
    p.add_argument("--data")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--variant", choices=[v.value for v in Variant])
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("eval", parents=[common], help="reconstruction and probe metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--csv", help="cross-run CSV to append to (default OUT/metrics.csv)")
    p.add_argument("--variant", choices=[v.value for v in Variant], help="fail if the checkpoint differs")
    p.add_argument("--no-probes", action="store_true")

    p = sub.add_parser("probe", parents=[common], help="train and score one frozen-code probe")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=[k.value for k in ProbeKind])
    p.add_argument("--vocab", choices=["train", "test"], default="test")

    p = sub.add_parser("ablation", parents=[common], help="train and evaluate all four variants")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=_seeds)
    p.add_argument("--steps", type=int)
    p.add_argument("--jobs", type=int, default=1)
    return parser


def _shortcuts(args) -> dict:
    pick = {
        "seed": "seed", "signs": "corpus.n_signs", "instances": "corpus.instances_per_sign",
        "signers": "corpus.n_signers", "splits": "corpus.splits", "noise": "corpus.noise_scale",
        "variant": "variant", "steps": "train.steps", "kind": "probe.kind", "seeds": "ablation.seeds",
    }
    return {key: getattr(args, attr) for attr, key in pick.items() if hasattr(args, attr)}


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "probe": cmd_probe, "ablation": cmd_ablation}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        torch.set_num_threads(_thread_cap())
        cfg = resolve_config(args.config, args.set, _shortcuts(args))
        return COMMANDS[args.command](args, cfg)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetParseError, DatasetVersionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
