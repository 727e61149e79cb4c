"""Train one small model end to end, then probe its frozen codes.

    python3 notebooks/02_train_and_probe.py [variant] [steps]

Defaults to the full model for 300 steps on a 120-sign corpus, which takes a
about a minute on one CPU core. Numbers at this scale are only indicative.
"""
import sys

import torch

from vq_sign import (ModelConfig, ProbeConfig, TrainConfig, Variant, build_model, default_schema, evaluate_model,
                     generate_corpus, train)
from vq_sign.model import PssConfig

variant = Variant(sys.argv[1] if len(sys.argv) > 1 else "full")
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 300
torch.set_num_threads(1)

schema = default_schema()
records, split = generate_corpus(schema, n_signs=120, instances_per_sign=8, seed=0)

pss = PssConfig.from_schema(schema, p_force=0.5) if variant.supervised else None
model = build_model(variant, pss=pss, cfg=ModelConfig(model_dim=32, layers=1, dropout=0.1), seed=0, schema=schema)
cfg = TrainConfig(steps=steps, batch_size=32, learning_rate=1e-3, reinit_interval=max(1, steps // 5), seed=0)


def show(entry):
    if entry["step"] % 50 == 0:
        recon = sum(v for k, v in entry.items() if k.startswith("recon/"))
        ppl = [round(v, 1) for k, v in entry.items() if k.startswith("perplexity/")]
        print(f"step {entry['step']:>5}  loss {entry['loss']:.4f}  recon {recon:.4f}  batch perplexity {ppl}")


model, history, _ = train(model, records, split, cfg, log=show)

# %% Frozen-code evaluation.
counts = [schema[n].classes for n in schema.names]
report = evaluate_model(model, records, split, ProbeConfig(epochs=20), seed=0, class_counts=counts)
print(f"MSE train {report.mse_train:.5f}  test {report.mse_test:.5f}")
print("per-stream test MSE", {s: round(v, 5) for s, v in report.mse_streams.items()})
print(f"ISR  MRR seen {report.isr_iv[0]:.3f}  unseen {report.isr_oov[0]:.3f}")
print(f"PFR  MRR seen {report.pfr_iv[0]:.3f}  unseen {report.pfr_oov[0]:.3f}")
print("eval perplexity per codebook", {k: round(v, 1) for k, v in report.perplexity.items()})
