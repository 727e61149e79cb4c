"""A look at the synthetic sign corpus.

Generates a small vocabulary, prints how the phonological labels are spread,
splits one pose into its articulator streams and writes the result to disk.

    python3 notebooks/01_corpus_tour.py [out_dir]
"""
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from vq_sign import StreamId, default_schema, generate_corpus, load_dataset, partition_pose, write_dataset

out_dir = Path(sys.argv[1] if len(sys.argv) > 1 else "tour_out")
out_dir.mkdir(parents=True, exist_ok=True)

schema = default_schema()
records, split = generate_corpus(schema, n_signs=60, instances_per_sign=5, seed=0)
print(f"{len(records)} records, vocabularies train/val/test = "
      f"{len(split.train)}/{len(split.validation)}/{len(split.test)}")

# %% Feature coverage: every value of every feature should appear in the training vocabulary.
train_recs = [r for r in records if r.gloss_id in split.train]
for name in schema.names:
    seen = Counter(r.labels[name] for r in train_recs)
    print(f"{name:<28} {len(seen):>3}/{schema[name].classes} values seen, most common {seen.most_common(1)[0]}")

# %% One pose, split into streams.
pose = records[0].pose
streams = partition_pose(pose)
for sid in streams:
    print(f"{sid.value:<5} {streams[sid].shape}")
print("right-hand wrist after normalization:", streams[StreamId.RH][0, 0])

# Instances of the same sign differ by signer and noise only.
same = [r for r in records if r.gloss_id == records[0].gloss_id]
lengths = [r.pose.frames.shape[0] for r in same]
print("instance lengths of gloss", records[0].gloss_id, lengths)

# %% Round trip through the on-disk format.
path = out_dir / "tour.slds"
write_dataset(records, split, path, schema)
ds = load_dataset(path)
assert len(ds.records) == len(records)
assert np.array_equal(ds.records[3].pose.frames, records[3].pose.frames)
print("wrote and re-read", path)
