"""Corpus tooling walkthrough: ingest a raw dump, normalize labels,
split deterministically, and round-trip the canonical record files.

Run from the repository root:  python demos/01_corpus_and_splits.py
"""

import csv
import tempfile
from pathlib import Path

from cbdetect import (
    Split,
    SplitSpec,
    Task,
    class_distribution,
    load_dataset,
    load_records,
    save_records,
    split_corpus,
    synth_fixture,
)

out = Path(tempfile.mkdtemp(prefix="cbdetect-demo-"))
print(f"working under {out}\n")

# --- 1. a raw cyberbullying dump, D6-shaped -------------------------------
# The D6 adapter maps the source repository's richer category list onto the
# four-way taxonomy; anything unmappable is rejected with a reason, never
# silently dropped or guessed.
raw = out / "d6_raw.csv"
with raw.open("w", newline="", encoding="utf-8") as handle:
    writer = csv.DictWriter(handle, fieldnames=["tweet_text", "cyberbullying_type"])
    writer.writeheader()
    writer.writerows(
        [
            {"tweet_text": "you people of that faith are vermin", "cyberbullying_type": "religion"},
            {"tweet_text": "go back where you came from", "cyberbullying_type": "ethnicity"},
            {"tweet_text": "girls cannot code, obviously", "cyberbullying_type": "gender"},
            {"tweet_text": "great weather today in the park", "cyberbullying_type": "not_cyberbullying"},
            {"tweet_text": "ok boomer", "cyberbullying_type": "age"},  # unmappable -> rejected
            {"tweet_text": "", "cyberbullying_type": "religion"},  # empty -> rejected
        ]
    )

result = load_dataset(raw, "D6")
print(f"D6 ingest: {len(result.accepted)} accepted, {len(result.rejects)} rejected")
for reject in result.rejects:
    print(f"  rejected row {reject.row_number}: {reject.reason}")

# --- 2. splits are policy objects ------------------------------------------
# The aggression sources use 80/10/10. The cyberbullying source holds out
# 25% and pins validation to an absolute 2,000 records, so test size falls
# out as the remainder. Partitions depend only on record ids and the seed.
corpus = synth_fixture(2500, Task.CYBERBULLYING, seed=6)  # 10,000 records
splits = split_corpus(corpus, SplitSpec(0.75, 2000, 0.25, seed=13))
print("\nD6-policy split of 10,000 synthetic records:")
for split in (Split.TRAIN, Split.VALIDATION, Split.TEST):
    print(f"  {split.value:<11} {len(splits[split]):>6}")

dist = class_distribution(splits[Split.TRAIN])
print("\ntraining-class distribution (balanced by construction):")
for label, count in dist.items():
    print(f"  {label.display_name:<17} {count}")

# --- 3. canonical record files round-trip exactly --------------------------
path = save_records(splits[Split.TEST], out / "d6_test.jsonl")
reloaded = load_records(path)
print(f"\nround-trip through {path.name}: identical = {reloaded == splits[Split.TEST]}")
