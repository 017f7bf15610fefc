"""Load a term/paraphrase dataset, profile it, and split it by term.

Run from the repository root:

    python3 demos/01_dataset_and_split.py
"""

import tempfile
from pathlib import Path

from _support import write_demo_dataset

from ragkit.corpus import load_dataset, paraphrase_length_stats, split_by_term

with tempfile.TemporaryDirectory() as workdir:
    dataset_path = write_demo_dataset(Path(workdir) / "dataset.tsv")

    # One record per term; a record carries every paraphrase of that term.
    records = load_dataset(dataset_path)
    print(f"dataset: {len(records)} terms, "
          f"{sum(len(r.references) for r in records)} term/paraphrase pairs")

    stats = paraphrase_length_stats(records)
    print(f"paraphrase length (words): min={stats.min} max={stats.max} "
          f"mean={stats.mean:.2f} std={stats.std:.2f}")

    # The split keys on terms, so no term leaks across sets; the greedy fill
    # tracks pair counts, so ratios are met in pairs, not in terms.
    train, validation, test = split_by_term(records, (0.6, 0.2, 0.2), seed=13)
    for name, bucket in (("train", train), ("validation", validation), ("test", test)):
        pairs = sum(len(r.references) for r in bucket)
        print(f"{name:>10}: {len(bucket):2d} terms, {pairs:2d} pairs")

    print("\nsample records:")
    for record in test[:3]:
        print(f"  {record.term}: {record.references[0]!r}"
              + (f" (+{len(record.references) - 1} more)" if len(record.references) > 1 else ""))
