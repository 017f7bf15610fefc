"""Measure inter-annotator agreement and aggregate ratings per configuration.

Run from the repository root:

    python3 demos/05_agreement.py

Two annotators rate the same samples on five criteria: readability (1 best
to 3 worst) and strict/relaxed completeness and correctness (1 yes, 0 no).
Krippendorff's alpha corrects raw agreement for chance; the degenerate flag
marks criteria where every rating is identical, so chance correction is
undefined and alpha is reported as 1.0 by convention.
"""

import random

from ragkit.agreement import (
    AnnotationRecord,
    aggregate_manual,
    compute_agreement,
    format_agreement,
    krippendorff_alpha,
    percent_agreement,
)

rng = random.Random(11)
samples = [f"s{i:02d}" for i in range(20)]
sample_configs = {s: ("model-a|base|25" if i % 2 == 0 else "model-a|rag:enc|25")
                  for i, s in enumerate(samples)}


def rate(annotator: str, flip_chance: float) -> list[AnnotationRecord]:
    """A careful annotator, then a noisier one who flips some ratings."""
    out = []
    for i, sample in enumerate(samples):
        base = {
            "readability": 1 if i % 3 else 2,
            "completeness_strict": i % 2,
            "completeness_relaxed": 1,
            "correctness_strict": i % 4 // 2,
            "correctness_relaxed": 1 if i % 5 else 0,
        }
        if rng.random() < flip_chance:
            base["completeness_strict"] ^= 1
        if rng.random() < flip_chance:
            base["correctness_strict"] ^= 1
        out.append(AnnotationRecord(sample_id=sample, annotator_id=annotator, **base))
    return out


records = rate("alice", 0.0) + rate("bob", 0.25)

alpha = krippendorff_alpha(records, "completeness_strict")
percent = percent_agreement(records, "completeness_strict")
print(f"completeness_strict: alpha={alpha.alpha:.3f} "
      f"(degenerate={alpha.degenerate}), percent={percent:.2f}\n")

for report in compute_agreement(records):
    print(f"  {report.criterion:<22} alpha={report.alpha:+.3f} "
          f"percent={report.percent:.2f} n={report.n_samples}")

# Majority vote per sample, then means per configuration: readability stays
# on its 1-3 scale, binary criteria become the percentage rated 1.
result = aggregate_manual(records, sample_configs)
print(f"\nmanual means over {result.n_samples} samples "
      f"({len(result.ties)} tie(s) resolved to the worst value):")
for config_id, means in result.means.items():
    cells = ", ".join(f"{k}={v:g}" for k, v in means.items())
    print(f"  {config_id}: {cells}")

text, _csv = format_agreement({"all": records})
print("\n" + text)
