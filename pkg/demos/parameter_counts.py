"""Where the parameters of the BASE-size teacher and its two-layer student live.

The student keeps the teacher's convolutional front-end and positional
convolution, drops ten of twelve transformer blocks, and adds one linear
prediction head per distilled teacher layer.
"""
from collections import Counter

from distilsrl.config import PRESETS, parse_config
from distilsrl.model import parameter_shapes
from distilsrl.pipeline import reference_parameter_counts

cfg = parse_config(PRESETS["base-reference"])
teacher = cfg.model_config(cfg["teacher.layers"])

groups: Counter = Counter()
for name, shape in parameter_shapes(teacher).items():
    n = 1
    for s in shape:
        n *= s
    groups["transformer block" if name.startswith("layers.") else name.split(".")[0]] += n

print("teacher encoder by component")
for name, n in groups.most_common():
    print(f"  {name:<20} {n:>12,}")

print("\nmodel totals (task heads included)")
for key, value in reference_parameter_counts().items():
    print(f"  {key:<20} {value:>12,}" if isinstance(value, int) else f"  {key:<20} {value:>12.4f}")
