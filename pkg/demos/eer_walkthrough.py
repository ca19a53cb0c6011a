"""Equal error rate on six trials, by hand and with ``compute_eer``.

A trial is accepted when its score reaches the threshold.  Sweeping the
threshold upward trades false acceptances for false rejections; the EER is
where the two rates meet, interpolated linearly between operating points.
"""
import numpy as np

from distilsrl.metrics import compute_eer, error_rates

scores = np.array([0.9, 0.8, 0.65, 0.6, 0.3, 0.2])
same = np.array([True, True, False, True, False, False])

far, frr = error_rates(scores, same)
thresholds = list(np.unique(scores)) + [np.inf]
print("threshold   FAR    FRR")
for theta, a, r in zip(thresholds, far, frr):
    print(f"{theta:>9}  {a:5.3f}  {r:5.3f}")

print(f"\nEER = {compute_eer(scores, same):.3f}%")
print("A monotone map of the scores leaves it unchanged:", f"{compute_eer(np.exp(5 * scores), same):.3f}%")
