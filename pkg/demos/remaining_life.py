"""Whole-life prediction on synthetic run-to-failure data.

Train a lognormal time-to-failure model on 100 systems and predict 100 others
at three thresholds.  A lower threshold alarms earlier but with noisier slope
estimates, so predictions get worse.
"""

import numpy as np

from slopecpd import DetectorConfig, solve_threshold
from slopecpd.prognostics import evaluate_cohort, synthetic_cohort

N = 21
beta = np.zeros(N + 1)
beta[0] = 7.0
beta[1:8] = np.linspace(-9.0, -4.0, 7)
train = synthetic_cohort(100, beta, 0.2, seed=1)
test = synthetic_cohort(100, beta, 0.2, seed=2)
print(f"life: median {np.median(test.failure):.0f}, range {test.failure.min()}-{test.failure.max()}")

for arl in (100, 500, 5000):
    b = solve_threshold(arl, N, 0.3, 200)
    out = evaluate_cohort(train, test, DetectorConfig(b=b, p0=0.3, w=200))
    err = out["relative_error"]
    print(f"ARL {arl:>5} (b={b:5.2f}): median error {np.median(err):.3f}, "
          f"90th pct {np.percentile(err, 90):.3f}, unresolved {out['unresolved_test']}")
