"""Analytic thresholds for a few sensor counts and false-alarm budgets.

Prints the threshold, the tilting parameter and the approximate ARL it
implies, plus the conservative closed-form threshold for comparison.
"""

from slopecpd.calibration import CalibrationInput, calibrate, conservative_threshold

P0, W = 0.3, 200

print(f"{'N':>5} {'ARL':>7} {'b':>8} {'theta':>7} {'check':>9} {'conservative':>13}")
for n in (50, 100, 200):
    for arl in (5000, 10000):
        res = calibrate(CalibrationInput(n_sensors=n, p0=P0, w=W, arl=arl))
        print(f"{n:>5} {arl:>7} {res.threshold:8.2f} {res.theta:7.3f} {res.arl:9.0f} "
              f"{conservative_threshold(arl, n, W):13.2f}")
