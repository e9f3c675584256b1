"""
Trading failure risk against uptime
===================================

"Replace an asset once its predicted chance of failing within the next
five steps reaches a threshold." Sweeping the threshold traces how much
operating time each extra unit of fleet failure rate buys.
"""

import numpy as np

from hmmprog import ComponentParams, TiedMixtureHmm, generate_fleet, tradeoff_curve

comps = (
    ComponentParams.gaussian([0.0, 0.0], 1.0),
    ComponentParams.gaussian([3.0, 0.0], 1.0),
    ComponentParams.gaussian([6.0, 3.0], 1.0),
)
model = TiedMixtureHmm(
    np.array([1.0, 0.0, 0.0, 0.0]),
    np.array([[0.9, 0.09, 0, 0.01], [0, 0.9, 0.09, 0.01], [0, 0, 0.9, 0.1], [0, 0, 0, 1.0]]),
    np.array([[0.8, 0.15, 0.05], [0.1, 0.8, 0.1], [0.05, 0.15, 0.8], [1 / 3, 1 / 3, 1 / 3]]),
    comps,
)

thresholds = np.round(np.arange(1, 51) / 100, 2)
fleet = generate_fleet(model, nassets=300, maxlen=200, rng=0).sequences
curve = tradeoff_curve(model, fleet, thresholds, lookahead=5)

print("threshold  failure rate  mean uptime")
for th, fr, up in curve.rows()[::5]:
    print(f"{th:9.2f}  {fr:12.3f}  {up:11.1f}")

theta, uptime = curve.operating_point(0.125)
print(f"\na 12.5% fleet failure rate needs threshold ~{theta:.3f} and gives {uptime:.1f} steps of uptime")
for lo, hi in ((0.10, 0.15), (0.40, 0.45)):
    gain = (curve.uptime_at_risk(hi) - curve.uptime_at_risk(lo)) / (hi - lo)
    print(f"uptime gained per unit risk between {lo:.0%} and {hi:.0%}: {gain:.1f}")
