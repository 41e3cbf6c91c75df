"""One filter step on a scalar system small enough to check by hand.

x' = x + u + d,  z2 = x',  Q = R2 = 0.25, prior x = 0 with variance 1,
u = 1 and a reading of 1.5.
"""
import numpy as np

from nuise import GainVariant, ModeModel, StateEstimate, nuise_step

model = ModeModel(
    mode_id="scalar",
    f=lambda x, u, d: x + u + d,
    h1=lambda x: np.zeros(0),
    h2=lambda x: x,
    Q=[[0.25]],
    R1=np.zeros((0, 0)),
    R2=[[0.25]],
    d_a_dim=1,
)
prev = StateEstimate([0.0], [[1.0]])

for variant in GainVariant:
    out = nuise_step(model, prev, [1.0], [], [1.5], variant)
    print(f"{variant.value}:")
    print(f"  actuator anomaly {out.d_a[0]:.3f} (variance {out.P_a[0, 0]:.3f})")
    print(f"  predicted state  {out.predicted.x[0]:.3f} (variance {out.predicted.P[0, 0]:.3f})")
    print(f"  innovation       {out.innovation[0]:.3f} (variance {out.innovation_cov[0, 0]:.3f})")
    print(f"  likelihood       {out.likelihood:.3f}")
    print(f"  gain L           {out.L[0, 0]:.3f}")
    print(f"  posterior        {out.state.x[0]:.3f} (variance {out.state.P[0, 0]:.3f})")

# The reading was used up estimating the anomaly, so the true posterior error
# variance is that of the prediction, 0.25. Monte Carlo confirms it.
rng = np.random.default_rng(0)
x = rng.normal(0, 1, 100_000) + 1 + 0.3 + rng.normal(0, 0.5, 100_000)
z = x + rng.normal(0, 0.5, x.size)
print(f"empirical posterior error variance: {np.var(z - x):.3f}")
