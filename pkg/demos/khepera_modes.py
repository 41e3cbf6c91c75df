"""A Khepera on a circle with a mode bank, under each anomaly in turn.

Steps 1-40 are nominal, 41-80 add a wheel-speed bias, 81-120 bias the IPS
and 121-160 bias the LiDAR. The MAP mode and the test decisions are printed
every 10 steps.
"""
import numpy as np

from nuise import KheperaParams, ModeBank, NoiseConfig, StateEstimate, make_mode_set
from nuise.robots import khepera_f, khepera_h_lidar

params = KheperaParams()
R = {"ips": 1e-6 * np.eye(3), "encoder": 1e-6 * np.eye(3), "lidar": np.diag([4e-6] * 4 + [1e-6])}
noise = NoiseConfig(Q=1e-7 * np.eye(3), R=R)
bank = ModeBank(make_mode_set("khepera", params, noise), StateEstimate([0.0, -0.1, 0.0], 1e-6 * np.eye(3)))

rng = np.random.default_rng(1)
x, u = np.array([0.0, -0.1, 0.0]), np.array([0.04, 0.06])
print(f"{'step':>4}  {'truth':<14} {'MAP mode':<14} actuator  ips    encoder lidar")
for k in range(1, 161):
    d_a = np.array([0.1, -0.1]) if 41 <= k <= 80 else np.zeros(2)
    x = khepera_f(x, u, d_a, params) + rng.multivariate_normal(np.zeros(3), noise.Q)
    z = {
        "ips": x + rng.multivariate_normal(np.zeros(3), R["ips"]),
        "encoder": x + rng.multivariate_normal(np.zeros(3), R["encoder"]),
        "lidar": khepera_h_lidar(x, params) + rng.multivariate_normal(np.zeros(5), R["lidar"]),
    }
    truth = "nominal"
    if 81 <= k <= 120:
        z["ips"] = z["ips"] + 0.01
        truth = "sensor:ips"
    elif 121 <= k <= 160:
        z["lidar"] = z["lidar"] + np.array([0.02] * 4 + [0.01])
        truth = "sensor:lidar"
    elif k >= 41:
        truth = "actuator"
    res = bank.step(u, z)
    if k % 10 == 0:
        flags = [res.actuator_decision.detected] + [res.sensor_decisions[s].detected for s in R]
        print(f"{k:>4}  {truth:<14} {res.map_mode:<14} " + "  ".join(f"{str(f):<6}" for f in flags))
