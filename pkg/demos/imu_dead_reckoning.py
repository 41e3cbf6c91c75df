"""Dead reckoning from IMU samples: a body accelerating along its own x axis
while yawed 90 degrees moves along the global y axis."""
import numpy as np

from nuise.robots import ImuSample, Pose2D, imu_dead_reckon, quaternion_to_matrix

yaw = np.pi / 2
q = [np.cos(yaw / 2), 0.0, 0.0, np.sin(yaw / 2)]
print("rotation matrix:\n", np.round(quaternion_to_matrix(q), 12))

pose, vel = Pose2D(0.0, 0.0, yaw), np.zeros(3)
sample = ImuSample(q, a_local=[1.0, 0.0, 0.0], w_local=[0.0, 0.0, 0.1])
for k in range(1, 6):
    pose, vel = imu_dead_reckon(pose, vel, sample, T=0.1)
    print(f"t={0.1 * k:.1f}s  pose=({pose.x:.4f}, {pose.y:.4f}, {pose.theta:.4f})  velocity={np.round(vel, 4)}")
