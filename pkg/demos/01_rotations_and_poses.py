"""Rotations, poses, and retractions: the geometric vocabulary.

Walks through the SO(3) exponential/logarithm pair, the right Jacobian
that links additive tangent steps to multiplicative group steps, and
the world-to-body pose convention used everywhere else.
"""

import numpy as np

from odoslam.manifold import Pose, exp_so3, log_so3, right_jacobian

rng = np.random.default_rng(0)

print("== exponential and logarithm are inverses ==")
phi = np.array([0.3, -0.2, 0.9])
R = exp_so3(phi)
print("phi           ", phi)
print("log(exp(phi)) ", log_so3(R))
print("R is orthonormal: |R R^T - I| =", np.abs(R @ R.T - np.eye(3)).max())

print()
print("== right Jacobian: Exp(phi + d) ~ Exp(phi) Exp(Jr d) ==")
d = rng.normal(size=3) * 1e-5
lhs = exp_so3(phi + d)
rhs = exp_so3(phi) @ exp_so3(right_jacobian(phi) @ d)
print("agreement to first order:", np.abs(lhs - rhs).max())

print()
print("== pose convention: f_body = R f_world + p ==")
# a robot at world (2, 1) facing 90 degrees left
yaw = np.pi / 2
rot = exp_so3(np.array([0.0, 0.0, yaw])).T
pose = Pose(rot, -rot @ np.array([2.0, 1.0, 0.0]))
print("position_in_world()", pose.position_in_world())
landmark_world = np.array([2.0, 3.0, 0.0])  # 2 m ahead of the robot
print("landmark in body frame", pose.apply(landmark_world))

print()
print("== composing a relative motion ==")
step = Pose(exp_so3(np.array([0.0, 0.0, -0.1])), np.array([-0.5, 0.0, 0.0]))
after = step.compose(pose)
print("after a 0.5 m step and 0.1 rad turn:", after.position_in_world())

print()
print("== retraction used by the optimizer ==")
delta = np.array([0.0, 0.0, 0.05, 0.1, 0.0, 0.0])
moved = Pose(pose.rot @ exp_so3(delta[:3]), pose.trans + pose.rot @ delta[3:])
print("tangent step (dphi, dp) moves the pose to", moved.position_in_world())
