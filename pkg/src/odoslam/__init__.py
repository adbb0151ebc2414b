"""Wheel-odometer + gyroscope + monocular landmark SLAM with a simulator.

The package is organised bottom-up: rotation-group math (:mod:`manifold`),
sensor models (:mod:`sensors`), odometer preintegration
(:mod:`preintegration`), factor residuals (:mod:`factors`), a Gauss-Newton
solver with landmark elimination (:mod:`optimizer`), the frame tracking
state machine (:mod:`tracking`), keyframe mapping (:mod:`mapping`), a
deterministic scenario simulator (:mod:`sim`), trajectory evaluation
(:mod:`evaluate`), and the end-to-end pipeline plus CLI.
"""

__version__ = "0.1.0"
