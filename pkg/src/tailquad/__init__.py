"""Tailed-quadruped locomotion toolkit.

Proprioceptive gait planning, sequential distributed NMPC tail control,
a small deterministic physics sandbox, and a batch experiment harness.
"""

__version__ = "0.1.0"
