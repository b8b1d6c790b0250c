"""RL-aware unpaired sim-to-real image translation on a toy grasping task."""

__version__ = "0.1.0"
