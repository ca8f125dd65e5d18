"""Object-level reinforcement learning on a synthetic RGBD tabletop."""

__version__ = "0.1.0"
