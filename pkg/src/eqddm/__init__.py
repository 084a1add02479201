"""SO(3)-equivariant deep switching state-space model for motion prediction."""

__version__ = "0.1.0"
