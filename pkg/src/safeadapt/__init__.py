"""Safe continual domain adaptation for a 2-DOF reach-and-balance policy."""

__version__ = "0.1.0"
