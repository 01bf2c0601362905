"""Training-free multi-task model merging with conflict-aware trimming."""

__version__ = "0.1.0"
