"""Model-agnostic memory engine for embodied exploration and question answering agents."""

__version__ = "0.1.0"
