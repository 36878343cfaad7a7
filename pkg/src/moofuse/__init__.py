"""Conflict-averse multimodal training with optional, asynchronous inputs."""

__version__ = "0.1.0"
