"""Sliding-window visual-inertial localization backend with a hardware
cost model, a FastAPI compute service, and a thin-client CLI."""

__version__ = "0.1.0"
