"""Reason-and-Restore at desk scale: degradation synthesis, analytic
diagnosis, parametric restoration and GRPO policy tuning."""

__version__ = "0.1.0"
