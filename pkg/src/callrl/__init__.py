"""Function-calling RL at desk scale: call ASTs, binary rewards, GRPO with
entropy-adjusted advantages, a tabular policy, a synthetic benchmark and a
two-stage data-cleaning pipeline."""

__version__ = "0.1.0"
