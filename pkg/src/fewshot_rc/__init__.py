"""Few-shot relation classification with an abstain option and domain-adversarial training."""

__version__ = "0.1.0"
