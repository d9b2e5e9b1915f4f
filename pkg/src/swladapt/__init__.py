"""Cross-user activity recognition via adversarial domain adaptation with
meta-learned per-sample alignment weights."""

__version__ = "0.1.0"
