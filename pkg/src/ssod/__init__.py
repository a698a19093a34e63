"""Semi-supervised training of a dense anchor-grid detector with a pseudo-label assigner,
an epoch-level threshold adaptor and an EMA teacher, on synthetic shapes."""

__version__ = "0.1.0"
