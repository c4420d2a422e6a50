"""Parameter-efficient tuning methods on a small numpy transformer encoder."""

__version__ = "0.1.0"
