"""Single-image self-supervised pretraining and linear-probe evaluation."""

__version__ = "0.1.0"
