"""Two-stage bi-modal retinal classification with lesion-sign pre-training."""

__version__ = "0.1.0"
