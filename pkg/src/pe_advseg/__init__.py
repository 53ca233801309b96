"""Semi-supervised adversarial segmentation of pulmonary-embolism lesions in CT."""

__version__ = "0.1.0"
