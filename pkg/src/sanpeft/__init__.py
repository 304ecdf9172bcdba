"""Parameter-efficient fine-tuning with scaling-factor propagation."""
__version__ = "0.1.0"
