"""Optimizers, checkpoints, the training loop and gradient checking."""
