"""Noise schedule, denoiser network, training, sampling and checkpoints."""
