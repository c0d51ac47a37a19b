"""Delay-aware diffusion policies: demonstration compression, a small DDPM policy and a delayed-execution simulator."""

__version__ = "0.1.0"
