"""Small masked / block diffusion language models, trained and sampled on a CPU."""

__version__ = "0.1.0"
