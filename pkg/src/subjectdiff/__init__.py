"""Toy-scale subject customization for latent diffusion."""
