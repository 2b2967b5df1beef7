"""Reconstruction-driven multimodal autoencoder with linear baselines and clustering evaluation."""
