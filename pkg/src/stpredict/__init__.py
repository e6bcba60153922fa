"""Spatiotemporal predictive learning: gated convolutional recurrent
networks with dual memory flows, trained on synthetic bouncing-sprite
video with reverse scheduled sampling."""

__version__ = "0.1.0"
