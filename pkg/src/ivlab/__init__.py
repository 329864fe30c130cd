"""Desk-scale video foundation model lab: masked video modeling, video-language
contrastive learning, supervised post-pretraining and cross-model fusion on
synthetic clips, built on a small numpy autodiff engine."""

__version__ = "0.1.0"
