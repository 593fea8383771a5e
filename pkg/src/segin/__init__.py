"""Semantic example-guided image-to-image translation at desk scale."""
