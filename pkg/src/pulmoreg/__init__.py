"""Lung CT registration: sparse keypoint matching plus dense NGF optimisation."""
