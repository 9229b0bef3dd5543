"""Unified object perception: detection, segmentation, grounding, prompting and tracking."""
