"""Unified efficient pyramid transformer for semantic segmentation."""
