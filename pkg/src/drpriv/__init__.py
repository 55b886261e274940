"""Adversarial dimension reduction with reconstruction-distance privacy."""
