"""Stochastic self-attention sequential recommender."""
