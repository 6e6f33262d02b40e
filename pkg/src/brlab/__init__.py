"""Offline preference-based RL via binary reward labeling."""
