"""Learning a swarm's controller-selection policy from observation."""

__version__ = "0.1.0"
