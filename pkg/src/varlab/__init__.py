"""varlab: low-variance DDPG-style agent and multi-seed benchmarking harness."""

__version__ = "0.1.0"
