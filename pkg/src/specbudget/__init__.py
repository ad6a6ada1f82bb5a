"""Memory budgeting, tree-mask tooling and simulation for tree-based speculative decoding."""

__version__ = "0.1.0"
