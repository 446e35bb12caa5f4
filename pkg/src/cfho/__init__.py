"""Handoff control for user-centric cell-free massive MIMO networks.

A POMDP over two-state large-scale fading, solved by point-based value
iteration on small candidate sub-problems, plus LSF-based baselines and a
Monte Carlo harness.
"""

__version__ = "0.1.0"
