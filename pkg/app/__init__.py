# Simultaneous Translation Toolkit Application Package

"""
Anticipation-free simultaneous translation

This package contains the causal CTC encoder, the auxiliary sorting network
used during training, the streaming engine and the evaluation metrics.
"""

__version__ = "0.1.0"
