"""Grouped mixture-of-experts speech projector laboratory.

A desk-scale implementation of a grouped sparse-MoE projector trained with a
four-stage transition curriculum on synthetic multilingual data, with routing
analytics and an ablation harness.
"""

__version__ = "0.1.0"
