"""Desk-scale tissue point tracking: flow chaining with learned uncertainty
and occlusion heads, guided-attention feature fusion, pseudo-label
generation, and a two-stage curriculum trainer.
"""

__version__ = "0.1.0"
