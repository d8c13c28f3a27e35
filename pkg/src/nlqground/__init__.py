"""Anchor-based natural-language video query grounding.

Multi-scale temporal anchors over sampled key frames, a cross-modal
transformer encoder trained with an IoU-alignment + boundary-regression
objective, top-k inference with NMS and score-channel re-ranking, and
R@n/IoU@m evaluation.
"""

__version__ = "0.1.0"
