"""Class-agnostic player re-identification toolkit.

Fine-tunes pretrained vision encoders with a symmetric image-image InfoNCE
objective, evaluates retrieval with mAP/CMC and k-reciprocal re-ranking, and
probes zero-shot attribute recognition and saliency via prompt classification
and Score-CAM.
"""

__version__ = "0.1.0"
