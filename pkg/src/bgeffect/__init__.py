"""Background attention in synthetic sign classification.

Modules: ``nn`` (numpy CNN), ``scene`` (procedural datasets), ``attribution``
(Kernel SHAP, exact Shapley, GradCAM), ``stats`` (pixel ratio, CIs,
permutation test), ``io`` (formats) and ``harness``/``cli`` (experiments).
"""
from . import attribution, io, nn, scene, stats

__version__ = "0.1.0"
__all__ = ["attribution", "io", "nn", "scene", "stats"]
