"""Adversarial attacks and an inference-dropout defense for person re-identification.

Submodules: ``data`` (datasets), ``model`` (victim), ``metrics`` (mAP/CMC),
``pfgsm`` and ``misrank`` (attacks), ``defense`` (inference dropout) and
``pipeline`` (experiments, reports, CLI).
"""
__version__ = "0.1.0"
