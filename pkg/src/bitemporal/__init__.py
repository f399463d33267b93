"""Reusable-encoder change detection for geometrically misaligned bitemporal imagery.

Stages: self-supervised pretext training (``pretext``), descriptor-based
perspective alignment (``align``) and frozen-encoder change detection
(``cd``), with evaluation in ``metrics`` and synthetic data in ``scenario``.
"""

__version__ = "0.1.0"
