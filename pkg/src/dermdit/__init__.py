"""Desk-scale text-conditioned diffusion transformer for dermoscopic imagery.

Subpackages cover the numeric kernel (:mod:`dermdit.nn`), the diffusion
noise schedule (:mod:`dermdit.schedule`), the latent codec
(:mod:`dermdit.codec`), prompt conditioning (:mod:`dermdit.conditioning`),
the denoiser (:mod:`dermdit.model`), training and sampling
(:mod:`dermdit.training`), generative-model metrics (:mod:`dermdit.metrics`),
the downstream diagnostic classifier (:mod:`dermdit.classifier`), and data /
checkpoint / CLI plumbing (:mod:`dermdit.data`, :mod:`dermdit.checkpoint`,
:mod:`dermdit.cli`).
"""

__version__ = "0.1.0"
