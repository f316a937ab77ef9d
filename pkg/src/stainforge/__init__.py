"""Marker-conditioned latent diffusion for virtual multiplex staining of H&E images.

Built on a small reverse-mode autodiff layer over numpy (:mod:`stainforge.tensor`).
"""

__version__ = "0.1.0"
