"""
DiffFAE: facial appearance editing with a latent diffusion model conditioned on
rendered physical attributes, slot-attention region tokens and an identity token.
"""

__version__ = "0.1.0"
