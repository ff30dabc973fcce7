"""
MoE-LoRA optimizer toolkit - gate-rescaled Riemannian preconditioning
"""

__version__ = "0.1.0"
