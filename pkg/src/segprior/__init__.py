"""Weakly supervised class-incremental semantic segmentation, desk scale.

A small numpy package that trains a toy segmentation model over a sequence
of class-incremental steps where new classes arrive with image-level labels
only.  New classes borrow spatial evidence from semantically related old
classes through dense similarity maps built from class-name embeddings.

Hot numeric kernels are numba-compiled by default; set SEGPRIOR_NO_NUMBA=1
to run the pure-numpy fallbacks instead.
"""

__version__ = "0.1.0"
