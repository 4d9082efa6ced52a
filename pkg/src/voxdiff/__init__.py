"""voxdiff: image-conditioned 3-D voxel shape generation.

Contrastive image-shape pretraining, classifier-free-guided voxel diffusion,
embedding interpolation, generation metrics, and a procedural dataset, built
on a self-contained reverse-mode autodiff core (gradcore).
"""

__version__ = "0.1.0"
