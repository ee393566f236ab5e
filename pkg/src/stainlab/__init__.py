"""stainlab: stain-aware training experiments for stained-tissue segmentation.

Subpackages and modules:

- ``engine``: numpy tensor autodiff core (tape, layers, AdamW, checkpoints)
- ``stains``: optical density conversion, stain-matrix estimation, rendering
- ``attention``: covariance-statistics channel attention
- ``branch``: gradient reversal and the stain-regression branch
- ``model``: the segmentation network and its training variants
- ``synth``: synthetic two-stain dataset generator and dataset I/O
- ``metrics``: overlap scores and feature-distribution divergence
- ``cli``: command line entry point (``stainlab <verb> ...``)
"""

__version__ = "0.1.0"
