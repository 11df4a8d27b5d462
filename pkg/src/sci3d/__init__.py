"""Set-conditioned two-stream relational video network, desk scale.

Subpackage map:
    scene / data    synthetic mini-CATER generator, labels, dataset io
    relational      pairwise relation aggregation and the non-local block
    backbone        2D residual encoder and 2D-to-3D kernel inflation
    setpred         object-state set prediction pretraining
    models          the four evaluated architectures and their heads
    train           SGD with momentum, step schedule, checkpointing
    metrics         multi-label average precision evaluation
    cli             command line entry points (generate/pretrain/train/eval)
"""

__version__ = "0.1.0"
