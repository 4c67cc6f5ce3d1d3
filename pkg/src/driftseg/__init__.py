"""Streaming test-time adaptation of a small segmentation network.

The package adapts only the affine parameters of per-domain normalization
branches while a frozen backbone processes a stream whose latent domain
drifts and recurs. Sub-modules:

    tensor      dense (n, c, h, w) kernels with explicit backward passes
    tensor_io   flat binary tensor format used by checkpoints and datasets
    bnorm       source/target statistic mixing and per-branch affine params
    network     the fixed five-conv segmentation net, taps, checkpoints
    clustering  per-channel statistic features, online centroids, distances
    losses      unsupervised objectives and similarity-based denoising
    data        synthetic scenes, domain transforms, streams, datasets
    metrics     confusion matrix, mIoU, correlation
    adapt       pretraining, the adaptation step/loop, evaluation
    analyze     distinction-rate grids and signal/accuracy correlations
    cli         gen-data / pretrain / adapt / analyze commands
"""

__version__ = "0.1.0"
