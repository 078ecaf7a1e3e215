"""Semi-supervised domain-adaptive segmentation at desk scale.

Gaussian spectral style transfer, disentangled style/content contrastive
pretraining with dense feature propagation, and mean-teacher fine-tuning,
all on a small numpy network with hand-written gradients.
"""

__version__ = "0.1.0"
