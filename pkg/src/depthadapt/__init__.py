"""Unsupervised domain adaptation for monocular depth regression.

A depth network is pretrained with supervision on a rendered source domain,
then its deepest encoder stages are adapted to an unlabeled, photometrically
shifted target domain with adversarial alignment plus a content-preserving
regularizer (latent anchoring, a residual transform branch, or a feature
reconstruction head).
"""

__version__ = "0.1.0"
