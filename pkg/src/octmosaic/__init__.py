"""Feature-guided mosaicking of OCT/OCTA en-face images.

Stages: keypoint matching, feature-image affine registration, symmetric
diffeomorphic refinement, compositing and segmentation-based verification.
"""
__version__ = "0.1.0"
