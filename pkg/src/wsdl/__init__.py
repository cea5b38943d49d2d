"""Weakly supervised discriminative localization at desk scale.

Image-level labels are the only supervision: a small classification network
produces multi-level attention maps, the maps are binarized into pseudo
ground-truth boxes, and those boxes train a shared region-proposal network
feeding one localization head per attention level. Classification fuses the
heads' region scores with a full-image score.
"""

__version__ = "0.1.0"
