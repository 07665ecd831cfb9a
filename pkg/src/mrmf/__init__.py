"""Multi-resolution model fusion training at desk scale.

Coarse and dense copies of a CNN are pretrained on block-averaged data, fused
layer group by layer group, and finetuned at the original resolution.
"""

__version__ = "0.1.0"
