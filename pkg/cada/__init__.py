###############################################################################
#
# CADA desk-scale text-to-image person retrieval.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.
#
###############################################################################
"""
Text-to-image person retrieval with cross-modal attribute associations,
sized for a CPU: numpy autodiff, ViT and text encoders, a decoder sharing
the text encoder's weights, and a synthetic person dataset.
"""

__version__ = "0.1.0"
