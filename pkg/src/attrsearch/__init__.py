"""attrsearch: attribute-manipulation image retrieval at desk scale.

Learns one representation per image attribute (weakly localized through
activation maps), stores per-value prototypes in a differentiable memory
block, composes the per-attribute vectors into a single global vector, and
answers "same image but with attribute X set to V" queries by Euclidean
top-K search over an indexed gallery.
"""

__version__ = "0.1.0"
