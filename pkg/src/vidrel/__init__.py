"""Query/short-video relevance ranking at desk scale.

Keyword feature engineering, pseudo-query matching pre-training,
hierarchical-softmax ordinal fine-tuning and offline ranking metrics,
exercised end to end on synthetic corpora with known latent structure.
"""

__version__ = "0.1.0"
