"""Video-retrieval-augmented motion generation at desk scale.

Subpackages and modules:

- ``numerics``: shared numerical helpers (normalisation, Gaussian fits, PSD square roots, gradient checks)
- ``embedstore``: on-disk exact top-k vector store
- ``encoders``: action, text and object encoders with hand-written backward passes
- ``fusion``: contrastive losses, the router, two-stage retriever training and ranking
- ``codec``: VQ motion tokenizer
- ``policy``: context assembly and the autoregressive token policy
- ``mcdpo``: dual-alignment reward, preference sets and DPO training
- ``metrics``: FID, R-precision, MM-Dist, Diversity and run-level confidence intervals
- ``workbench``: synthetic corpus, configuration, pipeline driver and CLI
"""

__version__ = "0.1.0"
