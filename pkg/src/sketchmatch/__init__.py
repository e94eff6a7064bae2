"""Identity-conditioned diffusion sketch synthesis and cross-modal matching benchmarks.

The package is organized around a small estimator-style API (``fit`` /
``transform`` / ``get_params``) for the learnable components, pure functions
for the diffusion mathematics and biometric metrics, and a CLI that chains
everything into reproducible experiments on a procedural toy face corpus.
"""

from .errors import CheckpointError, DataError, DivergenceError, ManifestError, NumericError

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "DataError",
    "DivergenceError",
    "ManifestError",
    "NumericError",
    "__version__",
]
