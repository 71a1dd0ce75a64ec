"""Selective state-space models (S4D, Mamba, Mamba-2, Mamba-Δᵀ) from scratch.

Modules: ``tensor_core`` (autodiff), ``mixers`` (scans and blocks),
``constructions`` (closed-form weights), ``tasks`` (synthetic benchmarks),
``analysis`` (sensitivity, decay histograms, approximation rates),
``training`` (Adam + cosine schedule), ``estimator`` (scikit-learn wrapper)
and ``cli``.
"""

__version__ = "0.1.0"
