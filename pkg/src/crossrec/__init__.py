"""Cross-domain sequential recommendation lab: multi-head vector quantization
over a target-aliased codebook plus bi-level meta-transfer with per-layer
gradient rescaling."""

__version__ = "0.1.0"
