"""twindiff: mixed-type tabular data synthesis with a pair of co-evolving
conditional diffusion models (Gaussian for continuous columns, multinomial
for discrete ones) bound by a triplet contrastive objective."""

__version__ = "0.1.0"
