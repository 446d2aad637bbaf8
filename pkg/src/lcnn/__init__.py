"""Low-complexity CNNs for acoustic scene classification: features, training,
filter pruning, int8 quantization and ensembles with shared feature maps."""

__version__ = "0.1.0"
