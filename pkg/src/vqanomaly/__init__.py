"""Video anomaly detection with a vector-quantized U-Net frame predictor."""

__version__ = "0.1.0"
