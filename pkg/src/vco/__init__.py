"""Two-stream flow-matching diffusion at desk scale: joint pixel/feature
denoising with structural guidance masking, feature-space training fields,
and RMS/SNR stream calibration, on deterministic synthetic data."""

__version__ = "0.1.0"
