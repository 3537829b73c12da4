"""Gesture-conditioned mmWave channel synthesis toolkit.

Builds time-varying scattering-point channels from human keypoint motion:
keypoints -> scattering points -> per-part counts and feature models ->
synthesized CIR, power delay profiles, RMS delay spread and micro-Doppler
spectrograms.
"""

__version__ = "0.1.0"
