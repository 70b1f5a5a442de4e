"""ECG tamper emulation, preprocessing, detectors and verification."""
