"""OpenVPN flow fingerprinting: passive filter, active prober, behavioral emulator."""

__version__ = "0.1.0"
