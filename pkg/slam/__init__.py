"""IPL-PMB / EK-PMB 5G mmWave SLAM simulator."""

__version__ = "0.1.0"
