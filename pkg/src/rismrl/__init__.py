"""RIS-assisted MU-MIMO downlink simulation with classical and learning designs."""

__version__ = "0.1.0"
