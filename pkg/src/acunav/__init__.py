"""Acupuncture-navigation toolkit: volume preprocessing, diffeomorphic
registration, trajectory transfer, rigid transform chains, pose tracking,
and real-time needle guidance."""

__version__ = "0.1.0"
