"""Fully nonlinear convex parabolic PDE solver via gradient ascent on the diffusion coefficient."""

__version__ = "0.1.0"
