"""Low-dimensional return maps, symbolic dynamics and periodic orbits of
chaotic flows, built by applying locally linear embedding directly to
Poincare-section data."""

__version__ = "0.1.0"
