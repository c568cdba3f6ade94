"""boxlift: synthetic LiDAR/camera scenes, 2D-seeded 3D box proposals,
diffusion-style box refinement, and pseudo-label quality metrics."""

__version__ = "0.1.0"
