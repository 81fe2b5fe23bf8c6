"""Semi-augmented mixed-primal finite elements for double-diffusive
natural convection in porous media."""
