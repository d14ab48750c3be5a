"""Geometry, kernels, quadrature, operators, solver and diagnostics."""
