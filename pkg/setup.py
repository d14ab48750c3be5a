#!/usr/bin/env python3
"""
Setup script for the mixed Dirichlet-Neumann BEM solver
"""

from setuptools import setup, find_packages

setup(
    name="mixed-bem-solver",
    version="1.0.0",
    description="Galerkin boundary-element solver for mixed Dirichlet-Neumann Helmholtz and Poisson problems",
    packages=find_packages(include=["app", "app.*"]),
    python_requires=">=3.9",
    install_requires=[
        "numpy>=1.24.0",
        "scipy>=1.10.0",
        "python-dotenv>=1.0.0",
        "pydantic>=2.5.0",
        "typing-extensions>=4.5.0",
    ],
    entry_points={"console_scripts": ["mixed-bem=app.main:main"]},
)
