#!/usr/bin/env python3
"""
Setup script for edac-lab
"""

from setuptools import setup

with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

with open("requirements.txt", "r", encoding="utf-8") as fh:
    requirements = [line.strip() for line in fh if line.strip() and not line.startswith("#")]

setup(
    name="edac-lab",
    version="1.0.0",
    description="Desk-scale offline RL with SAC-N and ensemble-diversified critics (EDAC), "
                "built on a small second-order autodiff",
    long_description=long_description,
    long_description_content_type="text/markdown",
    py_modules=["config", "autodiff", "nn", "env", "datagen", "algorithms", "analysis", "checks", "cli"],
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
    ],
    python_requires=">=3.9",
    install_requires=requirements,
    extras_require={"test": ["pytest>=7.0.0"]},
    entry_points={
        "console_scripts": [
            "edac-lab=cli:main",
        ],
    },
    zip_safe=False,
)
