from setuptools import setup, find_packages

setup(
    name="chirality-kit",
    version="0.1.0",
    description="Chirality-equivariant neural network layers with cost audits and a synthetic training harness.",
    long_description=open("README.md").read(),
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=["tests", "tests.*"]),
    install_requires=[
        "matplotlib==3.10.0",
        "numpy==2.2.1",
        "pandas==2.2.3",
        "scipy==1.15.1",
        "click~=8.1.7",
    ],
    extras_require={
        "dev": [
            "pytest>=7.0.0",
            "pytest-mock>=3.0.0",
        ]
    },
    entry_points={
        "console_scripts": [
            "chirality-kit=src.main:cli",
        ],
    },
)
