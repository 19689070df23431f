from setuptools import setup, find_packages

setup(
    name="kinetic-vi",
    version="0.1.0",
    description="随机动力学模型的变分推断 - Variational inference for stochastic kinetic models",
    packages=find_packages(exclude=["tests", "tests.*", "examples", "examples.*"]),
    install_requires=[
        "numpy>=1.22",
        "pandas>=1.5",
        "pydantic>=2.0",
        "loguru>=0.7",
        "python-dotenv>=1.0",
    ],
    extras_require={
        "dev": ["pytest>=7.4", "pytest-cov>=4.1"],
    },
    entry_points={
        "console_scripts": ["kinetic-vi=kinetic_vi.cli:main"],
    },
    python_requires=">=3.8",
)
