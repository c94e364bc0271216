import setuptools

with open("README.rst", "r") as fh:
    long_description = fh.read()

setuptools.setup(
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
    ],
    description="Natural posterior networks: input-dependent Bayesian updates for uncertainty estimation",
    entry_points={'console_scripts': ['natpn=natpn.cli:main']},
    install_requires=['numpy', 'scipy', 'scikit-learn', 'pandas', 'matplotlib', 'py-ubjson', 'termcolor'],
    long_description=long_description,
    long_description_content_type="text/x-rst",
    name="natpn",
    packages=setuptools.find_packages(exclude=['test']),
    python_requires='~=3.8',
    tests_require=['mpmath', 'mypy', 'types-termcolor'],
    version="0.1.0",
)
