# Run this command in root directory to install CLI global command:
# pip3 install -e .
from setuptools import setup, find_packages

setup(
    name='leo-beam',
    version='0.1',
    packages=find_packages(where='src'),
    package_dir={'': 'src'},
    install_requires=[
        "numpy",
        "scipy",
        "pydantic>=2",
        "rich",
        "colorama",
    ],
    entry_points={
        'console_scripts': [
            'leo-beam = src.cli:main',
        ],
    },
)
