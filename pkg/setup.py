from setuptools import setup

setup(
    name="dhr",
    version="0.1",
    packages=["dhr", "dhr.experiments"],
    package_dir={"": "src"},
    python_requires=">=3.10",
    install_requires=[
        "click",
        "numpy",
        "pandas",
        "pillow",
        "prettytable",
        "scikit-image",
        "scipy",
        "termcolor",
        "tomli; python_version < '3.11'",
        "torch",
        "tqdm",
    ],
    entry_points={"console_scripts": ["dhr=dhr.cli:main"]},
    license="BSD 3-Clause",
)
