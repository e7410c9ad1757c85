#!/usr/bin/env python
"""The setup script."""

from setuptools import setup, find_packages

with open('README.md') as readme_file:
    readme = readme_file.read()

with open('requirements.txt', 'r') as f:
    requirements = [line.strip() for line in f.readlines() if len(line.strip()) > 0]

test_requirements = ['pytest', 'scikit-learn', ]


setup(
    python_requires='>=3.8',
    classifiers=[
        'Programming Language :: Python :: 3',
        'Programming Language :: Python :: 3.8',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
    ],
    entry_points={
        'console_scripts': [
            'coherence-lab=coherence_lab.main:main',
        ],
    },
    install_requires=requirements,
    long_description=readme,
    include_package_data=True,
    name='coherence_lab',
    packages=find_packages(include=['coherence_lab', 'coherence_lab.*']),
    test_suite='coherence_lab.tests',
    tests_require=test_requirements,
    version='0.0.1',
)
