#!/usr/bin/env python3.9

import os
from setuptools import setup, find_packages  # type: ignore[import]


def read(fname: str) -> str:
    """For reading from README file."""
    with open(os.path.join(os.path.dirname(__file__), fname)) as stream:
        return stream.read()


setup(name='memshare',
      version='0.1',
      description='A multi-tenant log-structured cache that shares memory by hit rate',
      license='GNU GPLv3',
      keywords='cache, memcached, log-structured memory, multi-tenant, typed',
      long_description=read('README.org'),
      packages=find_packages(exclude=('tests',)),
      python_requires='>=3.9',
      install_requires=['click', 'loguru', 'more-itertools', 'numpy',
                        'tabulate', 'tqdm', 'typer<0.26'],
      entry_points={'console_scripts': ['memshare = memshare.cli:main']},
      classifiers=[
                   'Development Status :: 4 - Beta',
                   'Intended Audience :: Science/Research',
                   'License :: OSI Approved :: GNU General Public License v3 (GPLv3)',
                   'Natural Language :: English',
                   'Operating System :: OS Independent',
                   'Programming Language :: Python :: 3.9',
                   'Topic :: System :: Distributed Computing',
                   'Typing :: Typed'
                   ])
