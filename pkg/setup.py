__author__ = ()
__version__ = "0.1.0"

from setuptools import setup


setup(name='pynnmass',
      version=__version__,
      description="NN-Mass and NN-Density topology metrics, gradient flow experiments and training-free design of "
                  "deep networks with concatenation shortcuts.",
      url='TBD',
      packages=['nnmass'],
      python_requires='>=3.8',
      install_requires=['numpy', 'scipy', 'networkx'],
      tests_require=['faker', 'pytest'],
      extras_require={'test': ['faker', 'pytest']},
      entry_points={'console_scripts': ['nnmass = nnmass.cli:main']})
