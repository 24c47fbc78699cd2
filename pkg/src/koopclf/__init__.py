"""Koopman bilinear lifting with learned control Lyapunov functions.

Submodules:

``sim``         plants, RK4 simulation and trajectory datasets
``numerics``    Kronecker features and guarded least squares
``autodiff``    small reverse-mode autodiff used for training
``nets``        tanh MLPs, CLF parameterizations and Adam
``edmd``        bilinear and linear model identification
``losses``      training objectives
``intervals``   interval arithmetic
``falsifier``   interval branch-and-bound verification of the CLF conditions
``controller``  Sontag feedback and closed-loop rollouts
``trainer``     the learner/falsifier loop
``cli``         command-line entry point
"""

__version__ = "0.1.0"
