"""Numerical toolkit for stochastic recursive optimal control.

Modules: ``expr`` (coefficient expressions with second-order forward AD),
``model`` (problems, built-in examples, Hamiltonians), ``sim`` (forward
Monte Carlo), ``bsde`` (cost and adjoint backward solvers), ``hjb``
(generalized HJB finite differences), ``jets`` (sub/super-jet estimation),
``verify`` (maximum principle / dynamic programming relation checks) and
``cli``.
"""

__version__ = "0.1.0"
