"""VASE: variational assorted surprise exploration.

Model-based exploration for sparse-reward continuous control. A Bayesian
dynamics network (factorised Gaussian weights) scores each transition;
its surprise is added to the extrinsic reward and the policy is trained
with TRPO.
"""

__version__ = "0.1.0"
