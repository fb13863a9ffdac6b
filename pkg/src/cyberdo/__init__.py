"""Attacker/defender network security games solved by a double oracle loop.

The package is organised around one module per concern:

- :mod:`cyberdo.env` - the stochastic network game (devices, graph, atoms).
- :mod:`cyberdo.nets` - minimal numpy MLPs with analytic gradients.
- :mod:`cyberdo.qcache` - quantized-key LRU cache for critic values.
- :mod:`cyberdo.meta` - learned top-k device pruning controller.
- :mod:`cyberdo.br` - DDPG-style approximate best responses.
- :mod:`cyberdo.game` - payoff estimation, restricted Nash, double oracle.
- :mod:`cyberdo.theory` - tabular MDP checks of the pruning value bound.
- :mod:`cyberdo.config` / :mod:`cyberdo.cli` - experiment harness.
"""

__version__ = "0.1.0"
