"""Multi-stage sampling for hierarchical models with funnel geometry.

The workflow: sample a widened model whose extra hyper parameters
smooth out the funnel, fit the marginal hyper density with a coupling
flow, then resample the original low-dimensional hyper parameters
against that fitted density along the constraint map linking the two
spaces.  Reparameterised direct samplers are included as baselines and
every analytic marginal the models admit is exposed for verification.
"""

__version__ = "0.1.0"
