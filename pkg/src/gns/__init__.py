"""Learnable particle simulator.

Particles become graph nodes, interactions become learned message passing,
and the trained network is rolled out autoregressively with a semi-implicit
Euler update. See README.md for the CLI pipeline.
"""

__version__ = "0.1.0"
