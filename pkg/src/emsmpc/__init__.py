"""emsmpc: robust model predictive control with ellipsoidal reachable sets.

The package propagates ellipsoidal tubes through nonlinear dynamics,
partitions them with optimizer-chosen halfspaces into a scenario tree,
transcribes the resulting multi-stage optimal control problem into a smooth
NLP, and solves it with an in-repo augmented-Lagrangian / L-BFGS method.
A closed-loop corridor case study (robot passing a walking human) exercises
the full stack.
"""

__version__ = "0.1.0"
