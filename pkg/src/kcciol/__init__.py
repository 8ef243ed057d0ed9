"""Knowledge-consolidation meta-learning for class-incremental online learning.

Library layout:

- ``tape`` / ``optim``: reverse-mode autodiff over float64 arrays (nested
  gradients supported) and the SGD/Adam update rules.
- ``models``: split representation/head MLPs over a flat parameter store,
  plus checkpoint serialization.
- ``trajectories``: sine-regression and synthetic-classification learning
  trajectory samplers.
- ``metalearner``: inner/outer meta-training loops, the l1 knowledge
  squeeze, importance masks, and the three-phase training schedule.
- ``evaluation``: the online evaluation protocol, baselines, and the
  masking-level sweep.
- ``cli``: command-line front end (``kcciol train/eval/baseline/sweep/
  gradcheck/inspect``).
"""

__version__ = "0.1.0"
