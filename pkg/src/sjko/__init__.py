"""Semi-dual JKO training for Wasserstein-gradient-flow generative modeling.

Library layout:

- ``autodiff``   reverse-mode engine (double-backprop capable) on float64
- ``rng``        counter-based random streams with Box-Muller normals
- ``nets``       MLPs, frozen transport snapshots, Adam
- ``divergence`` f-divergence generators, convex conjugates, softplus/sigmoid
- ``datasets``   seeded samplers (Gaussian, two circles, 25-Gaussian grid)
- ``trainer``    per-phase adversarial JKO training and UOT baselines
- ``wgf``        Ornstein-Uhlenbeck ground truth, Euler-Maruyama, symmetric KL
- ``metrics``    mode coverage, ring concentration, exact empirical W2
- ``cli``        train / sample / eval / ou-bench / selfcheck commands
"""

__version__ = "0.1.0"
