"""Matrix-free high-order DG Poisson solver with geometric multigrid and
tensor-product Schwarz smoothers (fast-diagonalization local solvers)."""

__version__ = "0.1.0"
