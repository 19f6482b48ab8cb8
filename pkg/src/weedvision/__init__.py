"""weedvision: desk-scale crop/weed detection toolkit.

Subpackages cover synthetic data generation and I/O (``dataio``), the
clustering-based curation pipeline (``curation``), the autodiff tensor
substrate (``numerics``), the dual-branch detector and training loop
(``model``), linear probing (``probe``), detection metrics with
significance testing (``evaluation``), and the command-line entry point
(``cli``).
"""

__version__ = "0.1.0"
