"""Sequential slab-based segmentation of volumetric scans.

Subpackages and modules are imported explicitly by consumers, e.g.
``from seqseg import network`` or ``from seqseg.data import synth``.  The
top-level package stays import-light so the CLI can configure BLAS thread
counts before numpy is loaded.
"""

__version__ = "0.1.0"
