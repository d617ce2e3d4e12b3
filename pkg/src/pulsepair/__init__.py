"""Two-element drift-scan interferometer pulse-pair simulator and pipeline.

Modules
-------
config        instrument settings, INI and environment layering
geometry      fringe geometry, hour angle, RA binning
scenario      seeded synthesis of trigger frames
first_level   pulse detection, pairing, likelihood cuts, visibility
rfi           segment tagging, spectral margin, Sun excision
stats         exposure, sorted heap, Cohen's d, DOI detection
diagnostics   falsification variants and classification
pipeline      stage orchestration with deterministic parallelism
figures       plot-data tables
cli           command-line runner
"""

__version__ = "0.1.0"
