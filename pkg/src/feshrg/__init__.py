"""Spectral renormalization-group engine for atom-photon ground states.

Subpackages:
  fock      truncated Fock space, ladder operators, dilation
  kernels   integral-kernel sequences, norms, kernel-to-operator map
  wick      normal-ordering engine and Neumann-series kernel expansion
  feshbach  smooth Feshbach-Schur map and isospectrality checks
  rg        renormalization transformation and ground-state iteration
  model     atomic families, interaction kernels, initial reduction, oracle
  analysis  analyticity, constancy, decay and residual diagnostics
  cli       command-line front end
"""

__version__ = "0.1.0"
