"""Physics-biased attention forecaster for wave-driven structural response.

Modules: ``diffkernel`` (reverse-mode autodiff on numpy), ``spectral`` (FFT and
losses), ``attention`` (decay / phase-biased attention and the fusion head),
``model`` (network, configuration, checkpoints), ``data`` (synthetic wave flume
oracle and dataset I/O), ``evaluation`` (metrics and baselines), ``training``
(optimiser, sweeps) and ``cli``.
"""

__version__ = "0.1.0"
