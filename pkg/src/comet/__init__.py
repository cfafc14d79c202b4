"""Four-level contrastive pre-training for patient-structured time series.

Modules: ``kernel`` (tape autodiff), ``datamodel`` (leveled datasets, splits,
samplers), ``augment`` (timestamp masks), ``encoder`` (dilated conv encoder),
``losses`` (observation, sample, trial and patient contrast), ``trainer``,
``evaluate``, ``ingest`` and ``cli``.
"""

__version__ = "0.1.0"
