"""Sequential risk prediction with explicit model uncertainty.

Subpackages cover a small autodiff tensor core, deterministic and
mean-field Gaussian variational layers, the patient-sequence model with
ensemble and ELBO training, synthetic cohort tooling, uncertainty and
calibration metrics, sensitivity-constrained decisions, and subgroup /
embedding-uncertainty analyses.
"""

__version__ = "0.1.0"
