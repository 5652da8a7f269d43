"""cfaudit: train counterfactual explainers for black-box image classifiers,
quantify causal concept effects, repair uncertainty estimates via
counterfactual augmentation, and evaluate everything with dedicated metrics.
"""

__version__ = "0.1.0"
