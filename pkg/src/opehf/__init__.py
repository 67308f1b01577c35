"""Off-policy evaluation from episode-level human feedback.

Reconstructs per-step human rewards from terminal human returns with a
variational latent model, then evaluates target policies with standard
off-policy estimators on synthetic human-feedback MDPs with exact oracles.
"""
from .core import (DatasetFormatError, HMDPSpec, OfflineDataset, Policy, Trajectory,
                   discounted_return, load_dataset, load_policy, policy_action_prob, save_dataset,
                   save_policy)

__version__ = "0.1.0"

__all__ = [
    "DatasetFormatError", "HMDPSpec", "OfflineDataset", "Policy", "Trajectory",
    "discounted_return", "load_dataset", "load_policy", "policy_action_prob", "save_dataset",
    "save_policy",
]
