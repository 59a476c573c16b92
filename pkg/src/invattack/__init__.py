"""Invariance adversarial example toolkit.

Generates norm-bounded invariance attacks against digit classifiers, trains
and evaluates desk-scale robust models to expose the sensitivity/invariance
tradeoff, verifies the synthetic overly-robust-features construction, and
serves the human-in-the-loop editing and labeling workflow.
"""

from .attack import (AttackConfig, Candidate, CandidateSet, InvarianceExample,
                     epsilon_star_estimate, gen_inv, l0_attack, linf_attack,
                     plausibility_score)
from .dataset_io import (Dataset, GalleryEntry, GrayImage, LabeledExample,
                         canonicality_score, filter_least_canonical,
                         load_dataset, parse_idx_images, parse_idx_labels,
                         write_idx_images, write_idx_labels)
from .transforms import (TransformGrid, TransformParams, align,
                         apply_transform, default_grid, enumerate_grid)

__version__ = "0.1.0"
