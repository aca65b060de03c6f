"""Self-supervised biomarker proposal pipeline for retinal OCT B-scans.

Pipeline stages: synthetic cohort generation, contrastive pretraining,
feature extraction, cluster discovery with statistics, attribution maps,
a prognostic benchmark, and a human-in-the-loop cluster review service.
"""

__version__ = "0.1.0"
