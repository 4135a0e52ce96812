"""Self-supervised fine-grained cluster labels and semantic visual localization.

Modules
-------
model        core data types and persistence
clustering   feature sampling, PCA whitening, k-means label creation
training     losses, toy segmentation head, training loop with re-clustering
inference    patch-blended dense prediction
geometry     projection, P3P and RANSAC
localization SSMC, GSMC and particle-filter localization
evaluation   NMI, contingency tables, recall and inlier CDFs
simulation   synthetic street scenes, trajectories, observations, benchmark
cli          command-line entry point
"""

__version__ = "0.1.0"
