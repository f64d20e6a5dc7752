"""Phoenix: federated training of small denoising diffusion models.

Simulates server/client rounds over non-IID data partitions, with optional
data-sharing warmup, personalization layers, and threshold filtering, plus a
sample-quality metrics suite (Frechet distance, inception-style score, k-NN
precision/recall, class-distribution divergence).
"""

__version__ = "0.1.0"
