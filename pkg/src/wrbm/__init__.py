"""Wasserstein-trained restricted Boltzmann machines on binary data.

Subpackages: dataset (ingestion and splits), rbm (model and sampling),
ot_sinkhorn (smoothed optimal transport), training (gradients and the
two-phase schedule), evaluation (AIS, KL, transport distance, PCA),
tasks (completion/denoising scoring), cli (pipeline commands).
"""

from . import dataset, evaluation, ot_sinkhorn, rbm, tasks, training

__all__ = ["dataset", "evaluation", "ot_sinkhorn", "rbm", "tasks", "training"]
__version__ = "0.1.0"
