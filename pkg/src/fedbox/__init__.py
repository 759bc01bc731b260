"""Desk-scale simulator of personalized federated learning over a sealed model.

A frozen classifier is pretrained on a source task and sealed behind a
logit-only, query-counted surface. Clients then adapt to their own label-shifted
tasks in three phases: unsupervised auto-encoder pretraining, zeroth-order
input surgery over a low-dimensional embedding (with a private per-client
component), and per-client linear remapping of the sealed model's logits.
"""

from .config import RunConfig, make_config
from .harness import ablation_suite, run, sweep, zero_shot_only

__all__ = ["RunConfig", "make_config", "run", "ablation_suite", "sweep", "zero_shot_only"]
