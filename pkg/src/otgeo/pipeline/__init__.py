"""Orchestration layer: configs, manifests, synthetic data, drag
aggregation, the embed/train/eval commands and the convergence harness.
"""

from .config import PipelineConfig
from .manifest import DatasetManifest, ManifestEntry, load_manifest
from .drag import cd_loss, drag_coefficient
from .synth import fibonacci_sphere, synth_dataset
from .run import (EmbedResult, RunReport, cmd_embed, cmd_eval, cmd_train,
                  peak_rss_mb, worker_count)
from .convergence import convergence_study

__all__ = [name for name in dir() if not name.startswith("_")]
