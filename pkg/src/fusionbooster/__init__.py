"""Two-stage enhancement of fused images: probe, boost, reassemble."""

__version__ = "0.1.0"

from .autodiff import Tensor4, grad_check
from .backbones import DegradeSpec, degrade, fuse_max, fuse_mean, fuse_pyramid, load_external_fused
from .booster import (
    AseModule,
    BoosterConfig,
    ProbeUnit,
    Triple,
    ablation_run,
    ase_forward,
    boost,
    booster_layer,
    degradation_study,
    probe_forward,
    train_ase,
    train_probe,
    train_source_ase,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .imaging import average_filter, base_detail_split, load_image, read_manifest, save_image, synth_pair
from .metrics import edge_intensity, entropy, evaluate, qabf, std_dev, vif
