"""Self-supervised ViT pre-training by masked depth reconstruction.

Masked RGB patches plus complementary sparse depth patches go through two
separate encoders, get fused into a full-grid token sequence (constant
mask tokens fill the gaps), and a decoder reconstructs the dense depth
map. The pre-trained color encoder is the artifact that downstream tasks
keep.

High-level use goes through the scikit-learn style estimators::

    from maskdepth import MaskedDepthPretrainer, PatchProbe

    pretrainer = MaskedDepthPretrainer(epochs=50).fit(frames)
    features = pretrainer.transform(frames)       # frozen patch tokens
    depth = pretrainer.predict(frames)            # reconstructed depth
    probe = PatchProbe(encoder=pretrainer).fit(frames, labels)
    miou = probe.score(val_frames, val_labels)

The ``maskdepth`` CLI wraps corpus generation, pre-training, probing,
ratio ablations, and qualitative reconstruction dumps.
"""

from .masking import MaskPlan, PatchGrid, patchify, positional_embedding, sample_mask_plan, unpatchify
from .data import RgbdFrame, SceneSpec, generate_corpus, label_patches, load_frame_dir, random_scene, render_frame
from .model import (
    FusedSequence,
    MaskedDepthModel,
    forward,
    init_model,
    joint_loss,
    normalized_patch_l2,
    parameter_count,
    reconstruct_depth,
)
from .train import RunMetrics, TrainConfig, load_checkpoint, lr_at, save_checkpoint, train
from .vit import ViTConfig
from .estimators import MaskedDepthPretrainer, PatchProbe

__version__ = "0.1.0"

__all__ = [
    "MaskPlan",
    "PatchGrid",
    "patchify",
    "unpatchify",
    "sample_mask_plan",
    "positional_embedding",
    "RgbdFrame",
    "SceneSpec",
    "random_scene",
    "render_frame",
    "label_patches",
    "generate_corpus",
    "load_frame_dir",
    "FusedSequence",
    "MaskedDepthModel",
    "ViTConfig",
    "init_model",
    "forward",
    "joint_loss",
    "normalized_patch_l2",
    "parameter_count",
    "reconstruct_depth",
    "TrainConfig",
    "RunMetrics",
    "train",
    "lr_at",
    "save_checkpoint",
    "load_checkpoint",
    "MaskedDepthPretrainer",
    "PatchProbe",
    "__version__",
]
