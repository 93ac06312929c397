"""The seven defenses, grouped by stage and output.

Stage: ``IT`` in-training, ``PT`` post-training.  Outputs: ``CM`` clean
model, ``CD`` sanitized dataset / detection verdict, ``TP`` trigger pattern.
"""

from .abl import abl_train
from .ac import ac_detect, sanitize
from .clp import channel_lipschitz, clp_defend, spectral_norm
from .config import (ABLConfig, ACConfig, CLPConfig, DefenseConfig, DefenseConfigError,
                     DetectionVerdict, FPConfig, FTConfig, NCConfig, StripConfig)
from .finetune import fp_defend, ft_defend, unit_activity
from .nc import NCOutcome, nc_detect, nc_mitigate, nc_reverse, nc_scan
from .strip import strip_detect, strip_scores

DEFENSES = {
    "strip": {"stage": "PT", "outputs": ("CD",), "modalities": ("image",)},
    "ac": {"stage": "PT", "outputs": ("CM", "CD"), "modalities": ("image", "text", "audio")},
    "ft": {"stage": "PT", "outputs": ("CM",), "modalities": ("image", "text", "audio")},
    "fp": {"stage": "PT", "outputs": ("CM",), "modalities": ("image", "text", "audio")},
    "abl": {"stage": "IT", "outputs": ("CM",), "modalities": ("image", "text", "audio")},
    "clp": {"stage": "PT", "outputs": ("CM",), "modalities": ("image", "text", "audio")},
    "nc": {"stage": "PT", "outputs": ("CM", "TP"), "modalities": ("image",)},
}


def applicable(defense: str, modality: str) -> bool:
    return modality in DEFENSES[defense]["modalities"]
