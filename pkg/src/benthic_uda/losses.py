"""SymmNet loss terms over the dual-head classifier outputs.

All functions take batched probability tensors. ``p_st`` has ``2K`` columns:
the first ``K`` belong to the source head, the last ``K`` to the target head.
Class labels are 0-based. Logs are natural and computed as
``log(max(x, EPS_P))``; every loss is a batch mean.
"""

from __future__ import annotations

import math
import warnings
from typing import NamedTuple, Optional

import torch

EPS_P = 1e-8


class DualHeadOutput(NamedTuple):
    p_s: torch.Tensor   # (n, K) softmax of the source head
    p_t: torch.Tensor   # (n, K) softmax of the target head
    p_st: torch.Tensor  # (n, 2K) softmax over the concatenated logits

    @property
    def num_classes(self) -> int:
        return self.p_s.shape[-1]


class Objectives(NamedTuple):
    classifier: torch.Tensor
    extractor: Optional[torch.Tensor]
    terms: dict


def _log(x: torch.Tensor) -> torch.Tensor:
    return torch.log(x.clamp_min(EPS_P))


def _nonempty(t: torch.Tensor, what: str) -> None:
    if t.shape[0] == 0:
        raise ValueError(f"{what} batch is empty")


def _block_sums(p_st: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    K = p_st.shape[-1] // 2
    return p_st[:, :K].sum(dim=1), p_st[:, K:].sum(dim=1)


def classification_loss(out: DualHeadOutput, labels: torch.Tensor, head: str = "source") -> torch.Tensor:
    """Cross-entropy of one head on labelled source samples."""
    if head not in ("source", "target"):
        raise ValueError(f"head must be 'source' or 'target', got {head!r}")
    probs = out.p_s if head == "source" else out.p_t
    _nonempty(probs, "labelled")
    picked = probs.gather(1, labels.long().view(-1, 1)).squeeze(1)
    return -_log(picked).mean()


def domain_discrimination_loss(src: DualHeadOutput, tgt: DualHeadOutput) -> torch.Tensor:
    """Two-way cross-entropy training the joint classifier to tell domains apart.

    Source samples should put their mass in the source block, target samples
    in the target block.
    """
    _nonempty(src.p_st, "source")
    _nonempty(tgt.p_st, "target")
    src_block, _ = _block_sums(src.p_st)
    _, tgt_block = _block_sums(tgt.p_st)
    return -_log(tgt_block).mean() - _log(src_block).mean()


def class_confusion_loss(src: DualHeadOutput, labels: torch.Tensor) -> torch.Tensor:
    """Pushes each labelled sample's mass to split evenly between its class in both blocks."""
    _nonempty(src.p_st, "source")
    K = src.num_classes
    idx = labels.long().view(-1, 1)
    in_src = src.p_st.gather(1, idx).squeeze(1)
    in_tgt = src.p_st.gather(1, idx + K).squeeze(1)
    return -0.5 * _log(in_tgt).mean() - 0.5 * _log(in_src).mean()


def domain_confusion_loss(tgt: DualHeadOutput) -> torch.Tensor:
    _nonempty(tgt.p_st, "target")
    src_block, tgt_block = _block_sums(tgt.p_st)
    return -0.5 * _log(tgt_block).mean() - 0.5 * _log(src_block).mean()


def combined_class_probs(p_st: torch.Tensor) -> torch.Tensor:
    """``q_k = p_st[k] + p_st[K + k]``."""
    K = p_st.shape[-1] // 2
    return p_st[..., :K] + p_st[..., K:]


def entropy_minimization_loss(tgt: DualHeadOutput) -> torch.Tensor:
    """Mean Shannon entropy of the combined class distribution ``q`` on target samples."""
    _nonempty(tgt.p_st, "target")
    q = combined_class_probs(tgt.p_st)
    return -(q * _log(q)).sum(dim=1).mean()


def lambda_schedule(progress: float) -> float:
    """Ramp ``2 / (1 + exp(-10 p)) - 1`` weighting the adversarial terms."""
    if not 0.0 <= progress <= 1.0:
        warnings.warn(f"training progress {progress} outside [0, 1]; clamping", stacklevel=2)
        progress = min(max(progress, 0.0), 1.0)
    return 2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0


def source_only_objective(src: DualHeadOutput, labels: torch.Tensor) -> tuple[torch.Tensor, dict]:
    """Ablation objective without SymmNet: both heads' cross-entropy plus class confusion."""
    terms = {
        "cls_s": classification_loss(src, labels, "source"),
        "cls_t": classification_loss(src, labels, "target"),
        "class_conf": class_confusion_loss(src, labels),
    }
    return terms["cls_s"] + terms["cls_t"] + terms["class_conf"], terms


def combine_objectives(src: DualHeadOutput, labels: torch.Tensor, tgt: Optional[DualHeadOutput],
                       lam: float, use_symmnet: bool = True) -> Objectives:
    """Build the classifier-side and extractor-side objectives.

    The classifier objective is minimized over the heads only and the
    extractor objective over the feature extractor only. With
    ``use_symmnet=False`` the target batch is ignored, ``classifier`` holds
    the single joint objective and ``extractor`` is None.
    """
    if not use_symmnet:
        joint, terms = source_only_objective(src, labels)
        return Objectives(joint, None, terms)
    if tgt is None:
        raise ValueError("SymmNet objectives need a target batch")
    terms = {
        "cls_s": classification_loss(src, labels, "source"),
        "cls_t": classification_loss(src, labels, "target"),
        "dom_disc": domain_discrimination_loss(src, tgt),
        "class_conf": class_confusion_loss(src, labels),
        "dom_conf": domain_confusion_loss(tgt),
        "entropy": entropy_minimization_loss(tgt),
    }
    classifier = terms["cls_s"] + terms["cls_t"] + terms["dom_disc"]
    extractor = terms["class_conf"] + lam * (terms["dom_conf"] + terms["entropy"])
    return Objectives(classifier, extractor, terms)
