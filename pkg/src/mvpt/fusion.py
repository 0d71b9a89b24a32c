"""Two-view fusion, the single-view and multi-view prompted forwards, and the
four-term tuning objective with asymmetric mutual distillation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from .autodiff import Tensor
from .backbone import BackboneConfig, ConfigError, ModelState

VIEW_TAGS = ("mlo", "cc")


class FusionError(ValueError):
    """View grids or widths that cannot be fused."""


@dataclass
class LossBundle:
    l_mlo: Tensor
    l_cc: Tensor
    l_mv: Tensor
    l_md: Tensor
    l_overall: Tensor
    tau: float
    lam: float

    def values(self):
        return {k: getattr(self, k).item()
                for k in ("l_mlo", "l_cc", "l_mv", "l_md", "l_overall")}


def view_context(state: ModelState):
    return {"mlo": state["ctx.mlo"], "cc": state["ctx.cc"]}


def forward_singleview(images, view_tag, cfg: BackboneConfig, state: ModelState,
                       prompts=None, use_ctx=True):
    """Prompted single-view forward with the view's context encoding added.
    Deep prompting: fresh prompt parameters replace the prompt slot before
    every layer. Returns logits [B, num_classes] from the shared single head."""
    if view_tag not in VIEW_TAGS:
        raise ConfigError(f"unknown view tag {view_tag!r}")
    ctx = state[f"ctx.{view_tag}"] if (use_ctx and f"ctx.{view_tag}" in state) else None
    _, logits = bb.forward_backbone(images, cfg, state, prompts=prompts, ctx=ctx,
                                    view_tag=view_tag, head="single")
    return logits


def fuse_views(images_mlo, images_cc, cfg: BackboneConfig, state: ModelState):
    """Embed both views into per-view token sequences ready for the joint
    pass. Raises FusionError on grid/width mismatch."""
    t_mlo = bb.patch_embed(images_mlo, cfg, state)
    t_cc = bb.patch_embed(images_cc, cfg, state)
    if t_mlo.shape != t_cc.shape:
        raise FusionError(f"view token shapes differ: {t_mlo.shape} vs {t_cc.shape}")
    grid = cfg.stage_grid(0)
    return [("mlo", t_mlo, grid), ("cc", t_cc, grid)]


def forward_multiview(images_mlo, images_cc, cfg: BackboneConfig, state: ModelState,
                      prompts=None, use_ctx=True):
    """Joint two-view forward: [P_0, mlo tokens; P_0, cc tokens] plus per-view
    context encodings. Prompt tokens are carried through each stage (re-set
    from fresh parameters at patch-merging boundaries), acting as global
    keys/values for every window of both views — the cross-view channel.
    Returns logits from the multi-view head."""
    views = fuse_views(images_mlo, images_cc, cfg, state)
    ctx = view_context(state) if (use_ctx and "ctx.mlo" in state) else None
    views = bb.run_stages(views, cfg, state, prompts=prompts, prompt_mode="carry", ctx=ctx)
    return bb.apply_head(bb.head_feature(views, cfg, state), state, which="multi")


# ---- losses ------------------------------------------------------------------


def l_kd(t, s, tau):
    """KL between temperature-softened distributions, teacher logits first.
    Batched logits are reduced by the mean over the batch."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if t.shape != s.shape:
        raise ad.DimensionError(f"l_kd shape mismatch: {t.shape} vs {s.shape}")
    per = ad.kl_div(ad.softmax_temp(t, tau), ad.softmax_temp(s, tau))
    return ad.tmean(per) if per.ndim else per


def l_md(y_mlo, y_cc, y_mv, tau):
    """Mutual distillation: (1/tau^2)[L_kd(detach(z), y_mv) + L_kd(detach(y_mv), z)]
    with z the mean of the two single-view logit vectors."""
    z = ad.mul(y_mlo + y_cc, 0.5)
    term1 = l_kd(z.detach(), y_mv, tau)
    term2 = l_kd(y_mv.detach(), z, tau)
    return ad.mul(term1 + term2, 1.0 / (tau * tau))


def loss_overall(y_mlo, y_cc, y_mv, labels, tau, lam) -> LossBundle:
    """Three cross-entropies plus the weighted mutual-distillation term."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    labels = np.asarray(labels, dtype=np.int64)
    ce_mlo = ad.cross_entropy(y_mlo, labels)
    ce_cc = ad.cross_entropy(y_cc, labels)
    ce_mv = ad.cross_entropy(y_mv, labels)
    md = l_md(y_mlo, y_cc, y_mv, tau)
    overall = ce_mv + ce_mlo + ce_cc + ad.mul(md, lam)
    return LossBundle(l_mlo=ce_mlo, l_cc=ce_cc, l_mv=ce_mv, l_md=md,
                      l_overall=overall, tau=tau, lam=lam)


def tuning_losses(batch_mlo, batch_cc, labels, cfg, state, prompts, tau, lam):
    """All three forwards plus the combined objective for one tuning batch."""
    y_mlo = forward_singleview(batch_mlo, "mlo", cfg, state, prompts=prompts)
    y_cc = forward_singleview(batch_cc, "cc", cfg, state, prompts=prompts)
    y_mv = forward_multiview(batch_mlo, batch_cc, cfg, state, prompts=prompts)
    return loss_overall(y_mlo, y_cc, y_mv, labels, tau, lam)
