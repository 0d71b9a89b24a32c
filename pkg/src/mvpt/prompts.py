"""Per-layer learnable prompts, the frozen/learnable partition of a model
state, and parameter-budget auditing."""

from __future__ import annotations

import math

import numpy as np

from .backbone import BackboneConfig, ConfigError, ModelState

LEARNABLE_PREFIXES = ("prompt.", "ctx.", "head.")


class PromptSet:
    """One [p, d_i] prompt matrix per transformer layer, widths following the
    stage widths. Backed by tensors registered in the model state under the
    "prompt." prefix."""

    def __init__(self, state: ModelState, cfg: BackboneConfig, length: int):
        self.state = state
        self.cfg = cfg
        self.length = length

    def layer(self, i):
        return self.state[f"prompt.layer{i}"]

    def matrices(self):
        return [self.layer(i) for i in range(self.cfg.num_layers)]


def init_prompts(cfg: BackboneConfig, state: ModelState, length: int,
                 rng: np.random.Generator) -> PromptSet:
    """Create prompt parameters, uniform in [-a, a] with a = sqrt(6/(p + d))."""
    if length < 0:
        raise ConfigError(f"prompt length must be >= 0, got {length}")
    for i in range(cfg.num_layers):
        d = cfg.layer_dim(i)
        a = math.sqrt(6.0 / (length + d))
        state.add(f"prompt.layer{i}", rng.uniform(-a, a, size=(length, d)))
    return PromptSet(state, cfg, length)


def attach_tuning_params(cfg: BackboneConfig, state: ModelState, prompt_len: int,
                         rng: np.random.Generator):
    """Add prompts, view-context encodings, and the multi-view head to a
    pretrained state. The multi-view head starts as a copy of the single-view
    head; context vectors start at zero."""
    pset = init_prompts(cfg, state, prompt_len, rng)
    d0 = cfg.embed_dim
    state.add("ctx.mlo", np.zeros(d0))
    state.add("ctx.cc", np.zeros(d0))
    for name in [n for n in state.names() if n.startswith("head.single.")]:
        state.add("head.multi." + name[len("head.single."):], state[name].data.copy())
    return pset


def build_freeze_mask(state: ModelState, phase: str) -> dict:
    """phase "pretrain": everything learnable. phase "tune": only prompts,
    context encodings, and heads learnable; the backbone is frozen."""
    if phase not in ("pretrain", "tune"):
        raise ConfigError(f"unknown phase {phase!r}")
    mask = {}
    for name in state.params:
        if phase == "pretrain":
            mask[name] = False
        else:
            if name.startswith("backbone."):
                mask[name] = True
            elif name.startswith(LEARNABLE_PREFIXES):
                mask[name] = False
            else:
                raise ConfigError(f"tensor {name} not covered by the freeze rule")
    return mask


def trainable_fraction(state: ModelState, mask: dict) -> float:
    """Learnable parameter count over total parameter count under `mask`."""
    total = 0
    learnable = 0
    for name, t in state.params.items():
        if name not in mask:
            raise ConfigError(f"mask missing tensor {name}")
        total += t.size
        if not mask[name]:
            learnable += t.size
    return learnable / total if total else 0.0


def audit_report(state: ModelState, mask: dict) -> dict:
    """Per-tensor audit: name, element count, frozen flag, plus totals."""
    rows = [{"name": n, "elements": int(state[n].size), "frozen": bool(mask[n])}
            for n in state.names()]
    learnable = sum(r["elements"] for r in rows if not r["frozen"])
    total = sum(r["elements"] for r in rows)
    return {
        "tensors": rows,
        "learnable": learnable,
        "total": total,
        "trainable_fraction": learnable / total if total else 0.0,
    }


def full_scale_config() -> tuple[BackboneConfig, int]:
    """The full-scale configuration the audit prints (never trained here):
    1024x1024 input, Swin-B widths/depths, window 16, prompt length 5, linear
    heads over flattened final tokens."""
    cfg = BackboneConfig(
        image_size=1024,
        patch_size=4,
        embed_dim=128,
        depths=(2, 2, 18, 2),
        heads=(4, 8, 16, 32),
        window=16,
        num_classes=3,
        head_input="flattened",
        head_hidden=0,
    )
    return cfg, 5
