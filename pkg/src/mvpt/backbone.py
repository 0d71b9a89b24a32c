"""Small shifted-window transformer: patch embedding, windowed attention with
cyclic shift, patch merging, FFN blocks, and a linear classification head.

Token sequences are carried per view as `[B, n, d]` tensors plus a grid shape.
Prompt tokens, when present, ride alongside as a separate block: they augment
the key/value set of every attention window and themselves attend over the
full sequence.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ConfigError(ValueError):
    """Inconsistent backbone configuration or state."""


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 64
    patch_size: int = 4
    embed_dim: int = 32
    depths: tuple = (2, 2)
    heads: tuple = (2, 4)
    window: int = 4
    num_classes: int = 3
    mlp_ratio: int = 4
    head_input: str = "pooled"  # "pooled" | "flattened"
    head_hidden: int = 64       # hidden width of the MLP head; 0 = linear head
    use_relative_position_bias: bool = False

    def __post_init__(self):
        if self.head_hidden < 0:
            raise ConfigError(f"head_hidden must be >= 0, got {self.head_hidden}")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image size {self.image_size} not divisible by patch {self.patch_size}")
        if len(self.depths) != len(self.heads):
            raise ConfigError("depths and heads must have one entry per stage")
        for s, h in enumerate(self.heads):
            if self.stage_dim(s) % h != 0:
                raise ConfigError(f"stage {s} width {self.stage_dim(s)} not divisible by {h} heads")
        if self.head_input not in ("pooled", "flattened"):
            raise ConfigError(f"unknown head_input {self.head_input!r}")
        side = self.image_size // self.patch_size
        if side >> (self.num_stages - 1) << (self.num_stages - 1) != side:
            raise ConfigError("patch grid side must halve cleanly at every merge")

    @property
    def num_stages(self):
        return len(self.depths)

    @property
    def num_layers(self):
        return sum(self.depths)

    def stage_dim(self, stage):
        return self.embed_dim * (2 ** stage)

    def stage_grid(self, stage):
        side = self.image_size // self.patch_size // (2 ** stage)
        return (side, side)

    def stage_of_layer(self, layer):
        acc = 0
        for s, dep in enumerate(self.depths):
            acc += dep
            if layer < acc:
                return s
        raise ConfigError(f"layer {layer} out of range")

    def layer_dim(self, layer):
        return self.stage_dim(self.stage_of_layer(layer))

    @property
    def final_dim(self):
        return self.stage_dim(self.num_stages - 1)

    @property
    def final_tokens(self):
        gh, gw = self.stage_grid(self.num_stages - 1)
        return gh * gw

    def head_in_dim(self):
        if self.head_input == "pooled":
            return self.final_dim
        return self.final_tokens * self.final_dim


# ---- model state -------------------------------------------------------------


class ModelState:
    """Named parameter tensors plus a frozen/learnable partition."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.frozen: dict[str, bool] = {}

    def add(self, name, data, frozen=False):
        if name in self.params:
            raise ConfigError(f"duplicate parameter {name}")
        t = Tensor(np.asarray(data), requires_grad=not frozen, name=name)
        self.params[name] = t
        self.frozen[name] = frozen
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return sorted(self.params)

    def param_count(self, prefix=""):
        return sum(t.size for n, t in self.params.items() if n.startswith(prefix))

    def apply_mask(self, mask):
        """mask: dict name -> frozen(bool); must cover every tensor exactly."""
        if set(mask) != set(self.params):
            missing = set(self.params) ^ set(mask)
            raise ConfigError(f"freeze mask does not partition the state: {sorted(missing)}")
        for name, frz in mask.items():
            self.frozen[name] = frz
            self.params[name].requires_grad = not frz

    def zero_grads(self):
        for t in self.params.values():
            t.zero_grad()

    def snapshot(self, prefix=""):
        return {n: t.data.copy() for n, t in self.params.items() if n.startswith(prefix)}

    def digest(self, prefix=""):
        h = hashlib.sha256()
        for n in self.names():
            if n.startswith(prefix):
                h.update(n.encode())
                h.update(np.ascontiguousarray(self.params[n].data).tobytes())
        return h.hexdigest()


def _uniform(rng, shape, fan_in, fan_out):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator) -> ModelState:
    """Backbone + single-view head, all learnable (pretraining phase)."""
    st = ModelState()
    ps = cfg.patch_size
    d0 = cfg.embed_dim
    st.add("backbone.patch_embed.weight", _uniform(rng, (ps * ps, d0), ps * ps, d0))
    st.add("backbone.patch_embed.bias", np.zeros(d0))
    layer = 0
    for s, depth in enumerate(cfg.depths):
        d = cfg.stage_dim(s)
        hidden = d * cfg.mlp_ratio
        for _ in range(depth):
            p = f"backbone.layers.{layer}"
            st.add(f"{p}.norm1.gamma", np.ones(d))
            st.add(f"{p}.norm1.beta", np.zeros(d))
            st.add(f"{p}.attn.qkv.weight", _uniform(rng, (d, 3 * d), d, 3 * d))
            st.add(f"{p}.attn.qkv.bias", np.zeros(3 * d))
            st.add(f"{p}.attn.proj.weight", _uniform(rng, (d, d), d, d))
            st.add(f"{p}.attn.proj.bias", np.zeros(d))
            if cfg.use_relative_position_bias:
                w = cfg.window
                st.add(f"{p}.attn.rel_bias", np.zeros(((2 * w - 1) ** 2, cfg.heads[s])))
            st.add(f"{p}.norm2.gamma", np.ones(d))
            st.add(f"{p}.norm2.beta", np.zeros(d))
            st.add(f"{p}.mlp.fc1.weight", _uniform(rng, (d, hidden), d, hidden))
            st.add(f"{p}.mlp.fc1.bias", np.zeros(hidden))
            st.add(f"{p}.mlp.fc2.weight", _uniform(rng, (hidden, d), hidden, d))
            st.add(f"{p}.mlp.fc2.bias", np.zeros(d))
            layer += 1
        if s < cfg.num_stages - 1:
            st.add(f"backbone.merge.{s}.norm.gamma", np.ones(4 * d))
            st.add(f"backbone.merge.{s}.norm.beta", np.zeros(4 * d))
            st.add(f"backbone.merge.{s}.weight", _uniform(rng, (4 * d, 2 * d), 4 * d, 2 * d))
    df = cfg.final_dim
    st.add("backbone.norm.gamma", np.ones(df))
    st.add("backbone.norm.beta", np.zeros(df))
    _init_head(st, cfg, "single", rng)
    return st


def _init_head(st, cfg, which, rng):
    din, h, c = cfg.head_in_dim(), cfg.head_hidden, cfg.num_classes
    if h:
        st.add(f"head.{which}.fc1.weight", _uniform(rng, (din, h), din, h))
        st.add(f"head.{which}.fc1.bias", np.zeros(h))
        st.add(f"head.{which}.fc2.weight", _uniform(rng, (h, c), h, c))
        st.add(f"head.{which}.fc2.bias", np.zeros(c))
    else:
        st.add(f"head.{which}.weight", _uniform(rng, (din, c), din, c))
        st.add(f"head.{which}.bias", np.zeros(c))


def head_param_count(cfg: BackboneConfig):
    """Parameters of one classification head under the configuration."""
    din, h, c = cfg.head_in_dim(), cfg.head_hidden, cfg.num_classes
    if h:
        return din * h + h + h * c + c
    return din * c + c


def expected_param_count(cfg: BackboneConfig, prompt_len=0, with_multiview=False):
    """Closed-form parameter count from the configuration alone."""
    ps, d0, c = cfg.patch_size, cfg.embed_dim, cfg.num_classes
    total = ps * ps * d0 + d0
    for s, depth in enumerate(cfg.depths):
        d = cfg.stage_dim(s)
        hidden = d * cfg.mlp_ratio
        per_block = (2 * d) * 2                       # two LayerNorms
        per_block += d * 3 * d + 3 * d                # qkv
        per_block += d * d + d                        # proj
        per_block += d * hidden + hidden + hidden * d + d
        if cfg.use_relative_position_bias:
            per_block += (2 * cfg.window - 1) ** 2 * cfg.heads[s]
        total += depth * per_block
        if s < cfg.num_stages - 1:
            total += 8 * d + 4 * d * 2 * d            # merge norm + reduction
    total += 2 * cfg.final_dim                        # final norm
    total += head_param_count(cfg)                    # single-view head
    if prompt_len > 0:
        for layer in range(cfg.num_layers):
            total += prompt_len * cfg.layer_dim(layer)
    if with_multiview:
        total += head_param_count(cfg)                # multi-view head
        total += 2 * d0                               # two view-context vectors
    return total


# ---- token/window plumbing ---------------------------------------------------


def linear(x, w, b=None):
    out = ad.matmul(x, w)
    if b is not None:
        out = out + b
    return out


def patch_embed(images, cfg: BackboneConfig, state: ModelState):
    """[B, H, W] image batch -> [B, m, d] patch tokens."""
    images = images if isinstance(images, Tensor) else Tensor(images)
    B, H, W = images.shape
    if H != cfg.image_size or W != cfg.image_size:
        raise ConfigError(f"image {H}x{W} does not match configured {cfg.image_size}")
    ps = cfg.patch_size
    gh, gw = H // ps, W // ps
    x = ad.reshape(images, (B, gh, ps, gw, ps))
    x = ad.transpose(x, (0, 1, 3, 2, 4))
    x = ad.reshape(x, (B, gh * gw, ps * ps))
    return linear(x, state["backbone.patch_embed.weight"], state["backbone.patch_embed.bias"])


def window_partition(x, window):
    """[B, gh, gw, D] -> ([B, nW, window^2, D], valid [nW, window^2], (Gh, Gw)).

    Grids not divisible by the window are padded with zero tokens; `valid` is
    False on pad slots so attention can mask them out. `valid` is None when no
    padding was needed.
    """
    B, gh, gw, D = x.shape
    Gh = (gh + window - 1) // window * window
    Gw = (gw + window - 1) // window * window
    valid = None
    if (Gh, Gw) != (gh, gw):
        if Gw > gw:
            x = ad.concat([x, ad.zeros((B, gh, Gw - gw, D))], axis=2)
        if Gh > gh:
            x = ad.concat([x, ad.zeros((B, Gh - gh, Gw, D))], axis=1)
        vg = np.zeros((Gh, Gw), dtype=bool)
        vg[:gh, :gw] = True
        valid = _partition_np(vg[None, :, :, None], window)[0, :, :, 0]
    nh, nw = Gh // window, Gw // window
    x = ad.reshape(x, (B, nh, window, nw, window, D))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    x = ad.reshape(x, (B, nh * nw, window * window, D))
    return x, valid, (Gh, Gw)


def window_reverse(wins, window, padded_grid, grid):
    """Inverse of `window_partition`, cropping any pad back off."""
    Gh, Gw = padded_grid
    gh, gw = grid
    B, nW, _, D = wins.shape
    nh, nw = Gh // window, Gw // window
    x = ad.reshape(wins, (B, nh, nw, window, window, D))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    x = ad.reshape(x, (B, Gh, Gw, D))
    if (Gh, Gw) != (gh, gw):
        x = x[:, :gh, :gw, :]
    return x


def _partition_np(arr, window):
    """numpy twin of window_partition for masks/labels (no padding)."""
    B, Gh, Gw, D = arr.shape
    nh, nw = Gh // window, Gw // window
    arr = arr.reshape(B, nh, window, nw, window, D)
    arr = arr.transpose(0, 1, 3, 2, 4, 5)
    return arr.reshape(B, nh * nw, window * window, D)


@lru_cache(maxsize=64)
def shift_window_mask(gh, gw, window, shift):
    """Additive attention mask [nW, ws^2, ws^2] for a (possibly padded,
    possibly shifted) grid; returns None when nothing needs masking."""
    Gh = (gh + window - 1) // window * window
    Gw = (gw + window - 1) // window * window
    need_pad = (Gh, Gw) != (gh, gw)
    if shift == 0 and not need_pad:
        return None
    labels = np.zeros((Gh, Gw), dtype=np.int64)
    if shift > 0:
        cnt = 0
        bounds = (slice(0, Gh - window), slice(Gh - window, Gh - shift), slice(Gh - shift, Gh))
        cbounds = (slice(0, Gw - window), slice(Gw - window, Gw - shift), slice(Gw - shift, Gw))
        for hs in bounds:
            for ws in cbounds:
                labels[hs, ws] = cnt
                cnt += 1
    valid = np.zeros((Gh, Gw), dtype=bool)
    valid[:gh, :gw] = True
    if shift > 0:
        valid = np.roll(valid, (-shift, -shift), axis=(0, 1))
    lab_w = _partition_np(labels[None, :, :, None], window)[0, :, :, 0]
    val_w = _partition_np(valid[None, :, :, None], window)[0, :, :, 0]
    ok = (lab_w[:, :, None] == lab_w[:, None, :]) & val_w[:, :, None] & val_w[:, None, :]
    return np.where(ok, 0.0, -1e9)


@lru_cache(maxsize=16)
def _rel_pos_index(window):
    """Flat index into the (2w-1)^2 bias table for every in-window token pair."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij"))
    coords = coords.reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + window - 1
    return rel[0] * (2 * window - 1) + rel[1]


# ---- transformer block -------------------------------------------------------


def _split_qkv(x, w, b, heads):
    """LN'd tokens [B, n, d] -> (q, k, v) each [B, n, heads, hd]."""
    B, n, d = x.shape
    qkv = linear(x, w, b)
    qkv = ad.reshape(qkv, (B, n, 3, heads, d // heads))
    q = qkv[:, :, 0]
    k = qkv[:, :, 1]
    v = qkv[:, :, 2]
    return q, k, v


def block_forward(views, prompts, layer, cfg: BackboneConfig, state: ModelState,
                  mask_prompt_kv=False):
    """One transformer block over per-view token grids plus optional prompts.

    views: list of (tag, tokens [B, m, d], grid); prompts: Tensor [B, q, d] or
    None. Patch tokens attend within (shifted) windows of their own view, with
    all prompt tokens appended to every window's keys/values; prompt tokens
    attend over the whole sequence. Returns updated (views, prompts).

    mask_prompt_kv removes the prompt keys/values from the patch-token
    attention (their contribution is zeroed out); patch-token outputs must then
    match the prompt-free forward, which pins down that prompts influence patch
    tokens only through the appended key/value slots.
    """
    stage = cfg.stage_of_layer(layer)
    block_in_stage = layer - sum(cfg.depths[:stage])
    shift = 0 if block_in_stage % 2 == 0 else cfg.window // 2
    heads = cfg.heads[stage]
    d = cfg.stage_dim(stage)
    hd = d // heads
    scale = 1.0 / math.sqrt(hd)
    p = f"backbone.layers.{layer}"
    n1g, n1b = state[f"{p}.norm1.gamma"], state[f"{p}.norm1.beta"]
    qkv_w, qkv_b = state[f"{p}.attn.qkv.weight"], state[f"{p}.attn.qkv.bias"]

    view_qkv = []
    for tag, tokens, grid in views:
        y = ad.layer_norm(tokens, n1g, n1b)
        view_qkv.append(_split_qkv(y, qkv_w, qkv_b, heads))
    if prompts is not None:
        yp = ad.layer_norm(prompts, n1g, n1b)
        pq, pk, pv = _split_qkv(yp, qkv_w, qkv_b, heads)
        qn = prompts.shape[1]
    else:
        pq = pk = pv = None
        qn = 0

    attn_out_views = []
    for (tag, tokens, grid), (q, k, v) in zip(views, view_qkv):
        B, m, _ = tokens.shape
        gh, gw = grid
        wdw = cfg.window
        qg = ad.reshape(q, (B, gh, gw, heads * hd))
        kg = ad.reshape(k, (B, gh, gw, heads * hd))
        vg = ad.reshape(v, (B, gh, gw, heads * hd))
        if shift > 0:
            qg = ad.roll(qg, (-shift, -shift), axis=(1, 2))
            kg = ad.roll(kg, (-shift, -shift), axis=(1, 2))
            vg = ad.roll(vg, (-shift, -shift), axis=(1, 2))
        qw, _, pg = window_partition(qg, wdw)
        kw, _, _ = window_partition(kg, wdw)
        vw, _, _ = window_partition(vg, wdw)
        nW = qw.shape[1]
        ws2 = wdw * wdw
        # [B, nW, heads, ws2, hd]
        qw = ad.transpose(ad.reshape(qw, (B, nW, ws2, heads, hd)), (0, 1, 3, 2, 4))
        kw = ad.transpose(ad.reshape(kw, (B, nW, ws2, heads, hd)), (0, 1, 3, 2, 4))
        vw = ad.transpose(ad.reshape(vw, (B, nW, ws2, heads, hd)), (0, 1, 3, 2, 4))
        if qn:
            kp = ad.broadcast_to(ad.reshape(ad.transpose(pk, (0, 2, 1, 3)),
                                            (B, 1, heads, qn, hd)), (B, nW, heads, qn, hd))
            vp = ad.broadcast_to(ad.reshape(ad.transpose(pv, (0, 2, 1, 3)),
                                            (B, 1, heads, qn, hd)), (B, nW, heads, qn, hd))
            kw = ad.concat([kw, kp], axis=3)
            vw = ad.concat([vw, vp], axis=3)
        logits = ad.mul(ad.matmul(qw, ad.transpose(kw, (0, 1, 2, 4, 3))), scale)
        mask = shift_window_mask(gh, gw, wdw, shift)
        if mask is not None or (qn and mask_prompt_kv):
            full = np.zeros((1, nW, 1, ws2, ws2 + qn))
            if mask is not None:
                full[:, :, :, :, :ws2] = mask[None, :, None]
            if qn and mask_prompt_kv:
                full[:, :, :, :, ws2:] = -1e30
            logits = logits + Tensor(full)
        if cfg.use_relative_position_bias:
            table = state[f"{p}.attn.rel_bias"]
            idx = _rel_pos_index(wdw)
            bias = ad.transpose(table[idx.reshape(-1)], (1, 0))  # [heads, ws2*ws2]
            bias = ad.reshape(bias, (1, 1, heads, ws2, ws2))
            if qn:
                bias = ad.concat([bias, ad.zeros((1, 1, heads, ws2, qn))], axis=4)
            logits = logits + bias
        attn = ad.softmax_temp(logits, 1.0, axis=-1)
        out = ad.matmul(attn, vw)  # [B, nW, heads, ws2, hd]
        out = ad.reshape(ad.transpose(out, (0, 1, 3, 2, 4)), (B, nW, ws2, d))
        og = window_reverse(out, wdw, pg, (gh, gw))
        if shift > 0:
            og = ad.roll(og, (shift, shift), axis=(1, 2))
        attn_out_views.append(ad.reshape(og, (B, m, d)))

    attn_out_prompt = None
    if qn:
        B = prompts.shape[0]
        all_k = ad.concat([pk] + [k for (q, k, v) in view_qkv], axis=1)
        all_v = ad.concat([pv] + [v for (q, k, v) in view_qkv], axis=1)
        qh = ad.transpose(pq, (0, 2, 1, 3))      # [B, heads, qn, hd]
        kh = ad.transpose(all_k, (0, 2, 1, 3))
        vh = ad.transpose(all_v, (0, 2, 1, 3))
        logits = ad.mul(ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))), scale)
        attn = ad.softmax_temp(logits, 1.0, axis=-1)
        out = ad.matmul(attn, vh)                # [B, heads, qn, hd]
        attn_out_prompt = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (B, qn, d))

    proj_w, proj_b = state[f"{p}.attn.proj.weight"], state[f"{p}.attn.proj.bias"]
    n2g, n2b = state[f"{p}.norm2.gamma"], state[f"{p}.norm2.beta"]
    fc1_w, fc1_b = state[f"{p}.mlp.fc1.weight"], state[f"{p}.mlp.fc1.bias"]
    fc2_w, fc2_b = state[f"{p}.mlp.fc2.weight"], state[f"{p}.mlp.fc2.bias"]

    def finish(x, attn_out):
        x = x + linear(attn_out, proj_w, proj_b)
        h = ad.layer_norm(x, n2g, n2b)
        h = linear(ad.gelu(linear(h, fc1_w, fc1_b)), fc2_w, fc2_b)
        return x + h

    new_views = [(tag, finish(tokens, out), grid)
                 for (tag, tokens, grid), out in zip(views, attn_out_views)]
    new_prompts = finish(prompts, attn_out_prompt) if qn else None
    return new_views, new_prompts


def patch_merging(tokens, grid, cfg: BackboneConfig, state: ModelState, stage):
    """2x2 neighborhood concat + LayerNorm + linear reduction to double width."""
    B, m, d = tokens.shape
    gh, gw = grid
    if gh % 2 or gw % 2:
        raise ConfigError(f"patch merging needs even grid sides, got {gh}x{gw}")
    x = ad.reshape(tokens, (B, gh, gw, d))
    x0 = x[:, 0::2, 0::2, :]
    x1 = x[:, 1::2, 0::2, :]
    x2 = x[:, 0::2, 1::2, :]
    x3 = x[:, 1::2, 1::2, :]
    x = ad.concat([x0, x1, x2, x3], axis=-1)
    x = ad.reshape(x, (B, (gh // 2) * (gw // 2), 4 * d))
    x = ad.layer_norm(x, state[f"backbone.merge.{stage}.norm.gamma"],
                      state[f"backbone.merge.{stage}.norm.beta"])
    x = ad.matmul(x, state[f"backbone.merge.{stage}.weight"])
    return x, (gh // 2, gw // 2)


# ---- full forwards -----------------------------------------------------------


def _check_state(cfg, state):
    need = "backbone.patch_embed.weight"
    if need not in state:
        raise ConfigError(f"state missing tensor {need}")
    w = state[need]
    exp = (cfg.patch_size ** 2, cfg.embed_dim)
    if w.shape != exp:
        raise ConfigError(f"{need}: state shape {w.shape} vs config {exp}")


def run_stages(views, cfg: BackboneConfig, state: ModelState,
               prompts=None, prompt_mode="deep", ctx=None):
    """Run all transformer stages over per-view patch tokens.

    views: list of (tag, tokens [B, m, d0], grid). `prompts` is a PromptSet
    (see prompts module) or None. prompt_mode "deep" re-injects fresh prompt
    parameters before every block; "carry" injects at the input and at each
    patch-merging boundary, letting prompt states flow through a stage (the
    cross-view channel of the fused pass). `ctx` maps view tag -> Tensor[d0]
    added to every token of that view, including its prompt slot, at the input.
    """
    B = views[0][1].shape[0]
    if ctx is not None:
        views = [(tag, tokens + ctx[tag], grid) for tag, tokens, grid in views]
    p = prompts.length if prompts is not None else 0

    def fresh_prompts(layer, with_ctx):
        mats = []
        for tag, _, _ in views:
            mat = ad.broadcast_to(ad.reshape(prompts.layer(layer), (1, p, cfg.layer_dim(layer))),
                                  (B, p, cfg.layer_dim(layer)))
            if with_ctx and ctx is not None:
                mat = mat + ctx[tag]
            mats.append(mat)
        return ad.concat(mats, axis=1) if len(mats) > 1 else mats[0]

    prompt_state = fresh_prompts(0, with_ctx=True) if p else None
    layer = 0
    for s in range(cfg.num_stages):
        for b in range(cfg.depths[s]):
            if p and layer > 0:
                if prompt_mode == "deep":
                    prompt_state = fresh_prompts(layer, with_ctx=False)
                elif prompt_mode == "carry" and b == 0:
                    prompt_state = fresh_prompts(layer, with_ctx=False)
            views, prompt_state = block_forward(views, prompt_state, layer, cfg, state)
            layer += 1
        if s < cfg.num_stages - 1:
            views = [(tag,) + patch_merging(tokens, grid, cfg, state, s)
                     for tag, tokens, grid in views]
    return views


def head_feature(views, cfg: BackboneConfig, state: ModelState):
    """Final LayerNorm then pool/flatten patch tokens into the head input."""
    normed = [ad.layer_norm(t, state["backbone.norm.gamma"], state["backbone.norm.beta"])
              for _, t, _ in views]
    if cfg.head_input == "pooled":
        allt = ad.concat(normed, axis=1) if len(normed) > 1 else normed[0]
        return ad.tmean(allt, axis=1)
    flats = [ad.reshape(t, (t.shape[0], t.shape[1] * t.shape[2])) for t in normed]
    out = flats[0]
    for f in flats[1:]:
        out = out + f
    return ad.mul(out, 1.0 / len(flats))


def apply_head(feature, state: ModelState, which="single"):
    if f"head.{which}.fc1.weight" in state:
        mid = ad.gelu(linear(feature, state[f"head.{which}.fc1.weight"],
                             state[f"head.{which}.fc1.bias"]))
        return linear(mid, state[f"head.{which}.fc2.weight"],
                      state[f"head.{which}.fc2.bias"])
    return linear(feature, state[f"head.{which}.weight"], state[f"head.{which}.bias"])


def forward_backbone(images, cfg: BackboneConfig, state: ModelState,
                     prompts=None, ctx=None, view_tag="mlo", head="single"):
    """Single-view forward: (final per-view tokens, logits [B, num_classes])."""
    _check_state(cfg, state)
    tokens = patch_embed(images, cfg, state)
    grid = cfg.stage_grid(0)
    views = [(view_tag, tokens, grid)]
    ctx_map = None
    if ctx is not None:
        ctx_map = {view_tag: ctx}
    views = run_stages(views, cfg, state, prompts=prompts, prompt_mode="deep", ctx=ctx_map)
    logits = apply_head(head_feature(views, cfg, state), state, which=head)
    return views, logits
