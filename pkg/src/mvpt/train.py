"""Two-stage training: single-view pretraining and multi-view prompt tuning,
plus batched inference for evaluation. Every random draw flows from one
seeded generator per run, so fixed seeds give bit-identical artifacts."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from . import fusion as fu
from . import prompts as pr
from .config import RunConfig
from .data import augment
from .optim import SGD, AdamW, warmup_cosine_lr


class NumericError(RuntimeError):
    """Training hit a non-finite loss."""


def _augment_batch(images, rng, enabled):
    if not enabled:
        return images
    return np.stack([augment(img, rng) for img in images])


def pretrain_step(batch_images, batch_labels, cfg, state, optimizer):
    """One full-model update from a single-view batch; returns the loss."""
    state.zero_grads()
    _, logits = bb.forward_backbone(batch_images, cfg, state)
    loss = ad.cross_entropy(logits, batch_labels)
    val = loss.item()
    if not np.isfinite(val):
        raise NumericError(f"non-finite pretraining loss {val}")
    loss.backward()
    optimizer.step()
    return val


def tune_step(batch_mlo, batch_cc, batch_labels, cfg, state, pset, tau, lam, optimizer):
    """One prompt-tuning update from a batch of view pairs; returns the
    LossBundle. Only learnable tensors move; the backbone stays frozen."""
    state.zero_grads()
    bundle = fu.tuning_losses(batch_mlo, batch_cc, batch_labels, cfg, state,
                              pset, tau, lam)
    val = bundle.l_overall.item()
    if not np.isfinite(val):
        raise NumericError(f"non-finite tuning loss {val}")
    bundle.l_overall.backward()
    optimizer.step()
    return bundle


def pretrain(run: RunConfig, mlo, cc, labels):
    """Stage 1: train the backbone + single-view head on individual views.
    Returns (state, log)."""
    cfg = run.backbone()
    rng = np.random.default_rng(run.seed)
    state = bb.init_backbone(cfg, rng)
    images = np.concatenate([mlo, cc], axis=0)
    lab = np.concatenate([labels, labels], axis=0)
    n = len(images)
    steps_per_epoch = max(1, n // run.pretrain_batch)
    total_steps = run.pretrain_epochs * steps_per_epoch
    warmup_steps = run.pretrain_warmup_epochs * steps_per_epoch
    opt = AdamW(state.params.items(), lr=run.pretrain_lr,
                weight_decay=run.pretrain_weight_decay)
    log = {"phase": "pretrain", "epochs": []}
    step = 0
    for epoch in range(run.pretrain_epochs):
        order = rng.permutation(n)
        losses = []
        for b in range(steps_per_epoch):
            idx = order[b * run.pretrain_batch:(b + 1) * run.pretrain_batch]
            batch = _augment_batch(images[idx], rng, run.augment)
            opt.lr = warmup_cosine_lr(step, total_steps, run.pretrain_lr, warmup_steps)
            losses.append(pretrain_step(batch, lab[idx], cfg, state, opt))
            step += 1
        log["epochs"].append({"epoch": epoch, "loss": float(np.mean(losses)),
                              "lr": opt.lr})
    return state, log


def tune(run: RunConfig, state: bb.ModelState, mlo, cc, labels):
    """Stage 2: freeze the backbone, attach prompts/context/multi-view head,
    and optimize the four-term objective. Returns (state, pset, log)."""
    cfg = run.backbone()
    rng = np.random.default_rng(run.seed + 1)
    pset = pr.attach_tuning_params(cfg, state, run.prompt_len, rng)
    state.apply_mask(pr.build_freeze_mask(state, "tune"))
    n = len(labels)
    steps_per_epoch = max(1, n // run.tune_batch)
    total_steps = run.tune_epochs * steps_per_epoch
    warmup_steps = run.tune_warmup_epochs * steps_per_epoch
    if run.tune_optimizer == "sgd":
        opt = SGD(state.params.items(), lr=run.tune_lr,
                  momentum=run.tune_momentum,
                  weight_decay=run.tune_weight_decay)
    else:
        opt = AdamW(state.params.items(), lr=run.tune_lr,
                    weight_decay=run.tune_weight_decay)
    log = {"phase": "tune", "epochs": []}
    step = 0
    for epoch in range(run.tune_epochs):
        order = rng.permutation(n)
        losses = []
        for b in range(steps_per_epoch):
            idx = order[b * run.tune_batch:(b + 1) * run.tune_batch]
            ba = _augment_batch(mlo[idx], rng, run.augment)
            bc = _augment_batch(cc[idx], rng, run.augment)
            opt.lr = warmup_cosine_lr(step, total_steps, run.tune_lr, warmup_steps)
            bundle = tune_step(ba, bc, labels[idx], cfg, state, pset,
                               run.tau, run.lam, opt)
            losses.append(bundle.l_overall.item())
            step += 1
        log["epochs"].append({"epoch": epoch, "loss": float(np.mean(losses)),
                              "lr": opt.lr})
    return state, pset, log


def _softmax_np(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict(run: RunConfig, state: bb.ModelState, mlo, cc, batch=64):
    """Inference on view pairs. Returns logit arrays for mlo, cc, their mean
    (score fusion), and — when the state carries tuning parameters — the
    multi-view output; otherwise multi_view falls back to the score fusion."""
    cfg = run.backbone()
    tuned = "prompt.layer0" in state or ("ctx.mlo" in state)
    pset = pr.PromptSet(state, cfg, run.prompt_len) if "prompt.layer0" in state else None
    y_mlo, y_cc, y_mv = [], [], []
    for i in range(0, len(mlo), batch):
        a, c = mlo[i:i + batch], cc[i:i + batch]
        if tuned:
            y_mlo.append(fu.forward_singleview(a, "mlo", cfg, state, prompts=pset).data)
            y_cc.append(fu.forward_singleview(c, "cc", cfg, state, prompts=pset).data)
            y_mv.append(fu.forward_multiview(a, c, cfg, state, prompts=pset).data)
        else:
            _, la = bb.forward_backbone(a, cfg, state)
            _, lc = bb.forward_backbone(c, cfg, state)
            y_mlo.append(la.data)
            y_cc.append(lc.data)
    y_mlo = np.concatenate(y_mlo)
    y_cc = np.concatenate(y_cc)
    z_bar = 0.5 * (y_mlo + y_cc)
    y_mv = np.concatenate(y_mv) if y_mv else z_bar
    return {"mlo": y_mlo, "cc": y_cc, "averaged": z_bar, "multi_view": y_mv}


def predict_probs(run, state, mlo, cc, batch=64):
    return {k: _softmax_np(v) for k, v in predict(run, state, mlo, cc, batch).items()}
