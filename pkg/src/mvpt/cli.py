"""Command-line driver for the two-stage protocol.

Subcommands: synth | pretrain | tune | eval | gradcheck | audit.
Config comes from defaults, an optional JSON file, and flat --key value
overrides. Exit codes: 0 success, 1 usage/config error, 2 runtime/numeric.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from . import checkpoint as ck
from . import data as dt
from . import fusion as fu
from . import metrics as mx
from . import prompts as pr
from . import train as tr
from .backbone import ConfigError
from .config import RunConfig


def _add_config_args(p: argparse.ArgumentParser):
    for f in dataclasses.fields(RunConfig):
        flag = f"--{f.name}"
        if f.name in ("depths", "heads"):
            p.add_argument(flag, type=str, default=None,
                           help="comma-separated ints")
        elif f.type in ("bool", bool):
            p.add_argument(flag, type=lambda s: s.lower() in ("1", "true", "yes"),
                           default=None)
        elif f.type in ("int", int):
            p.add_argument(flag, type=int, default=None)
        elif f.type in ("float", float):
            p.add_argument(flag, type=float, default=None)
        else:
            p.add_argument(flag, type=str, default=None)
    # conventional symbol for the distillation weight
    p.add_argument("--lambda", dest="lam_alias", type=float, default=None)
    p.add_argument("--config", type=str, default=None, help="JSON config file")


def _build_config(args) -> RunConfig:
    d = {}
    if args.config:
        with open(args.config) as f:
            d.update(json.load(f))
    for f in dataclasses.fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is None:
            continue
        if f.name in ("depths", "heads"):
            v = [int(x) for x in v.split(",")]
        d[f.name] = v
    if getattr(args, "lam_alias", None) is not None:
        d["lam"] = args.lam_alias
    base = RunConfig().to_dict()
    base.update(d)
    return RunConfig.from_dict(base)


def _expected_shapes(run: RunConfig, tuned: bool):
    cfg = run.backbone()
    ref = bb.init_backbone(cfg, np.random.default_rng(0))
    if tuned:
        pr.attach_tuning_params(cfg, ref, run.prompt_len, np.random.default_rng(0))
    return {n: ref[n].shape for n in ref.names()}


def _load_state(run: RunConfig, path, tuned):
    return ck.load_checkpoint(path, expected_shapes=_expected_shapes(run, tuned))


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


# ---- subcommands -------------------------------------------------------------


def cmd_synth(run: RunConfig):
    manifest, records, _ = dt.synth_generate(run.n_subjects, run.scheme, run.seed,
                                             run.data_dir, image_size=run.image_size)
    plan = dt.split(records, run.seed, k=run.folds, test_frac=run.test_frac)
    plan.save(Path(run.data_dir) / "split.csv")
    hist = Counter(r.label for r in records)
    print(f"manifest: {manifest}")
    print("class histogram:", dict(sorted(hist.items())))
    print(f"split: {Path(run.data_dir) / 'split.csv'} "
          f"({len(plan.test_ids)} test / {len(plan.fold_of)} train, k={plan.k})")
    return 0


def _load_split_data(run: RunConfig):
    base = Path(run.data_dir)
    mlo, cc, labels, ids = dt.load_pairs(base / "manifest.csv", run.image_size)
    plan = dt.SplitPlan.load(base / "split.csv")
    index = {sid: i for i, sid in enumerate(ids)}
    return mlo, cc, labels, index, plan


def _subset(mlo, cc, labels, index, ids):
    sel = np.array([index[sid] for sid in ids])
    return mlo[sel], cc[sel], labels[sel]


def cmd_pretrain(run: RunConfig):
    mlo, cc, labels, index, plan = _load_split_data(run)
    a, c, y = _subset(mlo, cc, labels, index, plan.train_ids)
    state, log = tr.pretrain(run, a, c, y)
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ck.save_checkpoint(state, out / "stage1.ckpt")
    _write_json(out / "pretrain_log.json", log)
    run.save(out / "pretrain_config.json")
    print(f"stage-1 checkpoint: {out / 'stage1.ckpt'}")
    print(f"final epoch loss: {log['epochs'][-1]['loss']:.4f}")
    return 0


def cmd_tune(run: RunConfig, stage1: str, fold: int):
    mlo, cc, labels, index, plan = _load_split_data(run)
    state = _load_state(run, stage1, tuned=False)
    backbone_digest = state.digest("backbone.")
    ids = plan.fold_train_ids(fold) if fold >= 0 else plan.train_ids
    a, c, y = _subset(mlo, cc, labels, index, ids)
    state, pset, log = tr.tune(run, state, a, c, y)
    if state.digest("backbone.") != backbone_digest:
        raise RuntimeError("backbone changed during tuning (freeze contract broken)")
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tag = f"_fold{fold}" if fold >= 0 else ""
    ck.save_checkpoint(state, out / f"stage2{tag}.ckpt")
    _write_json(out / f"tune_log{tag}.json", log)
    mask = {n: state.frozen[n] for n in state.params}
    report = pr.audit_report(state, mask)
    report["backbone_digest"] = backbone_digest
    _write_json(out / f"trainable_report{tag}.json", report)
    print(f"stage-2 checkpoint: {out / f'stage2{tag}.ckpt'}")
    print(f"trainable fraction: {report['trainable_fraction']:.6f}")
    return 0


def cmd_eval(run: RunConfig, ckpt: str, split_name: str, report_path: str | None):
    mlo, cc, labels, index, plan = _load_split_data(run)
    try:
        state = _load_state(run, ckpt, tuned=True)
    except ck.CheckpointError:
        state = _load_state(run, ckpt, tuned=False)
    if split_name == "test":
        ids = sorted(plan.test_ids)
    elif split_name == "train":
        ids = plan.train_ids
    elif split_name.startswith("fold") and split_name[4:].isdigit():
        ids = plan.fold_val_ids(int(split_name[4:]))
    else:
        raise ConfigError(f"unknown split {split_name!r}")
    a, c, y = _subset(mlo, cc, labels, index, ids)
    probs = tr.predict_probs(run, state, a, c)
    nc = run.num_classes
    report = {
        "split": split_name,
        "n_subjects": len(ids),
        "single_view": {
            "mlo": mx.eval_report(probs["mlo"], y, nc),
            "cc": mx.eval_report(probs["cc"], y, nc),
            "averaged": mx.eval_report(probs["averaged"], y, nc),
        },
        "multi_view": mx.eval_report(probs["multi_view"], y, nc),
    }
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if report_path:
        Path(report_path).parent.mkdir(parents=True, exist_ok=True)
        _write_json(report_path, report)
    return 0


GRADCHECK_TOL = 1e-5


def run_gradcheck(run: RunConfig, coords_per_tensor=4, batch=1, seed=0):
    """Finite-difference verification of every loss term's gradients on the
    learnable (tuning-phase) parameter set, in float64. Returns a report dict;
    callers decide pass/fail against GRADCHECK_TOL."""
    prev = ad.get_default_dtype()
    ad.set_default_dtype(np.float64)
    try:
        cfg = run.backbone()
        rng = np.random.default_rng(seed)
        state = bb.init_backbone(cfg, rng)
        pset = pr.attach_tuning_params(cfg, state, run.prompt_len, rng)
        state.apply_mask(pr.build_freeze_mask(state, "tune"))
        learnable = {n: t for n, t in state.params.items() if t.requires_grad}
        a = rng.random((batch, run.image_size, run.image_size))
        c = rng.random((batch, run.image_size, run.image_size))
        y = rng.integers(0, run.num_classes, batch)

        def f_mlo_logits():
            return fu.forward_singleview(a, "mlo", cfg, state, pset)

        def f_cc_logits():
            return fu.forward_singleview(c, "cc", cfg, state, pset)

        def f_mv_logits():
            return fu.forward_multiview(a, c, cfg, state, pset)

        def f_mlo():
            return ad.cross_entropy(f_mlo_logits(), y)

        def f_cc():
            return ad.cross_entropy(f_cc_logits(), y)

        def f_mv():
            return ad.cross_entropy(f_mv_logits(), y)

        # The distillation term contains stop-gradients: its teachers are
        # detached, so a finite difference that perturbs straight through them
        # would not match the analytic gradient. Freezing the teachers at
        # their baseline values gives a surrogate whose gradient at this point
        # is exactly the training gradient, and which finite differences can
        # verify.
        z_base = 0.5 * (f_mlo_logits().data + f_cc_logits().data)
        mv_base = f_mv_logits().data

        def f_md():
            y_mv = fu.forward_multiview(a, c, cfg, state, pset)
            z = ad.mul(fu.forward_singleview(a, "mlo", cfg, state, pset)
                       + fu.forward_singleview(c, "cc", cfg, state, pset), 0.5)
            kd = fu.l_kd(ad.Tensor(z_base), y_mv, run.tau) \
                + fu.l_kd(ad.Tensor(mv_base), z, run.tau)
            return ad.mul(kd, 1.0 / run.tau ** 2)

        def f_overall():
            return f_mv() + f_mlo() + f_cc() + ad.mul(f_md(), run.lam)

        report = {}
        for name, f in [("l_mlo", f_mlo), ("l_cc", f_cc), ("l_mv", f_mv),
                        ("l_md", f_md), ("l_overall", f_overall)]:
            rep = ad.finite_diff_check(f, learnable, h=1e-5,
                                       max_coords_per_tensor=coords_per_tensor,
                                       rng=np.random.default_rng(seed))
            report[name] = {"max_rel_err": rep["max_rel_err"],
                            "worst_param": rep["worst_param"],
                            "worst_index": rep["worst_index"]}
        return report
    finally:
        ad.set_default_dtype(prev)


def cmd_gradcheck(run: RunConfig):
    report = run_gradcheck(run)
    ok = True
    for loss, rep in report.items():
        passed = rep["max_rel_err"] < GRADCHECK_TOL
        ok = ok and passed
        print(f"{'PASS' if passed else 'FAIL'} {loss}: max rel err "
              f"{rep['max_rel_err']:.3e} (worst {rep['worst_param']}"
              f"[{rep['worst_index']}])")
    return 0 if ok else 2


def cmd_audit(run: RunConfig, full_scale: bool):
    if full_scale:
        cfg, plen = pr.full_scale_config()
        total = bb.expected_param_count(cfg, prompt_len=plen, with_multiview=True)
        backbone_only = bb.expected_param_count(cfg)
        head = bb.head_param_count(cfg)
        prompts_n = sum(plen * cfg.layer_dim(i) for i in range(cfg.num_layers))
        learnable = 2 * head + prompts_n + 2 * cfg.embed_dim
        frac = learnable / total
        print("full-scale configuration (printed, not trained):")
        print(f"  input {cfg.image_size}, embed {cfg.embed_dim}, depths {cfg.depths}, "
              f"window {cfg.window}, prompt length {plen}, head over flattened tokens")
        print(f"  backbone params: {backbone_only - head}")
        print(f"  learnable params (prompts + context + 2 heads): {learnable}")
        print(f"  total params: {total}")
        print(f"  trainable fraction: {frac:.4f}")
        return 0
    cfg = run.backbone()
    rng = np.random.default_rng(run.seed)
    state = bb.init_backbone(cfg, rng)
    pr.attach_tuning_params(cfg, state, run.prompt_len, rng)
    mask = pr.build_freeze_mask(state, "tune")
    state.apply_mask(mask)
    report = pr.audit_report(state, mask)
    for row in report["tensors"]:
        flag = "frozen   " if row["frozen"] else "learnable"
        print(f"{flag} {row['elements']:>10d}  {row['name']}")
    print(f"learnable {report['learnable']} / total {report['total']} "
          f"= fraction {report['trainable_fraction']:.6f}")
    return 0


# ---- entry point -------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="mvpt")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("synth", "pretrain", "tune", "eval", "gradcheck", "audit"):
        p = sub.add_parser(name)
        _add_config_args(p)
        if name == "tune":
            p.add_argument("--stage1", type=str, required=True)
            p.add_argument("--fold", type=int, default=-1)
        if name == "eval":
            p.add_argument("--ckpt", type=str, required=True)
            p.add_argument("--split", type=str, default="test")
            p.add_argument("--report", type=str, default=None)
        if name == "audit":
            p.add_argument("--full-scale", action="store_true")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    try:
        run = _build_config(args)
    except (ConfigError, ValueError, OSError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    try:
        if args.command == "synth":
            return cmd_synth(run)
        if args.command == "pretrain":
            return cmd_pretrain(run)
        if args.command == "tune":
            return cmd_tune(run, args.stage1, args.fold)
        if args.command == "eval":
            return cmd_eval(run, args.ckpt, args.split, args.report)
        if args.command == "gradcheck":
            return cmd_gradcheck(run)
        if args.command == "audit":
            return cmd_audit(run, args.full_scale)
        return 1
    except (ConfigError, dt.SplitError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
