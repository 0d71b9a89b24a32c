"""Acceptance gate: one test per release criterion, each printing a single
PASS/FAIL line to the terminal.

The expensive criteria (trend, ablation, audit, determinism of the full
pipeline) share one session-scoped run of the complete synth -> pretrain ->
5-fold tune -> eval pipeline at the default configuration, plus a matching
5-fold run with the distillation weight set to zero."""

import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest

from mvpt import autodiff as ad
from mvpt import backbone as bb
from mvpt import checkpoint as ck
from mvpt import cli
from mvpt import data as dt
from mvpt import fusion as fu
from mvpt import metrics as mx
from mvpt import prompts as pr
from mvpt import train as tr
from mvpt.config import RunConfig

from test_backbone import _brute_force_block, small_cfg

PIPELINE_BUDGET_S = 30 * 60


def _report(capsys, name, ok, detail=""):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


# ---- shared full-scale pipeline ---------------------------------------------


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept")
    data, runs, runs_ab = (str(root / d) for d in ("data", "runs", "runs_ab"))
    times = {}

    def run(label, argv):
        t0 = time.time()
        rc = cli.main(argv)
        times[label] = time.time() - t0
        assert rc == 0, f"pipeline command {label} exited {rc}"

    base = ["--data_dir", data, "--out_dir", runs]
    run("synth", ["synth"] + base)
    run("pretrain", ["pretrain"] + base)
    for k in range(5):
        run(f"tune{k}", ["tune"] + base +
            ["--stage1", f"{runs}/stage1.ckpt", "--fold", str(k)])
        run(f"eval{k}", ["eval"] + base +
            ["--ckpt", f"{runs}/stage2_fold{k}.ckpt", "--split", f"fold{k}",
             "--report", f"{runs}/eval_fold{k}.json"])
    ab = ["--data_dir", data, "--out_dir", runs_ab, "--lambda", "0"]
    for k in range(5):
        run(f"ab_tune{k}", ["tune"] + ab +
            ["--stage1", f"{runs}/stage1.ckpt", "--fold", str(k)])
        run(f"ab_eval{k}", ["eval"] + ab +
            ["--ckpt", f"{runs_ab}/stage2_fold{k}.ckpt", "--split", f"fold{k}",
             "--report", f"{runs_ab}/eval_fold{k}.json"])
    return {"data": data, "runs": runs, "runs_ab": runs_ab, "times": times}


def _fold_means(out_dir):
    mv, sv = [], []
    for k in range(5):
        rep = json.loads(Path(out_dir, f"eval_fold{k}.json").read_text())
        mv.append(rep["multi_view"]["auroc"])
        sv.append(rep["single_view"]["averaged"]["auroc"])
    return float(np.mean(mv)), float(np.mean(sv))


# ---- criteria ---------------------------------------------------------------


def test_criterion_gradient_correctness(capsys):
    t0 = time.time()
    report = cli.run_gradcheck(RunConfig())
    elapsed = time.time() - t0
    worst = max(rep["max_rel_err"] for rep in report.values())
    ok = worst < cli.GRADCHECK_TOL and elapsed < 120
    _report(capsys, "gradient correctness",
            ok, f"max rel err {worst:.2e} over {sorted(report)} "
                f"in {elapsed:.0f}s (budget 120s)")


def test_criterion_freeze_contract(pipeline, capsys):
    run = RunConfig(tune_epochs=25, tune_batch=4, augment=False)
    mlo, cc, labels, _ = dt.load_pairs(Path(pipeline["data"]) / "manifest.csv",
                                       run.image_size)
    mlo, cc, labels = mlo[:32], cc[:32], labels[:32]
    state = ck.load_checkpoint(Path(pipeline["runs"]) / "stage1.ckpt")
    before = {n: hashlib.sha256(state[n].data.tobytes()).hexdigest()
              for n in state.names() if n.startswith("backbone.")}
    state, _, log = tr.tune(run, state, mlo, cc, labels)
    steps = run.tune_epochs * (len(labels) // run.tune_batch)
    after = {n: hashlib.sha256(state[n].data.tobytes()).hexdigest()
             for n in state.names() if n.startswith("backbone.")}
    no_grad = all(state[n].grad is None and not state[n].requires_grad
                  for n in before)
    ok = steps >= 200 and after == before and no_grad
    _report(capsys, "freeze contract",
            ok, f"{len(before)} backbone tensors hash-identical after "
                f"{steps} tuning steps; gradients absent: {no_grad}")


def test_criterion_zero_prompt_identity(capsys):
    run = RunConfig()
    cfg = run.backbone()
    state = bb.init_backbone(cfg, np.random.default_rng(11))
    rng = np.random.default_rng(12)
    images = rng.random((100, run.image_size, run.image_size))
    pieces_bare, pieces_prompted = [], []
    for lo in range(0, 100, 25):
        _, logits = bb.forward_backbone(images[lo:lo + 25], cfg, state)
        pieces_bare.append(logits.data)
    pset = pr.attach_tuning_params(cfg, state, 0, np.random.default_rng(13))
    for lo in range(0, 100, 25):
        out = fu.forward_singleview(images[lo:lo + 25], "mlo", cfg, state,
                                    prompts=pset)
        pieces_prompted.append(out.data)
    bare = np.concatenate(pieces_bare)
    prompted = np.concatenate(pieces_prompted)
    ok = bare.shape == (100, run.num_classes) and np.array_equal(prompted, bare)
    _report(capsys, "zero-prompt identity",
            ok, "prompted inference bit-identical to the pretrained forward "
                "on 100 images")


def test_criterion_attention_oracle(capsys):
    rng = np.random.default_rng(21)
    worst = 0.0
    count = 0
    for window in (2, 4):
        cfg = small_cfg(window=window)
        state = bb.init_backbone(cfg, np.random.default_rng(30 + window))
        grid = cfg.stage_grid(0)          # 8x8 token grid
        m = grid[0] * grid[1]
        for trial in range(25):
            layer = trial % 2             # unshifted and shifted blocks
            tokens = rng.standard_normal((1, m, cfg.embed_dim))
            views, _ = bb.block_forward([("mlo", ad.Tensor(tokens), grid)],
                                        None, layer, cfg, state)
            want = _brute_force_block(tokens, layer, cfg, state, grid)
            worst = max(worst, float(np.max(np.abs(views[0][1].data - want))))
            count += 1
    ok = count == 50 and worst < 1e-5
    _report(capsys, "attention oracle",
            ok, f"max abs err {worst:.2e} over {count} instances "
                "(windows 2 and 4)")


def test_criterion_loss_identities(capsys):
    ad.set_default_dtype(np.float64)
    try:
        rng = np.random.default_rng(31)
        checks = []

        # exact decomposition of the combined objective
        a, c, v = (ad.Tensor(rng.standard_normal((4, 3))) for _ in range(3))
        labels = rng.integers(0, 3, 4)
        bundle = fu.loss_overall(a, c, v, labels, tau=4.0, lam=0.1)
        decomp = (bundle.l_mv.item() + bundle.l_mlo.item() + bundle.l_cc.item()
                  + 0.1 * bundle.l_md.item())
        checks.append(abs(bundle.l_overall.item() - decomp) < 1e-6)

        # distillation vanishes when all logit sets agree
        y = ad.Tensor(rng.standard_normal((2, 3)))
        checks.append(abs(fu.l_md(y, y, y, 4.0).item()) < 1e-12)

        # self-distillation is zero at every temperature
        t = ad.Tensor(rng.standard_normal((3, 4)))
        checks.append(all(abs(fu.l_kd(t, t, tau).item()) < 1e-12
                          for tau in (1.0, 4.0, 16.0)))

        # stop-gradient semantics: each distillation term moves only its
        # student, and the full gradient is the sum of the isolated terms
        tau = 2.0
        a = ad.Tensor(rng.standard_normal((1, 3)), requires_grad=True)
        c = ad.Tensor(rng.standard_normal((1, 3)), requires_grad=True)
        v = ad.Tensor(rng.standard_normal((1, 3)), requires_grad=True)
        z = ad.mul(a + c, 0.5)
        ad.mul(fu.l_kd(z.detach(), v, tau), 1.0 / tau ** 2).backward()
        checks.append(a.grad is None and c.grad is None and v.grad is not None)
        g_v = v.grad.copy()
        a.zero_grad(); c.zero_grad(); v.zero_grad()
        z = ad.mul(a + c, 0.5)
        ad.mul(fu.l_kd(v.detach(), z, tau), 1.0 / tau ** 2).backward()
        checks.append(v.grad is None and a.grad is not None)
        g_a, g_c = a.grad.copy(), c.grad.copy()
        a.zero_grad(); c.zero_grad(); v.zero_grad()
        fu.l_md(a, c, v, tau).backward()
        checks.append(np.allclose(v.grad, g_v, atol=1e-12)
                      and np.allclose(a.grad, g_a, atol=1e-12)
                      and np.allclose(c.grad, g_c, atol=1e-12))

        ok = all(checks)
        _report(capsys, "loss identities",
                ok, f"decomposition, zero cases, and detach isolation: "
                    f"{sum(checks)}/{len(checks)} checks")
    finally:
        ad.set_default_dtype(np.float32)


def _pairwise_auroc(scores, labels):
    """Vectorized O(n^2) Mann-Whitney oracle."""
    pos = scores[labels == 1][:, None]
    neg = scores[labels == 0][None, :]
    return float(((pos > neg).sum() + 0.5 * (pos == neg).sum())
                 / (pos.size * neg.size))


def test_criterion_metrics_oracle(capsys):
    rng = np.random.default_rng(41)
    failures = 0
    for trial in range(1000):
        n = int(rng.integers(8, 201))
        k = int(rng.integers(2, 5))
        labels = np.concatenate([np.arange(k), rng.integers(0, k, n - k)])
        probs = np.round(rng.random((n, k)), int(rng.integers(1, 3)))
        want = np.mean([_pairwise_auroc(probs[:, c], (labels == c).astype(int))
                        for c in range(k)])
        got = mx.auroc_macro_ovr(probs, labels, k)
        if got != pytest.approx(want, abs=1e-12):
            failures += 1
        if k == 2:
            bin_want = _pairwise_auroc(probs[:, 1], labels)
            if mx.auroc_binary(probs[:, 1], labels) != pytest.approx(
                    bin_want, abs=1e-12):
                failures += 1
    _report(capsys, "metrics oracle",
            failures == 0,
            f"brute-force agreement on 1000 instances, {failures} mismatches")


def test_criterion_trend_reproduction(pipeline, capsys):
    mv, sv = _fold_means(pipeline["runs"])
    main_labels = ["synth", "pretrain"] + [f"tune{k}" for k in range(5)] \
        + [f"eval{k}" for k in range(5)]
    elapsed = sum(pipeline["times"][l] for l in main_labels)
    ok = mv >= sv + 0.02 and mv >= 0.90 and elapsed < PIPELINE_BUDGET_S
    _report(capsys, "trend reproduction",
            ok, f"fold-mean macro AUROC multi-view {mv:.4f} vs single-view "
                f"{sv:.4f}; pipeline {elapsed:.0f}s (budget {PIPELINE_BUDGET_S}s)")


def test_criterion_ablation_direction(pipeline, capsys):
    mv_full, _ = _fold_means(pipeline["runs"])
    mv_ab, _ = _fold_means(pipeline["runs_ab"])
    ok = mv_full >= mv_ab - 0.005
    _report(capsys, "ablation direction",
            ok, f"fold-mean multi-view macro AUROC: lambda=0.1 -> {mv_full:.4f}, "
                f"lambda=0 -> {mv_ab:.4f}")


def test_criterion_parameter_audit(pipeline, capsys):
    run = RunConfig()
    rep = json.loads(Path(pipeline["runs"],
                          "trainable_report_fold0.json").read_text())
    # independent hand count on a freshly built state
    cfg = run.backbone()
    state = bb.init_backbone(cfg, np.random.default_rng(51))
    pr.attach_tuning_params(cfg, state, run.prompt_len, np.random.default_rng(52))
    learnable = sum(state[n].size for n in state.names()
                    if not n.startswith("backbone."))
    total = sum(state[n].size for n in state.names())
    exact = rep["trainable_fraction"] == learnable / total

    pcfg, plen = pr.full_scale_config()
    ptotal = bb.expected_param_count(pcfg, prompt_len=plen, with_multiview=True)
    phead = bb.head_param_count(pcfg)
    pprompts = sum(plen * pcfg.layer_dim(i) for i in range(pcfg.num_layers))
    pfrac = (2 * phead + pprompts + 2 * pcfg.embed_dim) / ptotal
    ok = exact and 0.05 <= pfrac <= 0.10
    _report(capsys, "parameter audit",
            ok, f"trainable fraction {rep['trainable_fraction']:.6f} equals "
                f"hand count {learnable}/{total}; full-scale fraction "
                f"{pfrac:.4f} in [0.05, 0.10]")


def test_criterion_determinism_and_splits(pipeline, capsys, tmp_path):
    checks = []

    # stratified folds: each subject in exactly one bucket, per-class fold
    # sizes within +/- 1
    plan = dt.SplitPlan.load(Path(pipeline["data"]) / "split.csv")
    records = dt.read_manifest(Path(pipeline["data"]) / "manifest.csv")
    label_of = {r.subject_id: r.label for r in records}
    checks.append(not (set(plan.test_ids) & set(plan.fold_of)))
    checks.append(len(plan.test_ids) + len(plan.fold_of) == len(records))
    for label in sorted(set(label_of.values())):
        per_fold = [sum(1 for s, f in plan.fold_of.items()
                        if f == k and label_of[s] == label)
                    for k in range(plan.k)]
        checks.append(max(per_fold) - min(per_fold) <= 1)

    # full-scale eval rerun is byte-identical
    rep0 = Path(pipeline["runs"], "eval_fold0.json")
    redo = tmp_path / "eval_redo.json"
    rc = cli.main(["eval", "--data_dir", pipeline["data"],
                   "--out_dir", pipeline["runs"],
                   "--ckpt", f"{pipeline['runs']}/stage2_fold0.ckpt",
                   "--split", "fold0", "--report", str(redo)])
    checks.append(rc == 0 and redo.read_bytes() == rep0.read_bytes())

    # every command rerun at a reduced size: byte-identical artifacts
    tiny = ["--image_size", "32", "--embed_dim", "16", "--depths", "1,1",
            "--heads", "2,2", "--prompt_len", "2", "--n_subjects", "30",
            "--pretrain_epochs", "1", "--tune_epochs", "1",
            "--pretrain_batch", "8", "--tune_batch", "8", "--augment", "false"]
    outs = {}
    for tag in ("a", "b"):
        d = tmp_path / tag
        base = ["--data_dir", str(d / "data"), "--out_dir", str(d / "runs")]
        assert cli.main(["synth"] + base + tiny) == 0
        assert cli.main(["pretrain"] + base + tiny) == 0
        assert cli.main(["tune"] + base + tiny +
                        ["--stage1", str(d / "runs" / "stage1.ckpt")]) == 0
        assert cli.main(["eval"] + base + tiny +
                        ["--ckpt", str(d / "runs" / "stage2.ckpt"),
                         "--report", str(d / "runs" / "report.json")]) == 0
        outs[tag] = {f: (d / p).read_bytes() for f, p in
                     [("manifest", "data/manifest.csv"),
                      ("split", "data/split.csv"),
                      ("image", "data/images/subj00000_mlo.pgm"),
                      ("stage1", "runs/stage1.ckpt"),
                      ("stage2", "runs/stage2.ckpt"),
                      ("report", "runs/report.json")]}
    checks.append(outs["a"] == outs["b"])

    # gradcheck and audit are pure functions of the seed-fixed config
    tiny_run = RunConfig(image_size=32, embed_dim=16, depths=(1, 1),
                         heads=(2, 2), prompt_len=2)
    checks.append(cli.run_gradcheck(tiny_run) == cli.run_gradcheck(tiny_run))
    capsys.readouterr()   # drain output of the commands above
    assert cli.main(["audit"] + tiny) == 0
    audit1 = capsys.readouterr().out
    assert cli.main(["audit"] + tiny) == 0
    audit2 = capsys.readouterr().out
    checks.append(audit1 == audit2)

    ok = all(checks)
    _report(capsys, "determinism and splits",
            ok, f"{sum(checks)}/{len(checks)} checks (stratification, "
                "rerun byte-identity, pure reports)")
