"""End-to-end acceptance checks.

One test per criterion; each prints a single ``CRITERION n ...: PASS/FAIL``
line so the verdicts can be read off the test log directly.
"""

import dataclasses
import json
import time

import numpy as np
import pytest
import torch

from localdiff.checkpoint import save_checkpoint, load_checkpoint
from localdiff.guidance import (ControlMask, GuidanceConfig,
                                focused_token_response, rdloss)
from localdiff.model import AttentionStack, Denoiser, ModelConfig
from localdiff.numerics import grad_wrt_latent
from localdiff.sampler import (GuidanceToggles, noise_mask_combine, sample)
from localdiff.evaluation import evaluate_run, run_ablation

from oracles import (ftr_oracle, fuse_oracle, gaussian_weights_oracle,
                     majority_oracle, noise_mask_oracle, rdloss_oracle)
from localdiff.model import fuse_control


def verdict(num, name, ok, detail=""):
    suffix = f"  ({detail})" if detail else ""
    print(f"CRITERION {num} {name}: {'PASS' if ok else 'FAIL'}{suffix}")
    assert ok, f"criterion {num} ({name}) failed {detail}"


def random_attention_mask(rng, res=8):
    """Non-degenerate binary mask whose downsampled grid is exact."""
    while True:
        coarse = rng.random((res, res)) < 0.4
        if coarse.any() and not coarse.all():
            break
    image = np.kron(coarse, np.ones((32 // res, 32 // res))).astype(np.uint8)
    return ControlMask.from_image(image), coarse


def test_criterion_1_equation_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(42)
    n = 1000

    for _ in range(n):
        u = rng.standard_normal((2, 3, 8, 8))
        c = rng.standard_normal((2, 3, 8, 8))
        m = (rng.random((8, 8)) < 0.5).astype(np.float64)
        got = fuse_control(torch.from_numpy(u), torch.from_numpy(c),
                           torch.from_numpy(m))
        assert np.array_equal(got.numpy(), fuse_oracle(u, c, m))

    for _ in range(n):
        ec = rng.standard_normal((1, 1, 8, 8))
        ep = rng.standard_normal((1, 1, 8, 8))
        m = (rng.random((8, 8)) < 0.5).astype(np.float64)
        got = noise_mask_combine(torch.from_numpy(ec), torch.from_numpy(ep),
                                 torch.from_numpy(m))
        assert np.array_equal(got.numpy(), noise_mask_oracle(ec, ep, m))

    weights = gaussian_weights_oracle(3, 1.0)
    for _ in range(n):
        maps = rng.random((4, 8, 8))
        mask, coarse = random_attention_mask(rng)
        subset = sorted(rng.choice(4, size=rng.integers(2, 5),
                                   replace=False).tolist())
        control = int(rng.choice(subset))
        cfg = GuidanceConfig(token_subset=tuple(subset))
        stack = AttentionStack(t=0, maps=torch.from_numpy(maps),
                               token_ids=(1, 2, 3, 4))
        got = rdloss(stack, mask, control, cfg)
        ref_per, ref_l, ref_arg = rdloss_oracle(
            maps, coarse.astype(np.float64), control, subset, weights)
        assert got.arg_token == ref_arg
        assert float(got.l) == ref_l
        for pos in subset:
            assert float(got.per_token[pos]) == ref_per[pos]

    for _ in range(n):
        maps = rng.random((4, 8, 8))
        gamma = float(rng.random())
        subset = sorted(rng.choice(4, size=rng.integers(1, 5),
                                   replace=False).tolist())
        stack = AttentionStack(t=0, maps=torch.from_numpy(maps),
                               token_ids=(1, 2, 3, 4))
        got = focused_token_response(stack, gamma, subset=subset)
        assert np.array_equal(got.maps.numpy(),
                              ftr_oracle(maps, gamma, subset))

    elapsed = time.perf_counter() - t0
    verdict(1, "equation oracles (4 ops x 1000 instances, 64-bit exact)",
            elapsed < 60.0, f"{elapsed:.1f}s")


def test_criterion_2_gradient_correctness(trained_small, scenario0,
                                          tmp_path):
    t0 = time.perf_counter()
    ckpt = tmp_path / "f64.ldc"
    save_checkpoint(ckpt, trained_small)
    model, _, _ = load_checkpoint(ckpt, dtype=torch.float64)
    cond = torch.from_numpy(scenario0.condition.edges.astype(np.float64))
    prompt = model.embed_prompt(scenario0.prompt_tokens)
    ids = torch.tensor(prompt.ids, dtype=torch.long)
    subset = tuple(prompt.object_positions())
    cfg = dataclasses.replace(GuidanceConfig(), token_subset=subset)
    control = subset[0]
    mask = scenario0.mask
    h = 1e-4
    n_coords = 400

    def loss_of(zs):
        with torch.no_grad():
            _, maps = model(zs, 3, ids,
                            condition=cond.expand(zs.shape[0], -1, -1),
                            ftr=(cfg.gamma, subset))
        out = []
        for b in range(zs.shape[0]):
            stack = AttentionStack(t=3, maps=maps[b], token_ids=prompt.ids)
            out.append(rdloss(stack, mask, control, cfg).l.detach())
        return torch.stack(out)

    checked = 0
    seed = 0
    max_rel = 0.0
    while checked < 20:
        seed += 1
        g = torch.Generator().manual_seed(seed)
        z = torch.randn((1, 1, 32, 32), generator=g).double()
        with torch.no_grad():
            _, maps = model(z, 3, ids, condition=cond,
                            ftr=(cfg.gamma, subset))
        stack = AttentionStack(t=3, maps=maps[0], token_ids=prompt.ids)
        result = rdloss(stack, mask, control, cfg)
        vals = sorted((float(v) for v in result.per_token.values()),
                      reverse=True)
        token_margin = vals[0] - vals[1] if len(vals) > 1 else float("inf")
        sm = result.smoothed[result.arg_token]
        m8 = mask.tensor(8, dtype=torch.float64)
        spatial = min(
            float(torch.topk((sm * m8).flatten(), 2).values.diff().neg()),
            float(torch.topk((sm * (1 - m8)).flatten(), 2).values
                  .diff().neg()))
        if token_margin <= 1e-3 or spatial <= 1e-3:
            continue  # nonunique argmax; pick another seeded point
        def loss_fn(leaf):
            _, mp = model(leaf, 3, ids, condition=cond,
                          ftr=(cfg.gamma, subset))
            st = AttentionStack(t=3, maps=mp[0], token_ids=prompt.ids)
            return rdloss(st, mask, control, cfg).l

        grad = grad_wrt_latent(loss_fn, z).reshape(-1)

        order = grad.abs().argsort(descending=True)
        coord_rng = np.random.default_rng(seed)
        coords = np.unique(np.concatenate([
            order[:128].numpy(),
            coord_rng.choice(1024, size=n_coords - 128, replace=False)]))
        flat = z.reshape(-1)
        pts = []
        for i in coords:
            zp = flat.clone(); zp[i] += h
            zm = flat.clone(); zm[i] -= h
            pts.extend((zp, zm))
        stacked = torch.stack(pts).reshape(-1, 1, 32, 32)
        losses = torch.cat([loss_of(stacked[s:s + 128])
                            for s in range(0, stacked.shape[0], 128)])
        fd = (losses[0::2] - losses[1::2]) / (2 * h)
        ref = grad[coords]
        rel = float((ref - fd).abs().max() / ref.abs().max())
        max_rel = max(max_rel, rel)
        assert rel < 1e-5, f"seed {seed}: rel FD mismatch {rel:.2e}"
        checked += 1

    elapsed = time.perf_counter() - t0
    verdict(2, "reverse-mode vs central finite differences (20 points)",
            elapsed < 300.0, f"max rel {max_rel:.2e}, {elapsed:.1f}s")


def test_criterion_3_reduction_to_naive(reference, scenario0):
    model = reference.model
    cond = torch.from_numpy(
        scenario0.condition.edges.astype(np.float32))
    prompt = model.embed_prompt(scenario0.prompt_tokens)
    ones = ControlMask.from_image(np.ones((32, 32), dtype=np.uint8))
    cfg = GuidanceConfig(alpha0=0.0, gamma=1.0)
    for seed in range(10):
        full = sample(model, reference.schedule, prompt, cond, ones, cfg,
                      mode="full_method", seed=seed)
        naive = sample(model, reference.schedule, prompt, cond, None,
                       GuidanceConfig(), mode="naive", seed=seed)
        assert torch.equal(full.z0, naive.z0), f"seed {seed} diverged"
        assert np.array_equal(full.image, naive.image)
    verdict(3, "full_method(alpha=0, gamma=1, M=1) == naive bitwise",
            True, "10 seeds x 50 steps")


def test_criterion_4_fmc_exactness(reference):
    model = reference.model
    g = torch.Generator().manual_seed(0)
    prompt = model.embed_prompt(["circle", "square"])
    zeros = ControlMask.from_image(np.zeros((32, 32), dtype=np.uint8))
    for t in (1, 25, 49):
        z = torch.randn(32, 32, generator=g).to(model.dtype)
        cond = (torch.rand(32, 32, generator=g) < 0.2).to(model.dtype)
        masked, _ = model.denoiser_forward(z, t, prompt, condition=cond,
                                           mask_mode=zeros)
        uncond, _ = model.denoiser_forward(z, t, prompt, condition=None)
        assert torch.equal(masked, uncond)

    fresh = Denoiser(ModelConfig(), dtype=torch.float64)
    rng = np.random.default_rng(1)
    for _ in range(5):
        mask, _ = random_attention_mask(rng)
        z = torch.randn(32, 32, generator=g).double()
        cond = (torch.rand(32, 32, generator=g) < 0.2).double()
        p64 = fresh.embed_prompt(["circle", "square"])
        got, _ = fresh.denoiser_forward(z, 7, p64, condition=cond,
                                        mask_mode=mask)
        ref, _ = fresh.denoiser_forward(z, 7, p64, condition=None)
        assert torch.equal(got, ref)
    verdict(4, "FMC: M=0 and zero-init control are bitwise inert", True)


def test_criterion_5_concept_matching(reference_runs):
    runs = reference_runs["full_method"]
    assert len(runs) == 100
    for result, _ in runs:
        guided = [d for d in result.diagnostics if "c_control" in d]
        history = [d for d in guided if d["history_step"]]
        assert len(history) == 7, f"{len(history)} history steps"
        assert [d["t"] for d in history] == list(range(50, 43, -1))
        frozen = [d for d in guided if not d["history_step"]]
        expected = majority_oracle([d["c_control"] for d in history])
        assert all(d["c_control"] == expected for d in frozen)
    verdict(5, "C_control frozen to Count_max; exactly 7 history steps",
            True, "100 manifests")


def test_criterion_6_descent(reference_runs):
    runs = reference_runs["full_method"][:50]
    ok = total = 0
    violations = []
    for result, _ in runs:
        for d in result.diagnostics:
            if "l_after" not in d:
                continue
            if d["l_margin"] <= 1e-3 or d["spatial_margin"] <= 1e-3:
                continue  # max is nonsmooth at argmax ties; excluded
            total += 1
            if d["l_after"] <= d["l"] + 1e-12 * max(1.0, abs(d["l"])):
                ok += 1
            else:
                violations.append((result.manifest["seed"], d["t"],
                                   d["l"], d["l_after"]))
    for v in violations:
        print("descent violation (seed, t, l, l_after):", v)
    assert total >= 100, f"too few unique-argmax guidance steps ({total})"
    frac = ok / total
    verdict(6, "re-evaluated l does not increase after the update",
            frac >= 0.95, f"{ok}/{total} = {frac:.3f}")


def _training_criterion_met(reference):
    base = reference.losses["base"]
    k = max(1, len(base) // 10)
    return float(np.mean(base[-k:])) < 0.5 * float(np.mean(base[:k]))


def test_criterion_7_directional_reproduction(reference, reference_runs):
    if not _training_criterion_met(reference):
        print("CRITERION 7 directional reproduction: BLOCKED "
              "(reference training loss did not halve)")
        pytest.skip("blocked: reference checkpoint failed its "
                    "training criterion")
    stats = {}
    for mode, runs in reference_runs.items():
        dual = float(np.mean([m["dual_object"] for _, m in runs]))
        cea = float(np.nanmean([m["edge_agreement"] for _, m in runs]))
        stats[mode] = (dual, cea)
    dual_full, cea_full = stats["full_method"]
    dual_naive, cea_naive = stats["naive"]
    detail = (f"dual {dual_full:.2f} vs {dual_naive:.2f}, "
              f"cea {cea_full:.2f} vs {cea_naive:.2f}")
    verdict(7, "dual-object +10pp with edge agreement within 0.1",
            dual_full >= dual_naive + 0.10 - 1e-9
            and abs(cea_full - cea_naive) <= 0.1 + 1e-9, detail)


def test_criterion_8_reproducibility_and_budget(reference, scenario0):
    cond = torch.from_numpy(
        scenario0.condition.edges.astype(np.float32))
    prompt = reference.model.embed_prompt(scenario0.prompt_tokens)
    results = []
    for _ in range(2):
        t0 = time.perf_counter()
        r = sample(reference.model, reference.schedule, prompt, cond,
                   scenario0.mask, GuidanceConfig(), mode="full_method",
                   seed=123, checkpoint_hash=reference.ckpt_hash)
        results.append((r, time.perf_counter() - t0))
    (a, ta), (b, tb) = results
    assert np.array_equal(a.image, b.image)
    assert json.dumps(a.manifest, sort_keys=True) == \
        json.dumps(b.manifest, sort_keys=True)
    sample_s = max(ta, tb)
    ok = reference.train_seconds < 900.0 and sample_s < 10.0
    verdict(8, "train < 15 min, sample < 10 s, byte-identical reruns", ok,
            f"train {reference.train_seconds:.0f}s, sample {sample_s:.2f}s")


def test_criterion_9_ablation_harness(reference, scenario0):
    seeds = (0, 1, 2)
    report = run_ablation(reference.model, reference.schedule, [scenario0],
                          seeds=seeds,
                          checkpoint_hash=reference.ckpt_hash)
    assert len(report.rows) == 6
    assert not report.failures
    fmc_row = next(r for r in report.rows if r["toggles"] == "fmc")

    cond = torch.from_numpy(scenario0.condition.edges.astype(np.float64))
    prompt = reference.model.embed_prompt(scenario0.prompt_tokens)
    metrics = []
    for seed in seeds:
        r = sample(reference.model, reference.schedule, prompt, cond,
                   scenario0.mask, GuidanceConfig(), mode="feature_mask",
                   seed=seed, checkpoint_hash=reference.ckpt_hash)
        metrics.append(evaluate_run(r, scenario0))
    import statistics
    for metric in ("iou", "dual_object", "edge_agreement"):
        vals = [m[metric] for m in metrics if not np.isnan(m[metric])]
        if vals:
            assert fmc_row[f"{metric}_mean"] == statistics.mean(vals)
            assert fmc_row[f"{metric}_std"] == (
                statistics.pstdev(vals) if len(vals) > 1 else 0.0)
        else:
            assert np.isnan(fmc_row[f"{metric}_mean"])
    verdict(9, "six-toggle sweep; FMC-only row == feature_mask baseline",
            True, f"{len(seeds)} seeds")
