"""Acceptance criteria 1-9 at their stated tolerances.

Desk-scale settings: 30-frame clips, a 2-block width-64 denoiser, K = 1000,
batch 32, and 20 DDIM steps for evaluation. Each test prints a PASS/FAIL line.
"""
import dataclasses
import time

import numpy as np
import pytest
import torch

from pedgen.cli import main
from pedgen.diffusion import SampleSpec, build_schedule, q_sample, training_loss
from pedgen.labels import FilterPolicy, anomaly_scores, calibrate_threshold, filter_iterate
from pedgen.metrics import collision_rates, displacement_errors, flat_ground, foot_floating_rates
from pedgen.model import Denoiser, DenoiserConfig, collate_contexts
from pedgen.motion import FRAME_DIM, decode_model_space, encode_model_space
from pedgen.pipeline import MotionScaler, decode_all, stitch_long_horizon
from pedgen.rng import Stream
from pedgen.rotations import matrix_from_rot6d, random_rotations, rot6d_from_matrix
from pedgen.scene import SemanticPointCloud, voxelize
from pedgen.skeleton import forward_kinematics, offsets_from_shape, skeleton_from_shape
from pedgen.synth import generate_dataset, inject_anomalies
from pedgen.training import TrainConfig, train

from conftest import random_motion
from oracles import brute_force_voxelize, double_loop_ade

pytestmark = pytest.mark.slow

FRAMES = 30
K_STEPS = 1000
EVAL_SPEC = SampleSpec(ddim_steps=20)
SCHEDULE = build_schedule(K_STEPS)
# reading heading from the scene grid needs a few thousand steps
MODEL_STEPS = 3000


def desk_config(goal=False, scene=False, shape=False) -> DenoiserConfig:
    return DenoiserConfig(n_blocks=2, dim=64, heads=4, max_frames=FRAMES,
                          use_scene=scene, use_shape=shape, use_goal=goal)


def desk_train(records, cfg, steps, stream, init=None):
    gen, _ = train(records, cfg, TrainConfig(epochs=10_000, batch_size=32, max_steps=steps), SCHEDULE,
                   stream, init)
    return gen


def mean_aade(gen, records, stream, samples=5, use_goal=True):
    ctxs = [r.context if use_goal else dataclasses.replace(r.context, goal=None) for r in records]
    out = gen.sample([c for c in ctxs for _ in range(samples)], EVAL_SPEC, stream)
    errs = []
    for i, r in enumerate(records):
        preds = decode_all(out[i * samples:(i + 1) * samples], [r.context.start] * samples)
        errs.append(displacement_errors(r.motion, preds, skeleton_from_shape(r.context.beta))[1])
    return float(np.mean(errs)), out


# ---------------------------------------------------------------- shared world

@pytest.fixture(scope="module")
def world():
    st = Stream(2024)
    train_set = generate_dataset(10, 400, st.split("train"), n_frames=FRAMES)
    val = generate_dataset(10, 200, st.split("val"), n_frames=FRAMES)
    return train_set.records, val


@pytest.fixture(scope="module")
def models(world):
    """Unconditioned, goal, scene+human and goal+scene+human desk models (3000 steps each)."""
    records, _ = world
    st = Stream(2024).split("models")
    out = {}
    for name, cfg in {"none": desk_config(), "goal": desk_config(goal=True),
                      "scene_human": desk_config(scene=True, shape=True),
                      "full": desk_config(goal=True, scene=True, shape=True)}.items():
        t = time.time()
        out[name] = desk_train(records, cfg, MODEL_STEPS, st.split(name))
        out[name + "_seconds"] = time.time() - t
    return out


# ---------------------------------------------------------------- criteria

def test_criterion_1_gradients_match_finite_differences(acceptance):
    t0 = time.time()
    torch.manual_seed(0)
    T, B = 16, 2
    cfg = DenoiserConfig(n_blocks=2, dim=64, heads=4, max_frames=T, use_scene=True, use_shape=True, use_goal=True)
    model = Denoiser(cfg).double()
    with torch.no_grad():  # move the zero-initialized output and FiLM layers off zero
        for p in model.parameters():
            p.add_(0.05 * torch.randn_like(p))
    data = generate_dataset(1, B, Stream(5), n_frames=T).records
    x = torch.tensor(np.stack([encode_model_space(r.motion).data for r in data]))
    mask = torch.ones(B, T, dtype=torch.bool)
    mask[1, 10:] = False
    scaler = MotionScaler.fit(x.numpy(), mask.numpy())
    batch = collate_contexts([r.context for r in data])
    k = torch.tensor([300, 700])
    noise = torch.randn(x.shape, dtype=torch.float64)
    offsets = offsets_from_shape(torch.tensor(np.stack([r.context.beta for r in data]))).double()
    params = dict(model.named_parameters())

    def loss_fn():
        c = model.encode_context(batch)
        z = q_sample(scaler.normalize(x), k, noise, SCHEDULE)
        return training_loss(x, scaler.denormalize(model(z, k, c, mask)), offsets, mask=mask)

    model.zero_grad()
    loss_fn().backward()
    rng = np.random.default_rng(0)
    worst, checked = 0.0, 0
    h = 1e-6
    for name, p in params.items():
        flat = p.data.view(-1)
        for i in rng.choice(flat.numel(), size=min(3, flat.numel()), replace=False):
            old = flat[i].item()
            with torch.no_grad():
                flat[i] = old + h
                up = loss_fn().item()
                flat[i] = old - h
                down = loss_fn().item()
                flat[i] = old
            numeric = (up - down) / (2 * h)
            analytic = 0.0 if p.grad is None else p.grad.view(-1)[i].item()
            err = abs(numeric - analytic)
            ok = err <= max(1e-4 * abs(numeric), 1e-6)
            worst = max(worst, err / max(abs(numeric), 1e-2))
            checked += 1
            assert ok, f"{name}[{i}]: analytic {analytic} numeric {numeric}"
    elapsed = time.time() - t0
    passed = elapsed < 120
    acceptance(1, passed, f"{checked} coordinates over {len(params)} tensors, worst rel {worst:.1e}, {elapsed:.0f}s")
    assert passed


def test_criterion_2_goal_endpoint_exact(models, world, acceptance):
    _, val = world
    ctxs = [r.context for r in val.records]
    out = models["full"].sample(ctxs, EVAL_SPEC, Stream(2))
    err = max(float(np.abs(m.trans[-1] - c.goal).max())
              for m, c in zip(decode_all(out, [c.start for c in ctxs]), ctxs))
    ok = len(ctxs) >= 200 and err < 1e-5
    acceptance(2, ok, f"{len(ctxs)} generations, max endpoint error {err:.2e} m")
    assert ok


def test_criterion_3_masked_gradients_are_zero(acceptance):
    rng = np.random.default_rng(3)
    g = torch.Generator().manual_seed(3)
    nonzero = 0
    for _ in range(100):
        T = int(rng.integers(2, 40))
        mask = torch.from_numpy(rng.random((2, T)) < rng.uniform(0.2, 0.8))
        x = torch.randn(2, T, FRAME_DIM, generator=g, dtype=torch.float64)
        x_hat = torch.randn(2, T, FRAME_DIM, generator=g, dtype=torch.float64, requires_grad=True)
        offsets = offsets_from_shape(torch.randn(2, 10, generator=g, dtype=torch.float64))
        (grad,) = torch.autograd.grad(training_loss(x, x_hat, offsets, mask=mask), x_hat)
        nonzero += int((grad[~mask] != 0).sum())
    ok = nonzero == 0
    acceptance(3, ok, f"100 mask patterns, {nonzero} non-zero masked gradient entries")
    assert ok


def test_criterion_4_oracle_equivalences(acceptance):
    rng = np.random.default_rng(4)
    vox_bad = 0
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        t1 = rng.uniform(-5, 5, 3)
        xyz = t1 + rng.uniform(-4.2, 4.2, (n, 3)) * [1.0, 0.5, 1.0]
        cls = rng.integers(0, 5, n)
        if rng.random() < 0.5:  # duplicate points into shared cells to force votes and ties
            xyz = np.concatenate((xyz, xyz[: n // 2] + 1e-4))
            cls = np.concatenate((cls, rng.integers(0, 5, n // 2)))
        vox_bad += not np.array_equal(voxelize(SemanticPointCloud(xyz, cls), t1).classes,
                                      brute_force_voxelize(xyz, cls, t1))
    skel = skeleton_from_shape(np.zeros(10))
    ade_err = 0.0
    for _ in range(20):
        gt, pred = random_motion(12, rng), random_motion(12, rng)
        ade = displacement_errors(gt, [pred], skel)[0]
        ade_err = max(ade_err, abs(ade - double_loop_ade(gt.joints(skel), pred.joints(skel))))
    fk_err = 0.0
    for n in (2, 3, 4):
        for _ in range(20):
            parents = tuple(range(-1, n - 1))
            offsets = rng.normal(size=(n, 3))
            rots = random_rotations(n, rng)
            root_t = rng.normal(size=3)
            got = np.asarray(forward_kinematics(rots[None, 1:], rots[None, 0], root_t[None], offsets, parents))[0]
            R, p = rots[0], root_t
            manual = [p]
            for j in range(1, n):
                p = p + R @ offsets[j]
                R = R @ rots[j]
                manual.append(p)
            fk_err = max(fk_err, float(np.abs(got - np.array(manual)).max()))
    Rs = random_rotations(10_000, rng)
    rot_err = float(np.abs(np.asarray(matrix_from_rot6d(rot6d_from_matrix(Rs))) - Rs).max())
    ok = vox_bad == 0 and ade_err < 1e-9 and fk_err < 1e-6 and rot_err < 1e-6
    acceptance(4, ok, f"voxel mismatches {vox_bad}/1000, ADE {ade_err:.1e}, FK {fk_err:.1e}, rot6d {rot_err:.1e}")
    assert ok


def test_criterion_5_goal_and_context_trends(models, world, acceptance):
    _, val = world
    recs = val.records
    none, _ = mean_aade(models["none"], recs, Stream(51), use_goal=False)
    goal, _ = mean_aade(models["goal"], recs, Stream(51))
    context, _ = mean_aade(models["scene_human"], recs, Stream(51), use_goal=False)
    budget = models["none_seconds"] + models["goal_seconds"] + models["scene_human_seconds"]
    ok = goal <= 0.5 * none and context < none and budget <= 30 * 60
    acceptance(5, ok, f"aADE none {none:.3f}, goal {goal:.3f} ({goal / none:.0%}), scene+human {context:.3f}, "
                      f"training {budget / 60:.1f} min")
    assert ok


def test_criterion_6_filtering_helps(acceptance):
    wins, details, recall_ok = 0, [], True
    for seed in range(1, 6):
        st = Stream(seed)
        records = generate_dataset(10, 400, st.split("train"), n_frames=FRAMES).records
        val = generate_dataset(5, 40, st.split("val"), n_frames=FRAMES).records
        corrupted, injected = inject_anomalies(records, 0.1, "scramble-pose", st.split("inject"))
        state = {}

        def train_fn(kept, it):
            # scoring model: no conditioning, fine-tuned between iterations
            state["gen"] = desk_train(kept, desk_config(), 600 if it == 1 else 300, st.split("filter", it),
                                      state.get("gen"))
            return state["gen"]

        def threshold_fn(gen, it, kept, scores):
            if "threshold" not in state:
                clean = [s for r, s in zip(kept, scores) if r.id not in injected]
                state["threshold"] = calibrate_threshold(clean, 0.95)
            return state["threshold"]

        policy = FilterPolicy(depth=K_STEPS // 2, iterations=2, ddim_steps=100)
        kept, dropped = filter_iterate(corrupted, policy, train_fn, st.split("score"), threshold_fn)
        gone = {r.id for d in dropped for r in d}
        recall = len(gone & injected) / len(injected)
        clean_drop = len(gone - injected) / (len(corrupted) - len(injected))
        recall_ok &= recall >= 0.8 and clean_drop <= 0.1
        full = desk_config(goal=True, shape=True)
        filtered = mean_aade(desk_train(kept, full, 600, st.split("final")), val, st.split("sample"))[0]
        unfiltered = mean_aade(desk_train(corrupted, full, 600, st.split("final")), val, st.split("sample"))[0]
        wins += filtered < unfiltered
        details.append(f"s{seed}: {filtered:.3f}/{unfiltered:.3f} r{recall:.2f} d{clean_drop:.2f}")
    ok = wins >= 4 and recall_ok
    acceptance(6, ok, f"filtered<corrupted in {wins}/5; " + ", ".join(details))
    assert ok


def test_criterion_7_plausibility_floor(models, world, acceptance):
    _, val = world
    recs = val.records
    S = 5
    rates = {}
    for name, use_goal in (("full", True), ("none", False)):
        _, out = mean_aade(models[name], recs, Stream(71), S, use_goal)
        preds, grids, grounds, skels = [], [], [], []
        for i, r in enumerate(recs):
            preds += decode_all(out[i * S:(i + 1) * S], [r.context.start] * S)
            grids += [r.context.voxel] * S
            grounds += [flat_ground(r.ground_height)] * S
        skels = [skeleton_from_shape(r.context.beta) for r in recs for _ in range(S)]
        cr = np.mean([collision_rates([p], g, s)[0] for p, g, s in zip(preds, grids, skels)])
        ffr = np.mean([foot_floating_rates([p], f, s)[0] for p, f, s in zip(preds, grounds, skels)])
        rates[name] = (float(cr), float(ffr))
    ok = rates["full"][0] <= rates["none"][0] and rates["full"][1] <= rates["none"][1]
    acceptance(7, ok, f"goal+scene CR {rates['full'][0]:.3f} FFR {rates['full'][1]:.3f}; "
                      f"unconditioned CR {rates['none'][0]:.3f} FFR {rates['none'][1]:.3f}")
    assert ok


def test_criterion_8_cli_is_bit_reproducible(tmp_path, acceptance):
    small = ["--frames", "16", "--k-steps", "100", "--ddim-steps", "10", "--n-blocks", "1", "--dim", "32",
             "--batch-size", "8", "--max-steps", "20", "--n-samples", "3", "--min-labelled-frames", "8",
             "--seed", "8"]
    outputs = []
    for run in ("a", "b"):
        d = tmp_path / run
        codes = [
            main(["synth", "--out", str(d / "data"), "--scenes", "3", "--records", "12"] + small),
            main(["train", "--out", str(d / "model"), "--data", str(d / "data/dataset.jsonl")] + small),
            main(["sample", "--out", str(d / "samples"), "--checkpoint", str(d / "model/model.pgck"),
                  "--data", str(d / "data/dataset.jsonl")] + small),
            main(["eval", "--out", str(d / "eval"), "--data", str(d / "data/dataset.jsonl"),
                  "--samples", str(d / "samples/samples.jsonl")] + small),
        ]
        assert codes == [0, 0, 0, 0]
        outputs.append({p.relative_to(d): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()})
    differ = sorted(str(k) for k in outputs[0] if outputs[0][k] != outputs[1].get(k))
    ok = not differ and outputs[0].keys() == outputs[1].keys()
    acceptance(8, ok, f"{len(outputs[0])} artifacts compared, differing: {differ or 'none'}")
    assert ok


def _max_boundary_jump(m, skel, boundaries):
    joints = m.joints(skel)
    return max(float(np.linalg.norm(joints[b] - joints[b - 1], axis=-1).max()) for b in boundaries)


def test_criterion_9_stitching_reduces_seams(models, world, acceptance):
    _, val = world
    gen = models["full"]
    overlap, intervals = 10, 3
    stitched, naive = [], []
    for run, rec in enumerate(val.records[:20]):
        ctx = dataclasses.replace(rec.context, goal=None)
        skel = skeleton_from_shape(ctx.beta)
        st = Stream(9).split("run", run)
        m = stitch_long_horizon(gen, lambda i, start: ctx if start is None else dataclasses.replace(
            ctx, start=np.asarray(start)), intervals, overlap, EVAL_SPEC, st)
        step = FRAMES - overlap
        stitched.append(_max_boundary_jump(m, skel, [FRAMES + i * step for i in range(intervals - 1)]))
        # naive: independent windows, each starting where the previous one ended
        start, parts = ctx.start, []
        for i in range(intervals):
            w = gen.sample([dataclasses.replace(ctx, start=start)], EVAL_SPEC, st.split("naive", i))[0]
            part = decode_model_space(w, start)
            parts.append(part)
            start = part.trans[-1]
        joined = type(parts[0])(np.concatenate([p.trans for p in parts]),
                                np.concatenate([p.root_orient for p in parts]),
                                np.concatenate([p.body_pose for p in parts]),
                                np.ones(intervals * FRAMES, dtype=bool))
        naive.append(_max_boundary_jump(joined, skel, [FRAMES * (i + 1) for i in range(intervals - 1)]))
    s, n = float(np.mean(stitched)), float(np.mean(naive))
    ok = s <= 0.5 * n
    acceptance(9, ok, f"mean max boundary jump stitched {s:.3f} m vs naive {n:.3f} m ({1 - s / n:.0%} lower)")
    assert ok
