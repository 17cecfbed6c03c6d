"""Acceptance criteria 1-9, one test each; every test records a pass/fail line for the session summary."""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import desk_config, record
from planktomae import tensor as T
from planktomae.classifier import build_finetune_model, classify_forward, label_smoothed_cross_entropy
from planktomae.cli import main
from planktomae.config import RunConfig
from planktomae.data import LabelBudget, generate_synthetic_dataset, sample_label_subset, stratified_kfold
from planktomae.evaluation import accuracy, aggregate_folds, confusion_matrix
from planktomae.gradcheck import check_gradients, to_float64
from planktomae.imaging import (BackgroundModel, compute_dataset_stats, estimate_background, eval_transform,
                                pad_to_square, to_working)
from planktomae.mae import (BatchMask, MaeModel, ModelConfig, ReconstructionBatch, masked_reconstruction_loss,
                            patch_target_normalize, sample_mask)
from planktomae.nn import Attention, Block, BlockConfig, drop_path, transformer_block_forward
from planktomae.optim import (AdamW, Schedule, accumulate_gradients, cosine_warmup_lr, llrd_multipliers,
                              scaled_base_lr)
from planktomae.tensor import Tensor
from planktomae.train import pretrain

INSTANCES = 20
# smallest relative-error denominator: exactly-zero gradients (e.g. the key bias, which softmax
# ignores) come back from central differences as ~1e-10 of float64 roundoff
FLOOR = 1e-5


def _finish(criterion, problems, detail):
    record(criterion, not problems, detail if not problems else f"{detail}; {problems[0]}")
    assert not problems, problems


# ---------------------------------------------------------------------------
# 1. gradient fidelity


def _proj(out: Tensor, rng) -> Tensor:
    """Scalar test function: a fixed random projection of the output."""
    return (out * rng.standard_normal(out.shape)).sum()


KERNELS = {
    "add": (lambda a, b: a + b, [(3, 4), (4,)]),
    "sub": (lambda a, b: a - b, [(2, 3), (2, 1)]),
    "mul": (lambda a, b: a * b, [(2, 3, 4), (1, 3, 1)]),
    "div": (lambda a, b: a / b, [(3, 3), (3, 3)]),
    "exp": (lambda x: T.exp(x), [(5,)]),
    "log": (lambda x: T.log(x), [(2, 4)]),
    "reshape": (lambda x: x.reshape(3, 8), [(2, 3, 4)]),
    "transpose": (lambda x: x.transpose(1, 0, 2), [(2, 3, 4)]),
    "broadcast_to": (lambda x: T.broadcast_to(x, (3, 2, 4)), [(1, 1, 4)]),
    "getitem": (lambda x: x[:, 0], [(3, 4, 2)]),
    "concat": (lambda a, b: T.concat([a, b], axis=1), [(2, 3), (2, 2)]),
    "gather_rows": (lambda x: T.gather_rows(x, np.array([[2, 0], [1, 1]])), [(2, 3, 4)]),
    "sum": (lambda x: x.sum(axis=0), [(3, 5)]),
    "mean": (lambda x: x.mean(axis=1), [(3, 5)]),
    "matmul": (lambda a, b: T.matmul(a, b), [(2, 3, 4), (2, 4, 3)]),
    "linear": (lambda x, w, b: T.linear(x, w, b), [(2, 3, 4), (4, 5), (5,)]),
    "softmax": (lambda x: T.softmax(x, -1), [(3, 6)]),
    "log_softmax": (lambda x: T.log_softmax(x, -1), [(4, 5)]),
    "layer_norm": (lambda x, g, b: T.layer_norm(x, g, b, 1e-6), [(3, 8), (8,), (8,)]),
    "gelu": (lambda x: T.gelu(x), [(4, 4)]),
    "drop_path": (lambda x: drop_path(x, 0.5, True, np.random.default_rng(3)), [(6, 2, 3)]),
}

MICRO = ModelConfig(image_size=8, patch_size=4, encoder_depth=1, encoder_dim=8, encoder_heads=2,
                    decoder_depth=1, decoder_dim=8, decoder_heads=2, mlp_ratio=2.0)


def _randomize(module, rng, scale=0.3):
    to_float64(module)
    params = [p for _, p in module.named_parameters()]
    for p in params:
        p.data[...] = rng.standard_normal(p.shape) * scale
    return params


def _kernel_error(name, draw):
    fn, shapes = KERNELS[name]
    rng = np.random.default_rng(1000 + draw)
    inputs = [rng.standard_normal(s) for s in shapes]
    if name == "div":
        inputs[1] = np.sign(inputs[1]) * (0.5 + np.abs(inputs[1]))
    if name == "log":
        inputs[0] = 0.5 + np.abs(inputs[0])
    return check_gradients(lambda *t: _proj(fn(*t), np.random.default_rng(77 + draw)), inputs, floor=FLOOR)


def _attention_error(draw):
    rng = np.random.default_rng(draw)
    attn = Attention(BlockConfig(8, 2), rng)
    params = _randomize(attn, rng)
    x = rng.standard_normal((2, 3, 8))
    r = rng.standard_normal((2, 3, 8))
    return check_gradients(lambda t: (attn(t) * r).sum(), [x], params=params, floor=FLOOR)


def _block_error(draw):
    rng = np.random.default_rng(100 + draw)
    block = Block(BlockConfig(8, 2, 2.0, 0.3), rng)
    params = _randomize(block, rng)
    x = rng.standard_normal((2, 3, 8))
    r = rng.standard_normal((2, 3, 8))
    seed = 500 + draw  # same drop-path draw on every evaluation

    def fn(t):
        return (transformer_block_forward(t, block, True, np.random.default_rng(seed)) * r).sum()

    return check_gradients(fn, [x], params=params, floor=FLOOR)


def _mae_loss_error(draw):
    rng = np.random.default_rng(200 + draw)
    model = MaeModel(MICRO, rng)
    params = _randomize(model, rng)
    patches = rng.standard_normal((2, 4, 16))
    mask = BatchMask.sample(2, 4, 0.5, rng)

    def fn():
        return masked_reconstruction_loss(ReconstructionBatch(patches, model(patches, mask), mask, True))

    return check_gradients(fn, [], params=params, max_entries=6, rng=np.random.default_rng(draw),
                           floor=FLOOR)


def _classifier_error(draw):
    rng = np.random.default_rng(300 + draw)
    model = build_finetune_model(None, 3, hidden=6, scratch=True, config=MICRO, seed=draw)
    params = _randomize(model, rng)
    images = rng.standard_normal((3, 1, 8, 8))
    labels = [0, 2, 1]

    def fn():
        return label_smoothed_cross_entropy(classify_forward(model, images, False), labels, 0.1)

    return check_gradients(fn, [], params=params, max_entries=6, rng=np.random.default_rng(draw),
                           floor=FLOOR)


def test_criterion_1_gradient_fidelity():
    start = time.perf_counter()
    problems, worst = [], 0.0
    cases = [(f"kernel {n}", lambda d, n=n: _kernel_error(n, d)) for n in sorted(KERNELS)]
    cases += [("attention", _attention_error), ("block", _block_error), ("mae loss path", _mae_loss_error),
              ("classifier head", _classifier_error)]
    for name, check in cases:
        for draw in range(INSTANCES):
            err = check(draw)
            worst = max(worst, err)
            if not err < 1e-4:
                problems.append(f"{name} draw {draw}: rel err {err:.2e}")
    seconds = time.perf_counter() - start
    if seconds >= 120:
        problems.append(f"took {seconds:.0f}s")
    _finish(1, problems, f"{len(cases)} cases x {INSTANCES} draws, max rel err {worst:.1e} "
                         f"(denominator floor {FLOOR:g}), {seconds:.0f}s")


# ---------------------------------------------------------------------------
# 2. masked-loss exactness


def test_criterion_2_masked_loss_exactness():
    problems = []
    rng = np.random.default_rng(0)
    for trial in range(INSTANCES):
        target = rng.standard_normal((3, 16, 64))
        mask = BatchMask.sample(3, 16, 0.75, rng)
        perfect = patch_target_normalize(target)
        if masked_reconstruction_loss(ReconstructionBatch(target, Tensor(perfect), mask, True)).item() != 0.0:
            problems.append(f"trial {trial}: perfect reconstruction gives nonzero loss")
        pred = rng.standard_normal((3, 16, 64))
        base = masked_reconstruction_loss(ReconstructionBatch(target, Tensor(pred), mask, True)).item()
        bumped = pred.copy()
        rows = np.arange(3)[:, None]
        bumped[rows, mask.visible] += rng.standard_normal(bumped[rows, mask.visible].shape) * 10.0 ** trial
        if masked_reconstruction_loss(ReconstructionBatch(target, Tensor(bumped), mask, True)).item() != base:
            problems.append(f"trial {trial}: visible perturbation changed the loss")
        leaf = Tensor(pred, requires_grad=True)
        masked_reconstruction_loss(ReconstructionBatch(target, leaf, mask, True)).backward()
        if np.any(leaf.grad[rows, mask.visible] != 0.0):
            problems.append(f"trial {trial}: visible gradient nonzero")
    m = sample_mask(196, 0.75, rng)
    if (m.num_masked, len(m.visible_indices)) != (147, 49):
        problems.append(f"ViT-L grid masks {m.num_masked}")
    _finish(2, problems, f"{INSTANCES} trials exact; |M| = {m.num_masked} of 196")


# ---------------------------------------------------------------------------
# 3. pretraining learns


@pytest.mark.slow
def test_criterion_3_pretraining_learns(desk_pretrain):
    cfg = desk_config("desk_pretrain")
    shape = (cfg.image_size, cfg.patch_size, cfg.encoder_depth, cfg.encoder_dim, cfg.decoder_depth,
             cfg.decoder_dim, cfg.epochs, cfg.batch_size)
    problems = []
    if shape != (32, 8, 4, 64, 2, 32, 100, 64):
        problems.append(f"desk preset is not the tiny setting: {shape}")
    losses = desk_pretrain.losses
    ratio = losses[-1] / losses[0]
    if len(losses) != 100 or not ratio <= 0.5:
        problems.append(f"ratio {ratio:.3f} over {len(losses)} epochs")
    if desk_pretrain.seconds > 30 * 60:
        problems.append(f"took {desk_pretrain.seconds:.0f}s")
    _finish(3, problems, f"loss {losses[0]:.4f} -> {losses[-1]:.4f}, ratio {ratio:.3f}, "
                         f"{desk_pretrain.seconds / 60:.1f} min")


# ---------------------------------------------------------------------------
# 4. pretrained beats scratch with few labels


@pytest.mark.slow
def test_criterion_4_pretrained_beats_scratch(desk_pretrain, heldout):
    ckpt = desk_pretrain.checkpoint
    seeds = (0, 1, 2)
    gaps, full_gaps, seconds = [], [], 0.0
    for fraction, out in ((0.05, gaps), (1.0, full_gaps)):
        for seed in seeds:
            pre = heldout.finetune(ckpt, seed, fraction, scratch=False).accuracy
            scratch = heldout.finetune(ckpt, seed, fraction, scratch=True).accuracy
            out.append(pre - scratch)
            seconds += heldout.run_seconds(ckpt, seed, fraction, False) + heldout.run_seconds(ckpt, seed, fraction, True)
    gap, full_gap = float(np.mean(gaps)), float(np.mean(full_gaps))
    problems = []
    if not gap >= 0.10:
        problems.append(f"5% gap {100 * gap:.1f} points")
    if seconds > 3600:
        problems.append(f"took {seconds:.0f}s")
    n_train = heldout.finetune(ckpt, 0, 0.05, False).train_count
    # the 100% gap may shrink below 2 points; it is reported, not required
    _finish(4, problems, f"5% labels ({n_train} images): gap {100 * gap:.1f} points "
                         f"(per seed {', '.join(f'{100 * g:.1f}' for g in gaps)}); "
                         f"100% labels: gap {100 * full_gap:.1f} points (informational); {seconds / 60:.1f} min")


# ---------------------------------------------------------------------------
# 5. protocol exactness


def test_criterion_5_protocol_exactness():
    rng = np.random.default_rng(5)
    problems = []
    fractions = (0.01, 0.05, 0.1, 1.0)
    for trial in range(200):
        k = int(rng.integers(2, 11))
        counts = rng.integers(k, k + 60, size=int(rng.integers(2, 8)))
        labels = rng.permutation(np.repeat(np.arange(len(counts)), counts))
        seed = int(rng.integers(0, 2**31))
        splits = stratified_kfold(labels, k, seed)
        tests = np.concatenate([s.indices("test") for s in splits])
        if not np.array_equal(np.sort(tests), np.arange(len(labels))):
            problems.append(f"trial {trial}: test parts do not partition")
        for s in splits:
            train, val, test = s.indices("train"), s.indices("val"), s.indices("test")
            if set(train) & set(test) or set(val) & set(test) or set(train) & set(val):
                problems.append(f"trial {trial} fold {s.fold}: parts overlap")
            if len(train) + len(val) + len(test) != len(labels):
                problems.append(f"trial {trial} fold {s.fold}: records unassigned")
            for part, share in ((test, 1 / k), (val, (1 - 1 / k) * 0.15)):
                off = np.abs(np.bincount(labels[part], minlength=len(counts)) - counts * share)
                if off.max() > 1.0 + 1e-9:
                    problems.append(f"trial {trial} fold {s.fold}: stratification off by {off.max():.2f}")
        train = splits[0].indices("train")
        n = np.bincount(labels[train], minlength=len(counts))
        previous = set()
        for p in fractions:
            sub = sample_label_subset(train, labels, p, seed)
            expected = np.maximum(1, np.floor(p * n + 0.5 + 1e-9)).astype(int)
            if not np.array_equal(np.bincount(labels[sub], minlength=len(counts)), np.minimum(expected, n)):
                problems.append(f"trial {trial}: subset counts at p={p}")
            if not previous <= set(sub) or not set(sub) <= set(train):
                problems.append(f"trial {trial}: subsets not nested inside the train part at p={p}")
            previous = set(sub)
    if LabelBudget(0.01).count(3) != 1:
        problems.append("min-1 rule")
    _finish(5, problems, "200 random manifests, K in 2..10")


# ---------------------------------------------------------------------------
# 6. determinism


def _tree(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def _cli_pipeline(workdir: Path) -> None:
    (workdir / "run.json").write_text(json.dumps({
        "num_labels": 3, "per_label": 20, "epochs": 3, "batch_size": 20, "checkpoint_every": 2,
        "finetune_epochs": 3, "finetune_warmup_epochs": 1, "finetune_batch_size": 16, "hidden": 16,
        "fraction": 0.1, "folds": "0,1"}))
    steps = [["synth", "--out", "data"],
             ["pretrain", "--manifest", "data/manifest.csv", "--out", "pre", "--dump-recon"],
             ["finetune", "--manifest", "data/manifest.csv", "--checkpoint", "pre/checkpoint.bin", "--out", "ft"],
             ["eval", "--manifest", "ft/splits/fold0_test.csv", "--checkpoint", "ft/fold0/model.bin", "--out", "ev"]]
    for step in steps:
        assert main([step[0], "--config", "run.json", "--seed", "11", *step[1:]]) == 0, step


def test_criterion_6_determinism(tmp_path, monkeypatch, capsys):
    problems = []
    trees = []
    for name in ("first", "second"):
        (tmp_path / name).mkdir()
        monkeypatch.chdir(tmp_path / name)
        _cli_pipeline(tmp_path / name)
        trees.append(_tree(tmp_path / name))
    capsys.readouterr()
    a, b = trees
    if set(a) != set(b):
        problems.append(f"file sets differ: {sorted(set(a) ^ set(b))[:3]}")
    differing = sorted(k for k in set(a) & set(b) if a[k] != b[k])
    if differing:
        problems.append(f"files differ: {differing[:3]}")
    checked = [k for k in a if k.endswith((".bin", ".csv", ".json"))]

    # resume at epoch 3 equals the uninterrupted 6-epoch run
    ds = generate_synthetic_dataset(3, 16, 32, seed=4)
    images = list(ds.images)
    cfg = RunConfig(epochs=6, batch_size=16, checkpoint_every=100, seed=2)
    stats = compute_dataset_stats(images, cfg.working_size)
    straight = pretrain(cfg, images, stats, tmp_path / "straight")
    pretrain(cfg, images, stats, tmp_path / "cut", stop_after=3)
    resumed = pretrain(cfg, images, stats, tmp_path / "cut", resume=tmp_path / "cut/checkpoint.bin")
    diff = max(float(np.abs(straight.model.state_dict()[k] - resumed.model.state_dict()[k]).max())
               for k in straight.model.state_dict())
    if diff != 0.0:
        problems.append(f"resume max-abs-diff {diff:g}")
    if (tmp_path / "straight/checkpoint.bin").read_bytes() != (tmp_path / "cut/checkpoint.bin").read_bytes():
        problems.append("resumed checkpoint file differs")
    if (tmp_path / "straight/loss.csv").read_text() != (tmp_path / "cut/loss.csv").read_text():
        problems.append("resumed loss log differs")
    _finish(6, problems, f"{len(a)} files identical across runs ({len(checked)} checkpoints/metrics); "
                         f"resume max-abs-diff {diff:g}")


# ---------------------------------------------------------------------------
# 7. schedule and scaling arithmetic


def test_criterion_7_schedule_arithmetic():
    problems = []
    if not math.isclose(scaled_base_lr(1.5e-4, 4096), 2.4e-3, rel_tol=1e-12):
        problems.append(f"scaled lr {scaled_base_lr(1.5e-4, 4096)}")
    s = Schedule(2.4e-3, 40, 800, 10)
    if cosine_warmup_lr(s, s.warmup_steps) != 2.4e-3:
        problems.append("warmup end is not the peak")
    if abs(cosine_warmup_lr(s, s.total_steps)) > 1e-18:
        problems.append("final lr is not zero")
    plan = llrd_multipliers(4, 0.75)
    want = {"head": 1.0, "block.4": 0.75, "block.3": 0.75**2, "block.2": 0.75**3, "block.1": 0.75**4,
            "embed": 0.75**5}
    for group, value in want.items():
        if not math.isclose(plan.multiplier(group), value, rel_tol=1e-12):
            problems.append(f"LLRD {group} = {plan.multiplier(group)}")

    rng = np.random.default_rng(7)
    x, y = rng.standard_normal((8, 5)), rng.standard_normal((8, 3))
    deltas = []
    for micro in (1, 4):
        w = Tensor(np.random.default_rng(1).standard_normal((5, 3)), requires_grad=True)
        w0 = w.data.copy()
        opt = AdamW([("w", w)], lr=1e-2)

        def loss(idx):
            d = T.linear(Tensor(x[idx]), w) - y[idx]
            return (d * d).mean()

        accumulate_gradients(np.array_split(np.arange(8), micro), loss, opt)
        deltas.append(w.data - w0)
    acc_err = float(np.abs(deltas[0] - deltas[1]).max())
    if not acc_err < 1e-5:
        problems.append(f"accumulation delta {acc_err:g}")
    _finish(7, problems, f"lr/schedule/LLRD exact; 4x2 vs 8 delta {acc_err:.1e}")


# ---------------------------------------------------------------------------
# 8. preprocessing exactness


def _two_pass(images, working_size):
    pixels = np.concatenate([to_working(i, working_size).astype(np.float64).ravel() for i in images])
    mean = pixels.sum() / pixels.size
    return mean, math.sqrt(((pixels - mean) ** 2).sum() / pixels.size)


def test_criterion_8_preprocessing_exactness():
    problems = []
    rng = np.random.default_rng(8)
    for trial in range(100):
        h, w = (int(v) for v in rng.integers(1, 60, 2))
        shape = (h, w) if trial % 3 else (h, w, 3)
        img = rng.integers(0, 256, shape, dtype=np.uint8)
        out = pad_to_square(img, estimate_background(img), np.random.default_rng(trial))
        side = max(h, w)
        top, left = (side - h) // 2, (side - w) // 2
        if out.shape[:2] != (side, side) or not np.array_equal(out[top:top + h, left:left + w], img):
            problems.append(f"trial {trial}: pad_to_square altered content or shape")
    uniform = np.full((30, 50), 173, np.uint8)
    uniform[5:25, 10:40] = rng.integers(0, 256, (20, 30))
    if estimate_background(uniform) != BackgroundModel((173,), (0.0,)):
        problems.append(f"uniform border gave {estimate_background(uniform)}")
    images = [rng.integers(0, 256, (int(rng.integers(8, 70)),) * 2, dtype=np.uint8) for _ in range(40)]
    stats = compute_dataset_stats(images, 36)
    for img in images[:10]:
        if eval_transform(img, 32, stats, 36).tobytes() != eval_transform(img, 32, stats, 36).tobytes():
            problems.append("eval_transform not bitwise repeatable")
    mean, std = _two_pass(images, 36)
    err = max(abs(stats.mean - mean), abs(stats.std - std))
    if not err < 1e-6:
        problems.append(f"stats off by {err:g}")
    _finish(8, problems, f"100 pads exact, stats vs two-pass {err:.1e}")


# ---------------------------------------------------------------------------
# 9. metrics consistency


def test_criterion_9_metrics_consistency():
    problems = []
    rng = np.random.default_rng(9)
    for trial in range(1000):
        k = int(rng.integers(2, 12))
        n = int(rng.integers(1, 300))
        pred, labels = rng.integers(0, k, n), rng.integers(0, k, n)
        cm = confusion_matrix(pred, labels, k)
        if cm.total != n or abs(np.trace(cm.counts) / cm.counts.sum() - accuracy(pred, labels)) > 1e-12:
            problems.append(f"trial {trial}: trace/sum disagrees with accuracy")
    summary = aggregate_folds([1, 2, 3])
    if (summary.mean, summary.std) != (2.0, 1.0):
        problems.append(f"aggregate {{1,2,3}} gave ({summary.mean}, {summary.std})")
    _finish(9, problems, "1,000 random sets consistent; {1,2,3} -> (2, 1)")
