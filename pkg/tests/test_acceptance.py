"""Acceptance suite: the go/no-go properties of the whole laboratory.

Each test states a contract the package must keep: exact gradients, exact
EMA and mixing arithmetic, the advertised target-pixel proportions, bitwise
reproducibility, and the directional claim that dual-group training on this
benchmark matches or beats a single teacher-student baseline.  The slower
tests carry explicit wall-clock budgets and assert them.
"""

import time
from dataclasses import dataclass

import numpy as np
import pytest

import oracles
from dtslab.autodiff import Tape, Tensor, backward, weighted_cross_entropy
from dtslab.mixing import IGNORE_LABEL, classmix_mask, mix, mix_labels
from dtslab.model import SegArch, SegNet, ema_update, forward, init_group
from dtslab.optim import AdamW, lr_at
from dtslab.shapesworld import SOURCE, TARGET, _derive_seed, generate_scene
from dtslab.cli import cli
from dtslab.trainer import (COMBINATIONS, ROUTINGS, SALT_SOURCE_LOADER,
                            SALT_STEP, SALT_TARGET_LOADER, DtsTrainer,
                            ProbEstimator, SeededLoader, TrainerConfig,
                            assemble_batch, evaluate_model, pseudo_slot_plan)


def tuned(**kw) -> TrainerConfig:
    """Benchmark-scale hyperparameters used by every training test here."""
    base = dict(total_iters=2000, warmup_iters=100, eval_interval=0,
                ema_momentum=0.99, lr_encoder=5e-4, lr_decoder=2e-3)
    base.update(kw)
    return TrainerConfig(**base)


@pytest.fixture(scope="module")
def world():
    """Shared two-domain image collections at full benchmark resolution."""
    src = [generate_scene(_derive_seed(0, 0, i), SOURCE) for i in range(500)]
    tgt = [generate_scene(_derive_seed(0, 1, i), TARGET).image
           for i in range(500)]
    ev_t = [generate_scene(_derive_seed(0, 2, i), TARGET) for i in range(150)]
    ev_s = [generate_scene(_derive_seed(0, 3, i), SOURCE) for i in range(150)]
    return src, tgt, ev_t, ev_s


# ---------------------------------------------------------------------------
# 1. Gradient audit: backward pass vs central finite differences.
# ---------------------------------------------------------------------------

def test_gradient_audit_20_nets():
    t0 = time.monotonic()
    arch = SegArch(num_classes=3, stem_channels=4, hidden_channels=6)
    good = 0
    total = 0
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        net = SegNet.init(arch, seed=seed)
        x = rng.normal(size=(1, 3, 8, 8)).astype(np.float32)
        labels = rng.integers(0, 3, size=(1, 8, 8)).astype(np.uint8)
        labels[0, rng.random((8, 8)) < 0.1] = IGNORE_LABEL
        weights = rng.uniform(0.5, 1.0, size=(1, 8, 8)).astype(np.float32)

        with Tape() as tape:
            logits = forward(net, Tensor(x))
            loss = weighted_cross_entropy(logits, labels, weights,
                                          ignore=IGNORE_LABEL)
        backward(loss, tape)

        params64 = {k: p.data.astype(np.float64) for k, p in net.params.items()}
        x64 = x.astype(np.float64)

        def f():
            out = oracles.ref_segnet_forward(params64, x64)
            return oracles.ref_weighted_ce(out, labels, weights,
                                           ignore=IGNORE_LABEL)

        assert abs(float(loss.data) - f()) < 1e-4
        for name, p in net.params.items():
            fd = oracles.fd_gradient(f, params64[name])
            an = p.grad.astype(np.float64)
            denom = np.maximum(np.maximum(np.abs(fd), np.abs(an)), 1e-8)
            rel = np.abs(an - fd) / denom
            exact_zero = (an == 0.0) & (fd == 0.0)
            good += int(((rel < 1e-3) | exact_zero).sum())
            total += rel.size
    frac = good / total
    elapsed = time.monotonic() - t0
    assert frac >= 0.99, f"only {frac:.4%} of {total} coordinates match"
    assert elapsed < 60.0, f"gradient audit took {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# 2. EMA exactness for boundary and interior momenta.
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("lam", [0.0, 0.5, 0.999, 1.0])
def test_ema_exactness(lam):
    arch = SegArch(num_classes=3, stem_channels=4, hidden_channels=6)
    group = init_group(arch, seed=4, group_id=1)
    rng = np.random.default_rng(7)
    for p in group.student.params.values():
        p.data += rng.normal(scale=0.05, size=p.data.shape).astype(np.float32)
    old = {k: p.data.copy() for k, p in group.teacher.params.items()}
    ema_update(group, lam)
    for name, p in group.teacher.params.items():
        new = p.data.astype(np.float64)
        st = group.student.params[name].data.astype(np.float64)
        delta_want = (1.0 - lam) * (st - old[name].astype(np.float64))
        np.testing.assert_allclose(new - old[name].astype(np.float64),
                                   delta_want, rtol=0, atol=1e-6)
        if lam == 0.0:
            np.testing.assert_array_equal(p.data,
                                          group.student.params[name].data)
        if lam == 1.0:
            np.testing.assert_array_equal(p.data, old[name])


# ---------------------------------------------------------------------------
# 3. Mixing conservation: every output pixel comes from exactly the input
#    that the mask designates, for images, labels, and weights alike.
# ---------------------------------------------------------------------------

def test_mixing_conservation_1000_triples():
    t0 = time.monotonic()
    rng = np.random.default_rng(3)
    h = w = 24
    for trial in range(1000):
        a = rng.normal(size=(3, h, w)).astype(np.float32)
        b = rng.normal(size=(3, h, w)).astype(np.float32)
        la = rng.integers(0, 6, size=(h, w)).astype(np.uint8)
        lb = rng.integers(0, 6, size=(h, w)).astype(np.uint8)
        wa = rng.uniform(size=(h, w)).astype(np.float32)
        wb = rng.uniform(size=(h, w)).astype(np.float32)
        if trial % 2:
            mask = classmix_mask(la, rng)
        else:
            mask = rng.random((h, w)) < rng.uniform(0.1, 0.9)
        out = mix(a, b, mask)
        np.testing.assert_array_equal(out[:, mask], a[:, mask])
        np.testing.assert_array_equal(out[:, ~mask], b[:, ~mask])
        lab, wgt = mix_labels(la, lb, wa, wb, mask)
        np.testing.assert_array_equal(lab[mask], la[mask])
        np.testing.assert_array_equal(lab[~mask], lb[~mask])
        np.testing.assert_array_equal(wgt[mask], wa[mask])
        np.testing.assert_array_equal(wgt[~mask], wb[~mask])
    assert time.monotonic() - t0 < 10.0


# ---------------------------------------------------------------------------
# 4. Proportion statistics: the three data combinations deliver roughly
#    25% / 50% / 75% target pixels per batch on class-balanced data.
# ---------------------------------------------------------------------------

@dataclass
class _FlatSample:
    image: np.ndarray
    label: np.ndarray


def _balanced_samples(n, h=32, w=32, classes=4, seed=0):
    """Images with four equal-area vertical stripes, one class each."""
    rng = np.random.default_rng(seed)
    out = []
    stripe = w // classes
    for _ in range(n):
        label = np.zeros((h, w), dtype=np.uint8)
        order = rng.permutation(classes)
        for j, cls in enumerate(order):
            label[:, j * stripe:(j + 1) * stripe] = cls
        image = rng.normal(size=(3, h, w)).astype(np.float32) * 0.1 + 0.5
        out.append(_FlatSample(image=image, label=label))
    return out


@pytest.mark.parametrize("combo_name, expected", [
    ("group1", 0.25), ("setting_a", 0.50), ("setting_b", 0.75)])
def test_target_pixel_proportions(combo_name, expected):
    t0 = time.monotonic()
    combo = COMBINATIONS[combo_name]
    samples = _balanced_samples(64, seed=1)
    targets = [s.image for s in _balanced_samples(64, seed=2)]
    src_loader = SeededLoader(samples, 9, SALT_SOURCE_LOADER)
    tgt_loader = SeededLoader(targets, 9, SALT_TARGET_LOADER)
    net = SegNet.init(SegArch(num_classes=4, stem_channels=4,
                              hidden_channels=6), seed=0)
    k = 2
    n_slots = len(pseudo_slot_plan(combo, k, 1, ROUTINGS["default"],
                                   dual=False))
    labelers = [("g1_teacher", net)] * n_slots
    fracs = []
    for i in range(1000):
        rng = np.random.default_rng(i)
        batch, _ = assemble_batch(combo, src_loader, tgt_loader, labelers,
                                  rng, k, 0.968)
        fracs.append(float(np.mean([s.target_frac for s in batch])))
    mean = float(np.mean(fracs))
    assert abs(mean - expected) <= 0.10, f"{combo_name}: mean frac {mean:.3f}"
    assert time.monotonic() - t0 < 120.0


# ---------------------------------------------------------------------------
# 5. Confidence-comparison estimator equals a brute-force recount.
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("window", [4000, 120])
def test_prob_estimator_matches_recount(window):
    for seed in range(10):
        rng = np.random.default_rng(seed)
        est = ProbEstimator(window=window)
        indicators = []
        for _ in range(500):
            a, b = rng.uniform(size=2)
            est.record(a, b)
            indicators.append(1 if a > b else 0)
        want = oracles.ref_prob(indicators, window=window)
        assert est.value() == pytest.approx(want, abs=1e-12)


# ---------------------------------------------------------------------------
# 6. With the second group disabled, the orchestrated trainer reduces
#    bitwise to a plain single teacher-student loop built from parts.
# ---------------------------------------------------------------------------

def _reference_step(group, opt, loaders, cfg, t):
    src_loader, tgt_loader = loaders
    ema_update(group, cfg.ema_momentum)
    combo = COMBINATIONS[cfg.group1]
    plan = pseudo_slot_plan(combo, cfg.batch_k, 1, cfg.routing_policy(),
                            dual=False)
    labelers = [("g1_teacher", group.teacher) for _ in plan]
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([cfg.seed, SALT_STEP, t, 1])))
    samples, _ = assemble_batch(combo, src_loader, tgt_loader, labelers, rng,
                                cfg.batch_k, cfg.conf_threshold, cfg.augment)
    images = np.stack([s.image for s in samples]).astype(np.float32)
    labels = np.stack([s.label for s in samples])
    weights = np.stack([s.pixel_weight for s in samples]).astype(np.float32)
    with Tape() as tape:
        logits = forward(group.student, Tensor(images))
        loss = weighted_cross_entropy(logits, labels, weights,
                                      ignore=IGNORE_LABEL)
    backward(loss, tape)
    grads = {n: p.grad for n, p in group.student.params.items()}
    scale = lr_at(min(t + 1, cfg.total_iters), 1.0, cfg.warmup_iters,
                  max(cfg.total_iters, 1), cfg.lr_decay, cfg.lr_power)
    opt.step(grads, scale)


@pytest.mark.parametrize("seed", [0, 1])
def test_trainer_reduces_to_reference_loop(seed):
    t0 = time.monotonic()
    src = [generate_scene(_derive_seed(5, 0, i), SOURCE, 32, 32)
           for i in range(12)]
    tgt = [generate_scene(_derive_seed(5, 1, i), TARGET, 32, 32).image
           for i in range(12)]
    cfg = tuned(total_iters=50, warmup_iters=5, lr_decay="poly", seed=seed,
                group1="group1", group2="", bidirectional=False)

    trainer = DtsTrainer(cfg, src, tgt, [])

    group = init_group(cfg.arch(), cfg.seed, group_id=1)
    pg = group.student.param_groups()
    opt = AdamW(group.student.params,
                {"encoder": (pg["encoder"], cfg.lr_encoder),
                 "decoder": (pg["decoder"], cfg.lr_decoder)},
                weight_decay=cfg.weight_decay, beta1=cfg.beta1,
                beta2=cfg.beta2, eps=cfg.eps)
    loaders = (SeededLoader(src, cfg.seed, SALT_SOURCE_LOADER),
               SeededLoader(tgt, cfg.seed, SALT_TARGET_LOADER))

    for t in range(50):
        trainer.train_step(t)
        _reference_step(group, opt, loaders, cfg, t)
        for name in group.student.params:
            np.testing.assert_array_equal(
                trainer.g1.student.params[name].data,
                group.student.params[name].data,
                err_msg=f"student {name} diverged at step {t}")
            np.testing.assert_array_equal(
                trainer.g1.teacher.params[name].data,
                group.teacher.params[name].data,
                err_msg=f"teacher {name} diverged at step {t}")
    assert time.monotonic() - t0 < 120.0


# ---------------------------------------------------------------------------
# 7. Supervised sanity plus the domain gap that makes adaptation worth doing.
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_supervised_training_and_domain_gap(world):
    t0 = time.monotonic()
    src, _, ev_t, ev_s = world
    cfg = tuned(total_iters=500, seed=1, group1="s_only", group2="")
    trainer = DtsTrainer(cfg, src, [], [])
    for t in range(cfg.total_iters):
        trainer.train_step(t)
    _, miou_src = evaluate_model(trainer.g1.student, ev_s, 5)
    _, miou_tgt = evaluate_model(trainer.g1.student, ev_t, 5)
    elapsed = time.monotonic() - t0
    assert miou_src >= 0.85, f"source mIoU {miou_src:.4f}"
    assert miou_src - miou_tgt >= 0.10, \
        f"domain gap only {miou_src - miou_tgt:.4f}"
    assert elapsed < 600.0


# ---------------------------------------------------------------------------
# 8. Directional claim: over three seeds, dual-group training matches or
#    beats the single teacher-student baseline, and a single model fed the
#    50%-target combination does not beat the dual setup.  All three
#    configurations are compared at the same model slot (group 1's student,
#    the learner every configuration has), so the ordering measures what
#    the partner group contributes.
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_dual_training_ordering_over_three_seeds(world):
    t0 = time.monotonic()
    src, tgt, ev_t, _ = world

    def final_miou(seed, group1, group2):
        cfg = tuned(seed=seed, group1=group1, group2=group2)
        trainer = DtsTrainer(cfg, src, tgt, [])
        for t in range(cfg.total_iters):
            trainer.train_step(t)
        _, miou = evaluate_model(trainer.g1.student, ev_t, 5)
        return miou

    full, base, focus = [], [], []
    for seed in (1, 2, 3):
        full.append(final_miou(seed, "group1", "setting_b"))
        base.append(final_miou(seed, "group1", ""))
        focus.append(final_miou(seed, "setting_a", ""))
    med = lambda xs: float(np.median(xs))
    print(f"\nfull={['%.4f' % m for m in full]} "
          f"baseline={['%.4f' % m for m in base]} "
          f"focus={['%.4f' % m for m in focus]}")
    elapsed = time.monotonic() - t0
    assert med(full) >= med(base), \
        f"median full {med(full):.4f} < median baseline {med(base):.4f}"
    assert med(focus) <= med(full), \
        f"median focus-only {med(focus):.4f} > median full {med(full):.4f}"
    assert elapsed < 5400.0


# ---------------------------------------------------------------------------
# 9. Determinism: repeating a train invocation reproduces every artifact
#    byte for byte.
# ---------------------------------------------------------------------------

def test_train_artifacts_are_byte_identical(tmp_path, capsys):
    data = tmp_path / "data"
    assert cli(["gen-data", "--out", str(data), "--seed", "2", "--source",
                "12", "--target", "12", "--eval", "4"]) == 0
    cfg = tmp_path / "run.ini"
    cfg.write_text(
        f"[data]\ndir = {data}\n"
        "[train]\niters = 25\nwarmup = 5\neval_interval = 10\n"
        "lr_encoder = 0.0005\nlr_decoder = 0.002\nseed = 3\n"
        "[dts]\nema_momentum = 0.99\n")
    outs = []
    for name in ("first", "second"):
        out = tmp_path / name
        assert cli(["train", "--config", str(cfg), "--out", str(out)]) == 0
        outs.append(out)
    capsys.readouterr()
    a, b = outs
    for artifact in ("metrics.csv", "audit.log", "events.log", "g1_student",
                     "g1_teacher", "g2_student", "g2_teacher"):
        assert (a / artifact).read_bytes() == (b / artifact).read_bytes(), \
            artifact


# ---------------------------------------------------------------------------
# 10. All five pseudo-label routing configurations run to completion and
#     their audit logs prove which models supplied the labels.
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_routing_grid_runs_and_audits(world, tmp_path):
    t0 = time.monotonic()
    src, tgt, _, _ = world
    routing_names = ["table5-row1", "table5-row2", "table5-row3",
                     "table5-row4", "table5-row5"]
    logs = {}
    for name in routing_names:
        cfg = tuned(total_iters=200, warmup_iters=20, seed=4,
                    group1="group1", group2="setting_b", routing=name,
                    out_dir=str(tmp_path / name))
        trainer = DtsTrainer(cfg, src[:80], tgt[:80], [])
        trainer.run()
        text = (tmp_path / name / "audit.log").read_text()
        lines = [ln.split(",") for ln in text.strip().splitlines()[1:]]
        assert lines, name
        used = {1: set(), 2: set()}
        for ln in lines:
            used[int(ln[1])].add(ln[4])
        policy = ROUTINGS[name]
        want1 = set(pseudo_slot_plan(COMBINATIONS["group1"], 2, 1, policy))
        want2 = set(pseudo_slot_plan(COMBINATIONS["setting_b"], 2, 2, policy))
        assert used[1] == want1, f"{name}: group-1 sources {used[1]}"
        assert used[2] == want2, f"{name}: group-2 sources {used[2]}"
        logs[name] = text
    blobs = list(logs.values())
    for i in range(len(blobs)):
        for j in range(i + 1, len(blobs)):
            assert blobs[i] != blobs[j], \
                f"{routing_names[i]} and {routing_names[j]} logged identically"
    assert time.monotonic() - t0 < 1800.0
