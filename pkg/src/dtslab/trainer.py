"""The four-step dual teacher-student training loop.

Each iteration runs, strictly in order: (1) EMA update of group 1's
teacher, (2) gradient update of group 1's student on a source/mixed batch,
(3) EMA update of group 2's teacher, (4) gradient update of group 2's
student on its target-heavy batch.  Because batches are assembled at the
moment their step runs, group 1 only ever sees group-2 models from before
this iteration, while group 2 sees group-1 models already advanced by
steps (1)-(2) ("learning from future").

Determinism contract: all randomness flows from `config.seed` through
named SeedSequence streams (data loaders use (seed, salt, epoch), each
step uses (seed, STEP_SALT, iteration, group_id)), so a run is a pure
function of its config, and a reference loop that derives the same streams
reproduces parameter trajectories bitwise.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tape, Tensor, backward, no_grad, weighted_cross_entropy
from .errors import ConfigError, ShapeError, TrainingAborted
from .metrics import ConfusionMatrix, MetricsRow, MetricsWriter, accumulate, miou
from .mixing import (IGNORE_LABEL, MixedSample, PseudoLabel, apply_geometric,
                     apply_geometric_label, apply_photometric, classmix_mask,
                     choose_tt_mask_source, draw_geometric_params,
                     draw_photometric_params, mix, mix_labels, pseudo_label)
from .model import ModelGroup, SegArch, SegNet, ema_update, forward, init_group, save_group_dir
from .optim import AdamW, lr_at

__all__ = [
    "DataCombination",
    "GROUP1",
    "SETTING_A",
    "SETTING_B",
    "TT_ONLY",
    "ST_ONLY",
    "S_ONLY",
    "COMBINATIONS",
    "RoutingPolicy",
    "ROUTINGS",
    "ProbEstimator",
    "TrainerConfig",
    "IterationReport",
    "RunResult",
    "SeededLoader",
    "pseudo_slot_plan",
    "assemble_batch",
    "select_setting",
    "DtsTrainer",
    "evaluate_model",
]

SALT_SOURCE_LOADER = 0x10AD5
SALT_TARGET_LOADER = 0x10AD7
SALT_STEP = 0x57E9

_VALID_TAGS = ("S", "ST", "TT")
# Target images consumed per sample of each tag.
_TARGET_SLOTS = {"S": 0, "ST": 1, "TT": 2}
_MODEL_TAGS = ("g1_student", "g1_teacher", "g2_student", "g2_teacher")


@dataclass(frozen=True)
class DataCombination:
    """Ordered tags each contributing a block of samples to a batch."""

    tags: tuple[str, ...]

    def __post_init__(self):
        if not 1 <= len(self.tags) <= 2:
            raise ConfigError(f"DataCombination: need 1 or 2 tags, got {self.tags}")
        for t in self.tags:
            if t not in _VALID_TAGS:
                raise ConfigError(f"DataCombination: unknown tag {t!r}")
        if len(set(self.tags)) != len(self.tags):
            raise ConfigError(f"DataCombination: duplicate tag in {self.tags}")

    def samples_per_batch(self, k: int) -> int:
        # A pair contributes k per tag; a singleton fills the whole 2k batch.
        return 2 * k if len(self.tags) == 1 else k * len(self.tags)

    def sample_tags(self, k: int) -> list[str]:
        per_tag = 2 * k if len(self.tags) == 1 else k
        out = []
        for tag in self.tags:
            out.extend([tag] * per_tag)
        return out


GROUP1 = DataCombination(("S", "ST"))
SETTING_A = DataCombination(("S", "TT"))
SETTING_B = DataCombination(("ST", "TT"))
TT_ONLY = DataCombination(("TT",))
ST_ONLY = DataCombination(("ST",))
S_ONLY = DataCombination(("S",))

COMBINATIONS = {
    "group1": GROUP1,
    "setting_a": SETTING_A,
    "setting_b": SETTING_B,
    "tt_only": TT_ONLY,
    "st_only": ST_ONLY,
    "s_only": S_ONLY,
}


@dataclass(frozen=True)
class RoutingPolicy:
    """Which models supply pseudo labels to each group.

    Group 1 may only use group-2 models from the current iteration (its
    batch is built before group 2 moves); group 2 uses group-1 models that
    already took this iteration's updates.  ``own_teacher=False`` drops the
    own-teacher half entirely (first row of the routing study grid).
    """

    bidirectional: bool = True
    own_teacher: bool = True
    group1_external: str = "g2_teacher"
    group2_external: str = "g1_student"

    def __post_init__(self):
        if self.group1_external not in ("g2_student", "g2_teacher"):
            raise ConfigError(
                f"RoutingPolicy: group 1 may only read group-2 models, "
                f"got {self.group1_external!r}")
        if self.group2_external not in ("g1_student", "g1_teacher"):
            raise ConfigError(
                f"RoutingPolicy: group 2 may only read group-1 models, "
                f"got {self.group2_external!r}")


ROUTINGS = {
    "default": RoutingPolicy(),
    "table5-row1": RoutingPolicy(own_teacher=False, group1_external="g2_teacher",
                                 group2_external="g1_teacher"),
    "table5-row2": RoutingPolicy(group1_external="g2_student",
                                 group2_external="g1_teacher"),
    "table5-row3": RoutingPolicy(group1_external="g2_teacher",
                                 group2_external="g1_teacher"),
    "table5-row4": RoutingPolicy(group1_external="g2_student",
                                 group2_external="g1_student"),
    "table5-row5": RoutingPolicy(),
}


def pseudo_slot_plan(combination: DataCombination, k: int, group_id: int,
                     routing: RoutingPolicy, dual: bool = True) -> list[str]:
    """Model tag for every pseudo-label slot of one batch, in consumption order.

    Slots are ordered by sample, samples by tag block.  Group 1 splits its
    slots half own-teacher / half external; group 2's split depends on the
    combination: under SETTING_B the ST block uses its own teacher and the
    TT block the external model, under SETTING_A the first half of the TT
    slots are own-teacher, and other combinations fall back to the half
    split.  With ``dual=False`` (single-group training) or with
    bidirectional learning disabled, group 1 uses only its own teacher and
    group 2 only external sources.
    """
    slot_tags: list[str] = []
    for tag in combination.sample_tags(k):
        slot_tags.extend([tag] * _TARGET_SLOTS[tag])
    n = len(slot_tags)
    if n == 0:
        return []
    if group_id == 1:
        own = "g1_teacher"
        if not dual or not routing.bidirectional:
            return [own] * n
        if not routing.own_teacher:
            return [routing.group1_external] * n
        n_own = (n + 1) // 2
        return [own] * n_own + [routing.group1_external] * (n - n_own)
    own = "g2_teacher"
    ext = routing.group2_external
    if not routing.bidirectional or not routing.own_teacher:
        return [ext] * n
    if combination == SETTING_B:
        return [own if t == "ST" else ext for t in slot_tags]
    n_own = (n + 1) // 2
    return [own] * n_own + [ext] * (n - n_own)


class ProbEstimator:
    """Tracks how often group 2's teacher beats group 1's student on
    pseudo-label confidence; per-image indicators are retained for audit."""

    def __init__(self, window: int = 4000, cumulative: bool = False):
        if window < 1:
            raise ConfigError(f"ProbEstimator: window must be positive, got {window}")
        self.window = window
        self.cumulative = cumulative
        self.indicators: list[int] = []
        self.count = 0
        self.wins = 0

    def record(self, gamma_teacher2: float, gamma_student1: float) -> None:
        ind = 1 if gamma_teacher2 > gamma_student1 else 0
        self.indicators.append(ind)
        self.count += 1
        self.wins += ind

    def value(self) -> Optional[float]:
        """Empirical win rate; None before any comparison is recorded."""
        if self.count == 0:
            return None
        if self.cumulative:
            return self.wins / self.count
        tail = self.indicators[-self.window:]
        return sum(tail) / len(tail)


def select_setting(prob_a: float, prob_b: float) -> DataCombination:
    """Pick the target-heavy data combination whose run won more often."""
    return SETTING_B if prob_b > prob_a else SETTING_A


class SeededLoader:
    """Infinite iterator over a list, reshuffled each epoch from named seeds."""

    def __init__(self, items: Sequence, seed: int, salt: int):
        if len(items) == 0:
            raise ConfigError("SeededLoader: empty dataset")
        self._items = items
        self._seed = seed
        self._salt = salt
        self._epoch = 0
        self._order: np.ndarray = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self):
        if self._pos >= len(self._order):
            rng = np.random.Generator(np.random.PCG64(
                np.random.SeedSequence([self._seed, self._salt, self._epoch])))
            self._order = rng.permutation(len(self._items))
            self._pos = 0
            self._epoch += 1
        item = self._items[self._order[self._pos]]
        self._pos += 1
        return item


@dataclass
class TrainerConfig:
    data_dir: str = ""
    out_dir: str = ""
    run_id: str = "run"
    total_iters: int = 2000
    warmup_iters: int = 100
    eval_interval: int = 500
    batch_k: int = 2
    ema_momentum: float = 0.999
    conf_threshold: float = 0.968
    lr_encoder: float = 6e-5
    lr_decoder: float = 6e-4
    lr_decay: str = "constant"
    lr_power: float = 0.9
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    num_classes: int = 5
    stem_channels: int = 16
    hidden_channels: int = 32
    group1: str = "group1"
    group2: str = "setting_b"  # empty string disables the second group
    bidirectional: bool = True
    routing: str = "default"
    prob_window: int = 4000
    prob_cumulative: bool = False
    augment: bool = True
    eval_batch: int = 16
    save_checkpoints: bool = True

    def validate(self) -> None:
        if self.total_iters < 0:
            raise ConfigError(f"total_iters must be >= 0, got {self.total_iters}")
        if not 0 <= self.warmup_iters:
            raise ConfigError(f"warmup_iters must be >= 0, got {self.warmup_iters}")
        if self.total_iters and self.warmup_iters > self.total_iters:
            raise ConfigError(
                f"warmup_iters {self.warmup_iters} exceeds total_iters {self.total_iters}")
        if self.batch_k < 1:
            raise ConfigError(f"batch_k must be >= 1, got {self.batch_k}")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ConfigError(f"ema_momentum must lie in [0,1], got {self.ema_momentum}")
        if not 0.0 < self.conf_threshold < 1.0:
            raise ConfigError(
                f"conf_threshold must lie in (0,1), got {self.conf_threshold}")
        if min(self.lr_encoder, self.lr_decoder, self.weight_decay) < 0:
            raise ConfigError("learning rates and weight decay must be >= 0")
        if self.lr_decay not in ("constant", "poly"):
            raise ConfigError(f"lr_decay must be constant or poly, got {self.lr_decay!r}")
        if self.group1 not in COMBINATIONS:
            raise ConfigError(f"unknown group-1 combination {self.group1!r}")
        if self.group2 and self.group2 not in COMBINATIONS:
            raise ConfigError(f"unknown group-2 combination {self.group2!r}")
        if self.routing not in ROUTINGS:
            raise ConfigError(f"unknown routing {self.routing!r}")
        if self.prob_window < 1:
            raise ConfigError(f"prob_window must be >= 1, got {self.prob_window}")
        if self.eval_interval < 0 or self.eval_batch < 1:
            raise ConfigError("eval_interval must be >= 0 and eval_batch >= 1")
        if self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed}")

    def routing_policy(self) -> RoutingPolicy:
        return replace(ROUTINGS[self.routing], bidirectional=self.bidirectional)

    def arch(self) -> SegArch:
        return SegArch(num_classes=self.num_classes,
                       stem_channels=self.stem_channels,
                       hidden_channels=self.hidden_channels)


@dataclass
class IterationReport:
    iteration: int
    loss_g1: float = math.nan
    loss_g2: float = math.nan
    gamma_g1: float = math.nan
    gamma_g2: float = math.nan
    prob: float = math.nan
    lr_encoder: float = 0.0


@dataclass
class RunResult:
    final_student: SegNet
    reports: list[IterationReport]
    eval_rows: list[MetricsRow]
    out_dir: str = ""


@dataclass
class _PseudoRecord:
    """One consumed target image with the pseudo label that was routed to it."""

    slot: int
    sample_tag: str
    model_tag: str
    image: np.ndarray
    pseudo: PseudoLabel


@dataclass
class _Draw:
    """Phase-one state for one planned sample."""

    tag: str
    src_image: Optional[np.ndarray] = None
    src_label: Optional[np.ndarray] = None
    src_weight: Optional[np.ndarray] = None
    tgt_images: list = field(default_factory=list)
    tgt_pads: list = field(default_factory=list)   # bool pad masks per target image
    slots: list = field(default_factory=list)      # global slot index per target image


def _weak_source(sample, rng, augment_on):
    """Weakly augment a labelled source sample; padding becomes ignore/0."""
    weight = np.ones(sample.label.shape, dtype=np.float32)
    if not augment_on:
        return sample.image, sample.label, weight
    params = draw_geometric_params(rng)
    img = apply_geometric(sample.image, params)
    lab, wgt = apply_geometric_label(sample.label, weight, params)
    return img, lab, wgt


def _weak_target(image, rng, augment_on):
    """Weakly augment an unlabelled target image; returns (image, pad mask)."""
    h, w = image.shape[-2], image.shape[-1]
    if not augment_on:
        return image, np.zeros((h, w), dtype=bool)
    params = draw_geometric_params(rng)
    img = apply_geometric(image, params)
    marker, _ = apply_geometric_label(np.zeros((h, w), dtype=np.uint8),
                                      np.ones((h, w), dtype=np.float32), params)
    return img, marker == IGNORE_LABEL


def assemble_batch(combination: DataCombination, source_loader: Optional[SeededLoader],
                   target_loader: Optional[SeededLoader],
                   labelers: Sequence[tuple[str, SegNet]],
                   rng: np.random.Generator, k: int, tau: float,
                   augment_on: bool = True
                   ) -> tuple[list[MixedSample], list[_PseudoRecord]]:
    """Build one training batch for a group.

    ``labelers`` holds (model tag, net) per target-image slot, consumed in
    order; slot counts must match the combination (one per ST sample, two
    per TT sample).  Phase one draws and weakly augments all inputs in
    sample order, phase two runs batched teacher inference per distinct
    net, phase three cuts masks, mixes, and applies the strong photometric
    augmentation to mixed images.  Loaders wrap around, so assembly never
    exhausts mid-run.
    """
    sample_tags = combination.sample_tags(k)
    n_slots = sum(_TARGET_SLOTS[t] for t in sample_tags)
    if n_slots != len(labelers):
        raise ConfigError(
            f"assemble_batch: combination {combination.tags} with k={k} needs "
            f"{n_slots} labelers, got {len(labelers)}")

    # Phase one: draw inputs and weak augmentation, in sample order.
    draws: list[_Draw] = []
    slot = 0
    for tag in sample_tags:
        d = _Draw(tag=tag)
        if tag in ("S", "ST"):
            if source_loader is None:
                raise ConfigError("assemble_batch: combination needs source data")
            src = source_loader.next()
            d.src_image, d.src_label, d.src_weight = _weak_source(src, rng, augment_on)
        for _ in range(_TARGET_SLOTS[tag]):
            if target_loader is None:
                raise ConfigError("assemble_batch: combination needs target data")
            img, pad = _weak_target(target_loader.next(), rng, augment_on)
            d.tgt_images.append(img)
            d.tgt_pads.append(pad)
            d.slots.append(slot)
            slot += 1
        draws.append(d)

    # Phase two: pseudo labels, batched per distinct teacher net.
    slot_image: list[np.ndarray] = [None] * n_slots
    for d in draws:
        for s, img in zip(d.slots, d.tgt_images):
            slot_image[s] = img
    by_net: dict[int, tuple[SegNet, list[int]]] = {}
    for s, (_, net) in enumerate(labelers):
        by_net.setdefault(id(net), (net, []))[1].append(s)
    slot_pseudo: list[PseudoLabel] = [None] * n_slots
    for net, slots_of_net in by_net.values():
        batch = np.stack([slot_image[s] for s in slots_of_net]).astype(np.float32)
        with no_grad():
            logits = forward(net, Tensor(batch))
        for j, s in enumerate(slots_of_net):
            slot_pseudo[s] = pseudo_label(logits.data[j], tau)

    records: list[_PseudoRecord] = []
    for d in draws:
        for s in d.slots:
            records.append(_PseudoRecord(slot=s, sample_tag=d.tag,
                                         model_tag=labelers[s][0],
                                         image=slot_image[s],
                                         pseudo=slot_pseudo[s]))
    records.sort(key=lambda r: r.slot)

    # Phase three: masks, mixing, strong augmentation.
    samples: list[MixedSample] = []
    for d in draws:
        if d.tag == "S":
            samples.append(MixedSample(image=d.src_image, label=d.src_label,
                                       pixel_weight=d.src_weight, provenance="S",
                                       target_frac=0.0))
            continue
        if d.tag == "ST":
            pl = slot_pseudo[d.slots[0]]
            pad = d.tgt_pads[0]
            mask = classmix_mask(d.src_label, rng)
            img = mix(d.src_image, d.tgt_images[0], mask)
            t_label = np.where(pad, np.uint8(IGNORE_LABEL), pl.labels)
            t_weight = np.where(pad, np.float32(0.0), np.float32(pl.gamma))
            lab, wgt = mix_labels(d.src_label, t_label, d.src_weight, t_weight, mask)
            frac = float(1.0 - mask.mean())
        else:  # TT
            pls = [slot_pseudo[s] for s in d.slots]
            a = choose_tt_mask_source(pls[0], pls[1])
            b = 1 - a
            mask = classmix_mask(pls[a].labels, rng)
            img = mix(d.tgt_images[a], d.tgt_images[b], mask)
            la = np.where(d.tgt_pads[a], np.uint8(IGNORE_LABEL), pls[a].labels)
            lb = np.where(d.tgt_pads[b], np.uint8(IGNORE_LABEL), pls[b].labels)
            wa = np.where(d.tgt_pads[a], np.float32(0.0), np.float32(pls[a].gamma))
            wb = np.where(d.tgt_pads[b], np.float32(0.0), np.float32(pls[b].gamma))
            lab, wgt = mix_labels(la, lb, wa, wb, mask)
            frac = 1.0
        if augment_on:
            img = apply_photometric(img, draw_photometric_params(rng))
        samples.append(MixedSample(image=img.astype(np.float32), label=lab,
                                   pixel_weight=wgt, provenance=d.tag,
                                   target_frac=frac))
    return samples, records


class DtsTrainer:
    """Owner of both model groups, their optimizers, and the run state."""

    def __init__(self, config: TrainerConfig, source_samples: Sequence = (),
                 target_images: Sequence = (), eval_samples: Sequence = ()):
        config.validate()
        self.config = config
        arch = config.arch()
        self.routing = config.routing_policy()
        self.combo1 = COMBINATIONS[config.group1]
        self.combo2 = COMBINATIONS[config.group2] if config.group2 else None
        self.g1 = init_group(arch, config.seed, group_id=1)
        self.g2 = init_group(arch, config.seed + 1, group_id=2) if self.combo2 else None
        self.opt1 = self._make_optimizer(self.g1.student)
        self.opt2 = self._make_optimizer(self.g2.student) if self.g2 else None
        self.source_loader = (SeededLoader(source_samples, config.seed, SALT_SOURCE_LOADER)
                              if len(source_samples) else None)
        self.target_loader = (SeededLoader(target_images, config.seed, SALT_TARGET_LOADER)
                              if len(target_images) else None)
        self.eval_samples = eval_samples
        self.prob = ProbEstimator(config.prob_window, config.prob_cumulative)
        self.event_log: list[tuple[int, str]] = []
        self.audit_lines: list[str] = []
        self.reports: list[IterationReport] = []

    def _make_optimizer(self, net: SegNet) -> AdamW:
        cfg = self.config
        pg = net.param_groups()
        return AdamW(net.params,
                     {"encoder": (pg["encoder"], cfg.lr_encoder),
                      "decoder": (pg["decoder"], cfg.lr_decoder)},
                     weight_decay=cfg.weight_decay, beta1=cfg.beta1,
                     beta2=cfg.beta2, eps=cfg.eps)

    def _nets(self) -> dict[str, SegNet]:
        nets = {"g1_student": self.g1.student, "g1_teacher": self.g1.teacher}
        if self.g2 is not None:
            nets["g2_student"] = self.g2.student
            nets["g2_teacher"] = self.g2.teacher
        return nets

    def _step_rng(self, t: int, group_id: int) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([self.config.seed, SALT_STEP, t, group_id])))

    def _lr_scale(self, t: int) -> float:
        cfg = self.config
        # The update applied at iteration t takes the schedule value for t+1,
        # so the very first step already moves with a nonzero rate.
        return lr_at(min(t + 1, cfg.total_iters), 1.0, cfg.warmup_iters,
                     max(cfg.total_iters, 1), cfg.lr_decay, cfg.lr_power)

    def _update_student(self, group: ModelGroup, opt: AdamW,
                        samples: list[MixedSample], t: int) -> float:
        images = np.stack([s.image for s in samples]).astype(np.float32)
        labels = np.stack([s.label for s in samples])
        weights = np.stack([s.pixel_weight for s in samples]).astype(np.float32)
        with Tape() as tape:
            logits = forward(group.student, Tensor(images))
            loss = weighted_cross_entropy(logits, labels, weights,
                                          ignore=IGNORE_LABEL)
        if not np.isfinite(loss.data):
            raise TrainingAborted(t, group.group_id)
        backward(loss, tape)
        grads = {n: p.grad for n, p in group.student.params.items()}
        opt.step(grads, self._lr_scale(t))
        return float(loss.data)

    def _labelers(self, plan: list[str]) -> list[tuple[str, SegNet]]:
        nets = self._nets()
        missing = [tag for tag in plan if tag not in nets]
        if missing:
            raise ConfigError(f"routing needs models that are not enabled: {missing}")
        return [(tag, nets[tag]) for tag in plan]

    def _audit(self, t: int, group_id: int, records: list[_PseudoRecord]) -> None:
        for r in records:
            self.audit_lines.append(
                f"{t},{group_id},{r.slot},{r.sample_tag},{r.model_tag},"
                f"{r.pseudo.gamma:.6f}")

    def _batched_gammas(self, net: SegNet, images: list[np.ndarray]) -> list[float]:
        if not images:
            return []
        batch = np.stack(images).astype(np.float32)
        with no_grad():
            logits = forward(net, Tensor(batch))
        tau = self.config.conf_threshold
        return [pseudo_label(logits.data[i], tau).gamma for i in range(len(images))]

    def _record_prob(self, records: list[_PseudoRecord]) -> None:
        """Record (gamma of group-2 teacher, gamma of group-1 student) for
        every target image consumed by group 2 this step."""
        need_te2 = [r for r in records if r.model_tag != "g2_teacher"]
        need_st1 = [r for r in records if r.model_tag != "g1_student"]
        te2 = dict(zip((r.slot for r in need_te2),
                       self._batched_gammas(self.g2.teacher,
                                            [r.image for r in need_te2])))
        st1 = dict(zip((r.slot for r in need_st1),
                       self._batched_gammas(self.g1.student,
                                            [r.image for r in need_st1])))
        for r in records:
            g_te2 = r.pseudo.gamma if r.model_tag == "g2_teacher" else te2[r.slot]
            g_st1 = r.pseudo.gamma if r.model_tag == "g1_student" else st1[r.slot]
            self.prob.record(g_te2, g_st1)

    @staticmethod
    def _gamma_mean(records: list[_PseudoRecord]) -> float:
        if not records:
            return math.nan
        return float(np.mean([r.pseudo.gamma for r in records]))

    def train_step(self, t: int) -> IterationReport:
        cfg = self.config
        dual = self.g2 is not None

        ema_update(self.g1, cfg.ema_momentum)
        self.event_log.append((t, "ema_g1"))

        plan1 = pseudo_slot_plan(self.combo1, cfg.batch_k, 1, self.routing, dual=dual)
        samples1, recs1 = assemble_batch(
            self.combo1, self.source_loader, self.target_loader,
            self._labelers(plan1), self._step_rng(t, 1), cfg.batch_k,
            cfg.conf_threshold, cfg.augment)
        loss1 = self._update_student(self.g1, self.opt1, samples1, t)
        self.event_log.append((t, "student_g1"))
        self._audit(t, 1, recs1)

        loss2 = math.nan
        gamma2 = math.nan
        if dual:
            ema_update(self.g2, cfg.ema_momentum)
            self.event_log.append((t, "ema_g2"))
            plan2 = pseudo_slot_plan(self.combo2, cfg.batch_k, 2, self.routing)
            samples2, recs2 = assemble_batch(
                self.combo2, self.source_loader, self.target_loader,
                self._labelers(plan2), self._step_rng(t, 2), cfg.batch_k,
                cfg.conf_threshold, cfg.augment)
            self._record_prob(recs2)
            loss2 = self._update_student(self.g2, self.opt2, samples2, t)
            self.event_log.append((t, "student_g2"))
            self._audit(t, 2, recs2)
            gamma2 = self._gamma_mean(recs2)

        prob = self.prob.value()
        report = IterationReport(
            iteration=t, loss_g1=loss1, loss_g2=loss2,
            gamma_g1=self._gamma_mean(recs1), gamma_g2=gamma2,
            prob=math.nan if prob is None else prob,
            lr_encoder=cfg.lr_encoder * self._lr_scale(t))
        return report

    def final_student(self) -> SegNet:
        return (self.g2 or self.g1).student

    def groups(self) -> list[ModelGroup]:
        return [g for g in (self.g1, self.g2) if g is not None]

    def run(self) -> RunResult:
        cfg = self.config
        writer = None
        if cfg.out_dir:
            os.makedirs(cfg.out_dir, exist_ok=True)
            from .config import save_train_config
            save_train_config(cfg, os.path.join(cfg.out_dir, "config.ini"))
            writer = MetricsWriter(os.path.join(cfg.out_dir, "metrics.csv"),
                                   cfg.num_classes)
        eval_rows: list[MetricsRow] = []
        for t in range(cfg.total_iters):
            report = self.train_step(t)
            self.reports.append(report)
            done = t + 1
            if len(self.eval_samples) and (
                    done == cfg.total_iters or
                    (cfg.eval_interval and done % cfg.eval_interval == 0)):
                ious, m = evaluate_model(self.final_student(), self.eval_samples,
                                         cfg.num_classes, cfg.eval_batch)
                row = MetricsRow(run_id=cfg.run_id, iteration=done,
                                 per_class_iou=ious, miou=m,
                                 loss_g1=report.loss_g1, loss_g2=report.loss_g2,
                                 gamma_g1=report.gamma_g1, gamma_g2=report.gamma_g2,
                                 prob=report.prob)
                eval_rows.append(row)
                if writer is not None:
                    writer.append(row)
        if cfg.out_dir:
            if cfg.save_checkpoints:
                save_group_dir(cfg.out_dir, self.groups())
            with open(os.path.join(cfg.out_dir, "audit.log"), "w") as fh:
                fh.write("iter,group,slot,sample,source,gamma\n")
                for line in self.audit_lines:
                    fh.write(line + "\n")
            with open(os.path.join(cfg.out_dir, "events.log"), "w") as fh:
                for t, ev in self.event_log:
                    fh.write(f"{t},{ev}\n")
        return RunResult(final_student=self.final_student(), reports=self.reports,
                         eval_rows=eval_rows, out_dir=cfg.out_dir)


def evaluate_model(net: SegNet, samples: Sequence, num_classes: int,
                   batch: int = 16) -> tuple[list[float], float]:
    """mIoU of a net over labelled samples, batched, gradient-free."""
    cm = ConfusionMatrix(num_classes)
    for i in range(0, len(samples), batch):
        chunk = samples[i:i + batch]
        imgs = np.stack([s.image for s in chunk]).astype(np.float32)
        with no_grad():
            logits = forward(net, Tensor(imgs))
        preds = logits.data.argmax(axis=1)
        for pred, s in zip(preds, chunk):
            accumulate(cm, pred, s.label)
    return miou(cm)
