"""Losses, SGD, learning-rate schedule, freezing, sampling and staged training."""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import tensor as tn
from .data import ClipSample, box_jitter, color_jitter
from .memory import STRATEGIES, MemoryBank, extract_and_store_all
from .model import ActionDetector
from .tensor import Parameter, Tensor

log = logging.getLogger(__name__)

FREEZE_SCOPES = ("none", "backbone", "all_but_classifier")
# milestone positions as fractions of the schedule (13.5k/18k/22.5k/27k of 30k)
MILESTONE_FRACTIONS = (0.45, 0.60, 0.75, 0.90)


class TrainConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.05
    batch_size: int = 8
    weight_decay: float = 1e-7
    total_iters: int = 600
    warmup_iters: int = 30
    milestones: tuple[int, ...] = (270, 360, 450, 540)
    lr_gamma: float = 0.66
    momentum: float = 0.9
    seed: int = 0
    box_jitter: float = 0.05
    color_jitter: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))

    def validate(self) -> None:
        ms = self.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise TrainConfigError(f"milestones {ms} not strictly increasing")
        if ms and ms[-1] >= self.total_iters:
            raise TrainConfigError(f"milestone {ms[-1]} not below total_iters {self.total_iters}")
        if self.warmup_iters < 0 or (ms and self.warmup_iters >= ms[0]):
            raise TrainConfigError(f"warmup_iters {self.warmup_iters} must precede the first milestone")
        if self.batch_size < 1 or self.total_iters < 0:
            raise TrainConfigError("batch_size and total_iters must be positive")
        if not 0.0 <= self.box_jitter < 0.5:
            raise TrainConfigError("box_jitter must lie in [0, 0.5)")

    @classmethod
    def paper(cls) -> "TrainConfig":
        return cls(base_lr=1e-2, batch_size=64, weight_decay=1e-7, total_iters=30000, warmup_iters=1500,
                   milestones=(13500, 18000, 22500, 27000), lr_gamma=0.66, momentum=0.9)

    @classmethod
    def desk(cls, total_iters: int, **kw) -> "TrainConfig":
        """Paper schedule shape scaled to ``total_iters`` (warmup 5%, same milestone fractions)."""
        warm = kw.setdefault("warmup_iters", max(1, round(0.05 * total_iters)))
        # very short runs collapse duplicate milestones and drop any that cannot fire
        ms = sorted({round(f * total_iters) for f in MILESTONE_FRACTIONS})
        kw.setdefault("milestones", tuple(m for m in ms if warm < m < total_iters))
        return cls(total_iters=total_iters, **kw)


def lr_at(cfg: TrainConfig, it: int) -> float:
    """Linear warmup from base_lr/warmup_iters, then step decay by ``lr_gamma`` per passed milestone."""
    if cfg.warmup_iters > 0 and it < cfg.warmup_iters:
        return cfg.base_lr * (it + 1) / cfg.warmup_iters
    passed = sum(1 for m in cfg.milestones if it >= m)
    return cfg.base_lr * cfg.lr_gamma ** passed


def bce_multilabel_loss(logits: Tensor, labels) -> Tensor:
    return tn.bce_with_logits(logits, labels)


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: Sequence[Parameter], lr: float) -> None:
        for p in params:
            if p.frozen or p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v = self.velocity.get(p.name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[p.name] = v
            p.data -= lr * v

    def state(self) -> dict[str, np.ndarray]:
        return {f"optim/{k}": v for k, v in self.velocity.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        self.velocity = {k[len("optim/"):]: v.copy() for k, v in arrays.items() if k.startswith("optim/")}


def sgd_step(params: Sequence[Parameter], grads: dict[str, np.ndarray], lr: float, momentum: float,
             weight_decay: float, velocity: dict[str, np.ndarray]) -> None:
    """v <- momentum*v + grad + wd*param; param <- param - lr*v. Frozen params are skipped."""
    for p in params:
        if p.frozen or p.name not in grads:
            continue
        g = grads[p.name] + weight_decay * p.data
        v = momentum * velocity.get(p.name, np.zeros_like(p.data)) + g
        velocity[p.name] = v
        p.data -= lr * v


def freeze(model: ActionDetector, scope: str) -> None:
    """Set frozen flags by name prefix. Batch-norm buffers stay frozen under every scope."""
    if scope not in FREEZE_SCOPES:
        raise TrainConfigError(f"unknown freeze scope {scope!r}")
    fixed = model.always_frozen()
    for p in model.parameters():
        if scope == "backbone":
            frozen = p.name.startswith("backbone.")
        elif scope == "all_but_classifier":
            frozen = not p.name.startswith("classifier.")
        else:
            frozen = False
        p.frozen = frozen or p.name in fixed


def zero_grad(model: ActionDetector) -> None:
    for p in model.parameters():
        p.grad = None


# sampling ---------------------------------------------------------------------

def _positive_clips(clips: Sequence[ClipSample], num_classes: int) -> list[np.ndarray]:
    pos = [[] for _ in range(num_classes)]
    for i, c in enumerate(clips):
        if c.labels is None:
            continue
        for k in np.flatnonzero(c.labels.max(axis=0)):
            pos[k].append(i)
    return [np.array(p, dtype=int) for p in pos]


class UniformSampler:
    def __init__(self, clips: Sequence[ClipSample]):
        if not clips:
            raise TrainConfigError("empty training set")
        self.n = len(clips)

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.integers(self.n, size=n)


class ClassBalancedSampler:
    """Pick a class uniformly, then a clip uniformly among that class's positives."""

    def __init__(self, clips: Sequence[ClipSample], num_classes: int):
        self.positives = _positive_clips(clips, num_classes)
        empty = [k for k, p in enumerate(self.positives) if len(p) == 0]
        if empty:
            raise TrainConfigError(f"classes without positive samples: {empty}")

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        ks = rng.integers(len(self.positives), size=n)
        return np.array([self.positives[k][rng.integers(len(self.positives[k]))] for k in ks], dtype=int)


def class_balanced_sampler(clips: Sequence[ClipSample], seed: int, num_classes: int | None = None) -> Iterator[int]:
    """Infinite stream of clip indices drawn class-balanced."""
    if num_classes is None:
        labelled = [c for c in clips if c.labels is not None]
        num_classes = labelled[0].labels.shape[1] if labelled else 0
    sampler = ClassBalancedSampler(clips, num_classes)
    rng = np.random.default_rng(seed)
    while True:
        yield int(sampler.draw(rng, 1)[0])


# staged training ----------------------------------------------------------------

@dataclass(frozen=True)
class StageSpec:
    name: str = "stage1"
    domains: tuple[str, ...] = ("A", "K")
    freeze_scope: str = "none"
    sampler: str = "uniform"
    read_bank: bool = False
    # domains whose pooled vectors are written to the bank after each batch
    write_domains: tuple[str, ...] = ()
    # fill the bank from every clip (annotated or not) of these domains before training
    extract_domains: tuple[str, ...] = ()
    reinit_head: bool = False
    # empty the bank before the stage starts
    clear_bank: bool = False

    def validate(self) -> None:
        if self.freeze_scope not in FREEZE_SCOPES:
            raise TrainConfigError(f"unknown freeze scope {self.freeze_scope!r}")
        if self.sampler not in ("uniform", "class_balanced"):
            raise TrainConfigError(f"unknown sampler {self.sampler!r}")
        if self.sampler == "class_balanced" and self.freeze_scope != "all_but_classifier":
            raise TrainConfigError("class-balanced stages must freeze everything but the classifier")


@dataclass
class History:
    iters: list[int] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)

    def append(self, it: int, lr: float, loss: float) -> None:
        self.iters.append(it)
        self.lrs.append(lr)
        self.losses.append(loss)

    def lines(self) -> list[str]:
        return [f"{i} {lr:.8g} {loss:.8g}" for i, lr, loss in zip(self.iters, self.lrs, self.losses)]

    def smoothed(self, window: int = 20) -> np.ndarray:
        x = np.asarray(self.losses)
        if len(x) < window:
            return x
        return np.convolve(x, np.ones(window) / window, mode="valid")


def substream(seed: int, tag: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(tag.encode()), *extra]))


def augment(clip: ClipSample, cfg: TrainConfig, rng: np.random.Generator) -> ClipSample:
    if cfg.color_jitter:
        clip = color_jitter(clip, cfg.color_jitter, rng)
    if cfg.box_jitter:
        clip = replace(clip, boxes=[box_jitter(b, cfg.box_jitter, rng) for b in clip.boxes])
    return clip


def train_stage(model: ActionDetector, bank: MemoryBank | None, stage: StageSpec, cfg: TrainConfig,
                clips: Sequence[ClipSample], *, start_iter: int = 0, optimizer: SGD | None = None,
                on_iter: Callable[[int, float, float], None] | None = None,
                checkpoint: Callable[[int, SGD], None] | None = None, checkpoint_every: int = 0) -> History:
    """Run one training stage over the annotated clips of ``stage.domains``.

    Deterministic in (model state, cfg.seed, data): every iteration draws its
    batch and augmentations from its own named random substream.
    """
    cfg.validate()
    stage.validate()
    if (stage.read_bank or stage.write_domains or stage.extract_domains) and bank is None:
        raise TrainConfigError(f"stage {stage.name} needs a memory bank")
    freeze(model, stage.freeze_scope)
    train_clips = [c for c in clips if c.annotated and c.domain in stage.domains]
    if not train_clips:
        raise TrainConfigError(f"stage {stage.name}: no annotated clips in domains {stage.domains}")
    if stage.sampler == "class_balanced":
        sampler = ClassBalancedSampler(train_clips, model.cfg.head.num_classes)
    else:
        sampler = UniformSampler(train_clips)
    if stage.extract_domains and start_iter == 0:
        extract_and_store_all(bank, model, clips, domains=stage.extract_domains)
    opt = optimizer or SGD(cfg.momentum, cfg.weight_decay)
    params = [p for p in model.parameters() if not p.frozen]
    hist = History()
    for it in range(start_iter, cfg.total_iters):
        rng = substream(cfg.seed, stage.name, it)
        batch = [augment(train_clips[i], cfg, rng) for i in sampler.draw(rng, cfg.batch_size)]
        memories = None
        if stage.read_bank:
            memories = [bank.read_window(c.video_id, c.timestamp) for c in batch]
        logits, pooled = model.forward(np.stack([c.frames for c in batch]), [c.boxes for c in batch], memories)
        labels = np.concatenate([c.labels for c in batch])
        loss = bce_multilabel_loss(tn.concat(logits, axis=0), labels)
        lr = lr_at(cfg, it)
        if loss.requires_grad:
            loss.backward()
        opt.step(params, lr)
        zero_grad(model)
        for c, vecs in zip(batch, pooled):
            if c.domain in stage.write_domains:
                bank.write(c.video_id, c.timestamp, vecs)
        hist.append(it, lr, loss.item())
        if on_iter is not None:
            on_iter(it, lr, loss.item())
        if checkpoint is not None and checkpoint_every and (it + 1) % checkpoint_every == 0:
            checkpoint(it + 1, opt)
    return hist


# strategies ---------------------------------------------------------------------

def strategy_stages(strategy: str) -> tuple[StageSpec, StageSpec]:
    """Stage pair for memory strategy A, B or C (both stage 2s are identical except B's re-init)."""
    if strategy not in STRATEGIES:
        raise TrainConfigError(f"unknown memory strategy {strategy!r}")
    if strategy == "A":
        s1 = StageSpec("stage1", ("A",), read_bank=True, write_domains=("A",))
    elif strategy == "B":
        s1 = StageSpec("stage1", ("A", "K"))
    else:
        # the K bank stays empty: K clips read nothing during stage 1
        s1 = StageSpec("stage1", ("A", "K"), read_bank=True, write_domains=("A",))
    s2 = StageSpec("stage2", ("A", "K"), freeze_scope="backbone", read_bank=True,
                   extract_domains=("A", "K"), reinit_head=strategy == "B", clear_bank=True)
    return s1, s2


@dataclass
class StrategyResult:
    model: ActionDetector
    bank: MemoryBank
    histories: dict[str, History]
    stage1_state: dict[str, np.ndarray]


def run_pipeline(model: ActionDetector, clips: Sequence[ClipSample], plan: Sequence[tuple[StageSpec, TrainConfig]],
                 bank: MemoryBank | None = None, *, start_stage: int = 0, start_iter: int = 0,
                 optimizer: SGD | None = None, on_iter: Callable[[str, int, float, float], None] | None = None,
                 on_stage_end: Callable[[int, StageSpec], None] | None = None,
                 checkpoint: Callable[[int, int, SGD], None] | None = None,
                 checkpoint_every: int = 0) -> dict[str, History]:
    """Run stages in order, optionally resuming at (start_stage, start_iter).

    Head re-initialisation and bank clearing happen only when a stage starts
    from iteration 0, so a resumed stage picks up exactly where it stopped.
    """
    histories = {}
    for i in range(start_stage, len(plan)):
        spec, cfg = plan[i]
        first = start_iter if i == start_stage else 0
        if first == 0:
            if spec.clear_bank and bank is not None:
                bank.clear()
            if spec.reinit_head:
                model.reinit_head(cfg.seed + 1)
        opt = optimizer if i == start_stage else None
        ck = None if checkpoint is None else (lambda it, o, i=i: checkpoint(i, it, o))
        cb = None if on_iter is None else (lambda it, lr, loss, name=spec.name: on_iter(name, it, lr, loss))
        log.info("stage %s: iterations %d..%d", spec.name, first, cfg.total_iters)
        histories[spec.name] = train_stage(model, bank, spec, cfg, clips, start_iter=first, optimizer=opt,
                                           on_iter=cb, checkpoint=ck, checkpoint_every=checkpoint_every)
        if on_stage_end is not None:
            on_stage_end(i, spec)
    return histories


def run_strategy(strategy: str, model: ActionDetector, clips: Sequence[ClipSample], cfg1: TrainConfig,
                 cfg2: TrainConfig, window: int = 4) -> StrategyResult:
    """Two-stage memory training.

    Stage 2 always re-extracts the bank with the stage-1 backbone, freezes the
    backbone and finetunes fusion, relation head and classifier on A+K.
    """
    if not model.cfg.head.use_memory:
        raise TrainConfigError("memory strategies need a head configured with use_memory")
    s1, s2 = strategy_stages(strategy)
    bank = MemoryBank(window)
    snapshots = {}

    def keep(i, spec):
        if i == 0:
            snapshots["stage1"] = model.state_dict()

    histories = run_pipeline(model, clips, [(s1, cfg1), (s2, cfg2)], bank, on_stage_end=keep)
    return StrategyResult(model, bank, histories, snapshots["stage1"])


def decoupled_finetune(model: ActionDetector, clips: Sequence[ClipSample], cfg: TrainConfig,
                       bank: MemoryBank | None = None) -> History:
    """Classifier-only retraining under class-balanced sampling."""
    stage = StageSpec("decoupled", tuple(sorted({c.domain for c in clips})), freeze_scope="all_but_classifier",
                      sampler="class_balanced", read_bank=model.cfg.head.use_memory and bank is not None)
    return train_stage(model, bank, stage, cfg, clips)


def save_training_state(path, model: ActionDetector, opt: SGD, it: int, stage: int = 0) -> None:
    model.save(path, extra={**opt.state(), "meta/iter": np.array(float(it)), "meta/stage": np.array(float(stage))})


def load_training_state(path, model: ActionDetector, cfg: TrainConfig | None = None) -> tuple[SGD, int]:
    extra = model.load(path)
    cfg = cfg or TrainConfig()
    opt = SGD(cfg.momentum, cfg.weight_decay)
    opt.load_state(extra)
    return opt, int(extra.get("meta/iter", np.array(0.0)))
