"""End-to-end action detector: backbone -> RoI-Align -> fusion -> relation head -> classifier."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tn
from .backbone import Backbone, BackboneConfig, Fusion, backbone_forward, fuse_many, roi_align_many
from .data import Box2D
from .heads import Classifier, EncoderBlockParams, HeadConfig, head_forward
from .tensor import Parameter, Tensor, load_arrays, save_arrays


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    roi_size: int = 7
    sampling_ratio: int = 2


class ActionDetector:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.head.validate()
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
        c = cfg.backbone.out_channels
        self.backbone = Backbone(cfg.backbone, rng)
        self.fusion = Fusion(c, rng)
        self.encoder = None
        if cfg.head.head_type != "linear":
            self.encoder = EncoderBlockParams(c, cfg.head.num_heads, cfg.head.ff_mult, rng)
        self.classifier = Classifier(c, cfg.head.num_classes, rng)
        self._always_frozen = self.backbone.always_frozen()
        names = [p.name for p in self.parameters()]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")

    @property
    def channels(self) -> int:
        return self.cfg.backbone.out_channels

    def parameters(self) -> list[Parameter]:
        ps = self.backbone.parameters() + self.fusion.parameters() + self.classifier.parameters()
        if self.encoder is not None:
            ps += self.encoder.parameters()
        return sorted(ps, key=lambda p: p.name)

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def always_frozen(self) -> set[str]:
        return set(self._always_frozen)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if strict and missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            if name in state:
                if state[name].shape != p.shape:
                    raise ValueError(f"{name}: checkpoint shape {state[name].shape} vs {p.shape}")
                p.data[...] = state[name]

    def save(self, path, extra: dict[str, np.ndarray] | None = None) -> None:
        arrays = {f"param/{k}": v for k, v in self.state_dict().items()}
        if extra:
            arrays.update(extra)
        save_arrays(path, arrays)

    def load(self, path) -> dict[str, np.ndarray]:
        arrays = load_arrays(path)
        self.load_state_dict({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
        return {k: v for k, v in arrays.items() if not k.startswith("param/")}

    def reinit_head(self, seed: int) -> None:
        """Fresh draws for fusion, encoder and classifier (backbone untouched)."""
        rng = np.random.default_rng(np.random.SeedSequence([seed, 23]))
        c = self.channels
        fresh = {p.name: p.data for p in Fusion(c, rng).parameters()}
        if self.encoder is not None:
            fresh.update({p.name: p.data for p in EncoderBlockParams(
                c, self.cfg.head.num_heads, self.cfg.head.ff_mult, rng).parameters()})
        fresh.update({p.name: p.data for p in Classifier(c, self.cfg.head.num_classes, rng).parameters()})
        self.load_state_dict(fresh, strict=False)

    # forward ------------------------------------------------------------------

    def person_features(self, frames: np.ndarray | Tensor, boxes_per_clip: Sequence[Sequence[Box2D]]):
        """Backbone + RoI-Align for a batch of equally shaped clips.

        Returns (fmap values N x C' x T' x H' x W', list of P_i x C' x T' x h x w tensors).
        """
        fmap = backbone_forward(self.backbone, frames if np.ndim(frames) == 5 or isinstance(frames, Tensor)
                                else np.asarray(frames))
        vals = fmap.values
        persons = []
        for i, boxes in enumerate(boxes_per_clip):
            fi = tn.take(vals, i, axis=0) if len(boxes_per_clip) > 1 else tn.reshape(vals, vals.shape[1:])
            persons.append((fi, roi_align_many(fi, boxes, self.cfg.roi_size, self.cfg.roi_size,
                                               self.cfg.sampling_ratio)))
        return vals, persons

    def forward(self, frames, boxes_per_clip, memories=None):
        """Logits per clip and the detached pooled person vectors (for the memory bank)."""
        if np.ndim(frames) == 4:
            frames = np.asarray(frames)[None]
        _, persons = self.person_features(frames, boxes_per_clip)
        logits, pooled = [], []
        for i, (fi, pf) in enumerate(persons):
            pooled.append(pf.data.mean(axis=(2, 3, 4)))
            fused = fuse_many(pf, fi, self.fusion.weight, self.fusion.bias)
            mem = None if memories is None else memories[i]
            if mem is not None and len(mem) == 0:
                mem = None
            logits.append(head_forward(fused, mem, self.cfg.head, self.encoder, self.classifier))
        return logits, pooled

    def pooled_vectors(self, frames, boxes_per_clip) -> list[np.ndarray]:
        if np.ndim(frames) == 4:
            frames = np.asarray(frames)[None]
        _, persons = self.person_features(frames, boxes_per_clip)
        return [pf.data.mean(axis=(2, 3, 4)) for _, pf in persons]
