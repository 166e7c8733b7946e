"""Detect -> (conditionally) inpaint -> recognize."""

from __future__ import annotations

import logging
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import ModelRegistry
from .detector import load_detector
from .errors import ConfigurationError, DataError, HimfrError
from .imaging import (
    DEFAULT_FILL_COLOR,
    DEFAULT_TAU,
    EmptyMaskWarning,
    MaskedPair,
    as_image,
    load_image,
    load_mask,
    resize,
    resize_mask,
    segment_mask,
)
from .inpainter import load_inpainter
from .recognizer import load_recognizer

log = logging.getLogger(__name__)


def default_seed() -> int:
    raw = os.environ.get("HIMFR_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise ConfigurationError(f"HIMFR_SEED must be an integer, got {raw!r}") from None


@dataclass
class PipelineConfig:
    detector: str = ""
    inpainter: str = ""
    recognizer: str = ""
    registry: str = ""
    threshold: float = 0.5
    k: int = 3
    detector_size: int = 224
    inpaint_size: int = 256
    recognizer_size: int = 224
    segmentation: str = "ground_truth"
    tau: float = DEFAULT_TAU
    seed: int = field(default_factory=default_seed)

    def __post_init__(self):
        if self.k < 1:
            raise ConfigurationError("k must be at least 1")
        if self.segmentation not in ("ground_truth", "color_threshold"):
            raise ConfigurationError(f"unknown segmentation mode {self.segmentation!r}")
        if not (0.0 <= self.threshold <= 1.0):
            raise ConfigurationError("threshold must lie in [0, 1]")

    @classmethod
    def from_file(cls, path, **overrides) -> "PipelineConfig":
        """Parse a flat ``key = value`` file; ``#`` starts a comment. ``overrides`` win."""
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        types = {f.name: f.type for f in fields(cls)}
        values: dict = {}
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or key not in types:
                raise ConfigurationError(f"{path}:{lineno}: unknown or malformed entry {line!r}")
            values[key] = value
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**{k: _coerce(types[k], v) for k, v in values.items()})


def _coerce(typ, value):
    if isinstance(value, str):
        if typ in ("int", int):
            return int(value)
        if typ in ("float", float):
            return float(value)
    return value


@dataclass
class RunRecord:
    path: str
    is_masked: bool | None = None
    mask_probability: float | None = None
    inpainted: bool = False
    empty_mask: bool = False
    predicted: int | None = None
    identity: str | None = None
    probabilities: list[float] = field(default_factory=list)
    candidate_predictions: list[int] = field(default_factory=list)
    sizes: dict[str, int] = field(default_factory=dict)
    timing: dict[str, float] = field(default_factory=dict)
    truth: int | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunReport:
    records: list[RunRecord]

    def summary(self) -> dict:
        ok = [r for r in self.records if r.ok]
        out = {
            "images": len(self.records),
            "succeeded": len(ok),
            "failed": len(self.records) - len(ok),
            "masked": sum(bool(r.is_masked) for r in ok),
            "inpainted": sum(r.inpainted for r in ok),
        }
        labelled = [r for r in ok if r.truth is not None]
        if labelled:
            out["accuracy"] = float(np.mean([r.predicted == r.truth for r in labelled]))
        return out

    def to_dict(self) -> dict:
        return {"summary": self.summary(), "records": [r.to_dict() for r in self.records]}


class Pipeline:
    """Holds the three stage models.

    The stages are duck-typed: ``detector.detect(img, threshold)``,
    ``inpainter.generate_candidates(masked, mask, k, seed)`` /
    ``inpainter.inpaint(masked, mask, k, seed)`` and
    ``recognizer.predict_proba(images)``.
    """

    def __init__(self, detector, inpainter, recognizer, config: PipelineConfig | None = None, class_names=None):
        self.detector = detector
        self.inpainter = inpainter
        self.recognizer = recognizer
        self.config = config or PipelineConfig()
        self.class_names = list(class_names or getattr(getattr(recognizer, "config", None), "class_names", []) or [])

    @classmethod
    def load(cls, config: PipelineConfig) -> "Pipeline":
        if config.registry:
            reg = ModelRegistry(config.registry)
            for stage in ("detector", "inpainter", "recognizer"):
                reg.verify(stage)
            paths = {s: reg.entries[s]["path"] for s in ("detector", "inpainter", "recognizer")}
        else:
            paths = {"detector": config.detector, "inpainter": config.inpainter, "recognizer": config.recognizer}
            missing = [k for k, v in paths.items() if not v]
            if missing:
                raise ConfigurationError(f"no checkpoint path configured for: {', '.join(missing)}")
        return cls(
            load_detector(paths["detector"]),
            load_inpainter(paths["inpainter"]),
            load_recognizer(paths["recognizer"]),
            config,
        )

    def _mask_for(self, img: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
        cfg = self.config
        if cfg.segmentation == "ground_truth":
            if mask is None:
                raise DataError("ground_truth segmentation needs a stored mask for this image")
            stored = resize_mask(mask, img.shape[0], img.shape[1])
            return segment_mask(MaskedPair(img, stored, np.zeros_like(img)), "ground_truth")
        return segment_mask(img, "color_threshold", fill_color=DEFAULT_FILL_COLOR, tau=cfg.tau)

    def run(self, img, mask=None, path: str = "", truth: int | None = None, all_candidates: bool = False) -> RunRecord:
        """Process one image; stage errors propagate to the caller."""
        cfg = self.config
        rec = RunRecord(path=path, truth=truth)
        img = as_image(img)
        t0 = time.perf_counter()
        verdict = self.detector.detect(resize(img, cfg.detector_size), cfg.threshold)
        rec.is_masked, rec.mask_probability = bool(verdict.is_masked), float(verdict.probability)
        rec.timing["detect"] = time.perf_counter() - t0
        rec.sizes = {"input": img.shape[0], "detector": cfg.detector_size, "recognizer": cfg.recognizer_size}

        candidates = []
        if verdict.is_masked:
            t0 = time.perf_counter()
            work = resize(img, cfg.inpaint_size)
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", EmptyMaskWarning)
                hidden = self._mask_for(work, mask)
            rec.empty_mask = any(issubclass(w.category, EmptyMaskWarning) for w in caught) or not hidden.any()
            if all_candidates:
                cands = self.inpainter.generate_candidates(work, hidden, cfg.k, cfg.seed)
                candidates = [c.image for c in cands]
                restored = min(cands, key=lambda c: (-c.score, c.latent_seed)).image
            else:
                restored = self.inpainter.inpaint(work, hidden, cfg.k, cfg.seed)
            rec.inpainted = True
            rec.sizes["inpaint"] = cfg.inpaint_size
            rec.timing["inpaint"] = time.perf_counter() - t0
            recog_input = restored
        else:
            recog_input = img

        t0 = time.perf_counter()
        probs = np.asarray(self.recognizer.predict_proba([resize(recog_input, cfg.recognizer_size)])[0], dtype=np.float64)
        rec.probabilities = [float(p) for p in probs]
        rec.predicted = int(np.argmax(probs))
        if rec.predicted < len(self.class_names):
            rec.identity = self.class_names[rec.predicted]
        if candidates:
            cand_probs = self.recognizer.predict_proba([resize(c, cfg.recognizer_size) for c in candidates])
            rec.candidate_predictions = [int(np.argmax(p)) for p in cand_probs]
        rec.timing["recognize"] = time.perf_counter() - t0
        return rec


def run_pipeline(img, pipeline: Pipeline, mask=None, **kwargs) -> RunRecord:
    return pipeline.run(img, mask, **kwargs)


@dataclass
class BatchItem:
    path: str
    image: np.ndarray | None = None
    mask: np.ndarray | None = None
    mask_path: str | None = None
    truth: int | None = None
    known_clean: bool = False  # ground-truth occlusion is empty


def _process(pipeline: Pipeline, item: BatchItem, all_candidates: bool) -> RunRecord:
    try:
        img = item.image if item.image is not None else load_image(item.path, channels=3)
        mask = item.mask
        if mask is None and item.mask_path:
            mask = load_mask(item.mask_path)
        if mask is None and item.known_clean:
            mask = np.zeros(img.shape[:2], dtype=bool)
        return pipeline.run(img, mask, path=item.path, truth=item.truth, all_candidates=all_candidates)
    except (HimfrError, ValueError, OSError) as exc:
        log.warning("pipeline failed on %s: %s", item.path, exc)
        return RunRecord(path=item.path, truth=item.truth, error=f"{type(exc).__name__}: {exc}")


def run_batch(pipeline: Pipeline, items: Sequence[BatchItem], workers: int = 1, all_candidates: bool = False) -> RunReport:
    """Run every item; per-image failures become error records. Records are sorted by path."""
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            records = list(pool.map(lambda it: _process(pipeline, it, all_candidates), items))
    else:
        records = [_process(pipeline, it, all_candidates) for it in items]
    return RunReport(sorted(records, key=lambda r: r.path))
