"""Zero-shot anomaly detection by k-nearest-neighbour distance to healthy clips.

Clip features are the encoder's pooled embeddings. A clip's anomaly score is
its mean distance to the ``k`` nearest healthy features in a bank; a video is
flagged abnormal as soon as one of its clips exceeds the threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .encoder import encode_features
from .params import ParamMap
from .tubes import TubeSet


class ModelMismatchError(ValueError):
    """Features were produced by a different model than the one querying."""


def clip_starts(length: int, span: int, n_clips: int) -> list[int]:
    """Uniformly spaced clip starts; centered when ``n_clips == 1``."""
    if n_clips < 1:
        raise ValueError("n_clips must be >= 1")
    room = max(length - span, 0)
    if n_clips == 1:
        return [room // 2]
    return [int(round(j * room / (n_clips - 1))) for j in range(n_clips)]


def eval_clips(video: np.ndarray, n_clips: int, frames: int, rate: int = 1) -> list[np.ndarray]:
    """``n_clips`` deterministic clips of ``frames`` frames (looped if short)."""
    length = video.shape[0]
    span = frames * rate
    clips = []
    for start in clip_starts(length, span, n_clips):
        idx = (start + rate * np.arange(frames)) % length
        clips.append(video[idx])
    return clips


def extract_features(model: ParamMap, video: np.ndarray, n_clips: int, tubes: TubeSet,
                     frames: int = 32, rate: int = 1) -> np.ndarray:
    """Pooled embeddings of ``n_clips`` uniformly placed clips, ``(n_clips, d)``."""
    if video.shape[0] == 0:
        raise ValueError("empty video")
    return encode_features(model, eval_clips(video, n_clips, frames, rate), tubes)


@dataclass
class FeatureBank:
    features: np.ndarray
    source_ids: np.ndarray
    model_checksum: str

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.source_ids = np.asarray(self.source_ids, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2D array")
        if len(self.source_ids) != len(self.features):
            raise ValueError("one source id per feature row is required")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("feature bank contains non-finite values")

    def __len__(self) -> int:
        return len(self.features)

    def check_model(self, model: ParamMap) -> None:
        if model.checksum() != self.model_checksum:
            raise ModelMismatchError("feature bank was built with a different model")

    def to_params(self) -> ParamMap:
        digest = np.frombuffer(bytes.fromhex(self.model_checksum), dtype=np.uint8)
        return ParamMap({
            "bank.features": self.features,
            "bank.source_ids": self.source_ids.astype(np.float32),
            "meta.model_sha256": digest.astype(np.float32),
        })

    @classmethod
    def from_params(cls, params: ParamMap) -> FeatureBank:
        digest = bytes(params["meta.model_sha256"].astype(np.uint8).tolist())
        return cls(params["bank.features"], params["bank.source_ids"].astype(np.int64),
                   digest.hex())


def build_bank(model: ParamMap, videos: Sequence[np.ndarray], tubes: TubeSet, n_clips: int = 4,
               frames: int = 32, rate: int = 1) -> FeatureBank:
    feats, ids = [], []
    for i, v in enumerate(videos):
        f = extract_features(model, v, n_clips, tubes, frames, rate)
        feats.append(f)
        ids.extend([i] * len(f))
    if not feats:
        raise ValueError("cannot build a feature bank from no videos")
    # stored precision, so a reloaded bank scores identically
    features = np.concatenate(feats).astype(np.float32)
    return FeatureBank(features, np.array(ids), model.checksum())


def knn_scores(bank: FeatureBank | np.ndarray, queries: np.ndarray, k: int = 5) -> np.ndarray:
    """Mean Euclidean distance of each query row to its ``k`` nearest bank rows."""
    feats = bank.features if isinstance(bank, FeatureBank) else np.asarray(bank, float)
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    m = len(feats)
    if m == 0:
        raise ValueError("feature bank is empty")
    if not 1 <= k <= m:
        raise ValueError(f"k={k} must lie in [1, {m}]")
    dist = cdist(queries, feats)
    nearest = np.partition(dist, k - 1, axis=1)[:, :k]
    return nearest.mean(axis=1)


def knn_score(bank: FeatureBank | np.ndarray, feature: np.ndarray, k: int = 5) -> float:
    return float(knn_scores(bank, np.asarray(feature)[None, :], k)[0])


def calibrate_threshold(scores: Sequence[float], quantile: float = 0.95) -> float:
    """Linear-interpolation quantile of healthy validation clip scores."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("no validation scores to calibrate on")
    if not 0.0 <= quantile <= 1.0:
        raise ValueError("quantile must lie in [0, 1]")
    return float(np.quantile(scores, quantile, method="linear"))


@dataclass
class AnomalyDecision:
    clip_scores: np.ndarray
    clip_flags: np.ndarray
    video_flag: bool
    threshold: float


def decide(clip_scores: Sequence[float], threshold: float) -> AnomalyDecision:
    """Any-clip rule: the video is abnormal if any clip score exceeds ``threshold``."""
    s = np.asarray(clip_scores, dtype=np.float64)
    flags = s > threshold
    return AnomalyDecision(s, flags, bool(flags.any()), float(threshold))


@dataclass
class Metrics:
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float = field(init=False)
    precision: float = field(init=False)
    recall: float = field(init=False)
    f1: float = field(init=False)

    def __post_init__(self):
        n = self.tp + self.fp + self.tn + self.fn
        if n == 0:
            raise ValueError("metrics need at least one test video")
        self.accuracy = (self.tp + self.tn) / n
        # undefined ratios are reported as 0
        self.precision = self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0
        self.recall = self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0
        pr = self.precision + self.recall
        self.f1 = 2 * self.precision * self.recall / pr if pr else 0.0

    @property
    def confusion(self) -> list[list[int]]:
        """``[[tn, fp], [fn, tp]]``; rows are truth (healthy, anomaly)."""
        return [[self.tn, self.fp], [self.fn, self.tp]]

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy, "precision": self.precision,
            "recall": self.recall, "f1": self.f1, "confusion": self.confusion,
        }

    @classmethod
    def from_predictions(cls, labels: Sequence[bool], predictions: Sequence[bool]) -> Metrics:
        y = np.asarray(labels, dtype=bool)
        p = np.asarray(predictions, dtype=bool)
        if y.shape != p.shape:
            raise ValueError("labels and predictions differ in length")
        return cls(int((y & p).sum()), int((~y & p).sum()), int((~y & ~p).sum()),
                   int((y & ~p).sum()))


@dataclass
class EvalResult:
    metrics: Metrics
    decisions: list[AnomalyDecision]
    threshold: float


def evaluate(model: ParamMap, bank: FeatureBank, videos: Sequence[np.ndarray],
             labels: Sequence[bool], tubes: TubeSet, k: int, threshold: float,
             n_clips: int = 4, frames: int = 32, rate: int = 1) -> EvalResult:
    """Score labelled test videos and compute anomaly-positive metrics."""
    if len(videos) == 0:
        raise ValueError("empty test set")
    bank.check_model(model)
    decisions = []
    for v in videos:
        feats = extract_features(model, v, n_clips, tubes, frames, rate)
        decisions.append(decide(knn_scores(bank, feats, k), threshold))
    metrics = Metrics.from_predictions(labels, [d.video_flag for d in decisions])
    return EvalResult(metrics, decisions, threshold)
