"""Scoring, anti-spoofing metrics, protocol runs, translation and feature export."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Dataset, ProtocolSpec, protocol_splits
from .losses import LIVE, SPOOF
from .models import Checkpoint, fuse_latents, split_latents
from .tensor import Tensor
from .trainer import TrainConfig, TrainLog, train_stage1, train_stage2


@dataclass(frozen=True)
class ScoreRecord:
    id: str
    score: float
    label: int
    attack_type: str

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"non-finite score for {self.id}")
        if self.label not in (LIVE, SPOOF):
            raise ValueError(f"label must be {LIVE} or {SPOOF}")


def _stack(x: Tensor) -> Tensor:
    return T.reshape(x, (1,) + x.shape) if x.ndim == 3 else x


def spoof_map(ckpt: Checkpoint, images: Tensor) -> np.ndarray:
    """Spoof maps [N, 1, H, W] from the spoof encoder and map decoder only."""
    ckpt.require_stage("stage2")
    return ckpt.run("D_map", ckpt.run("E_S", _stack(images))).data


def spoof_score(ckpt: Checkpoint, image: Tensor) -> tuple[float, np.ndarray]:
    """Mean spoof-map value of one image, with the map itself."""
    maps = spoof_map(ckpt, image)
    if maps.shape[0] != 1:
        raise ValueError("spoof_score takes a single image; use score_dataset for batches")
    return float(maps[0].mean()), maps[0, 0]


def score_dataset(ckpt: Checkpoint, dataset: Dataset, chunk: int = 64) -> list[ScoreRecord]:
    records = []
    for start in range(0, len(dataset), chunk):
        idx = list(range(start, min(start + chunk, len(dataset))))
        maps = spoof_map(ckpt, Tensor(dataset.images(idx)))
        for i, m in zip(idx, maps):
            s = dataset[i]
            records.append(ScoreRecord(s.id, float(m.mean()), s.label, s.attack_type))
    return records


def scores_csv(records: Sequence[ScoreRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "label", "attack_type", "score"])
    for r in records:
        w.writerow([r.id, "live" if r.label == LIVE else "spoof", r.attack_type, repr(r.score)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# metrics


def _split(records: Sequence[ScoreRecord]) -> tuple[np.ndarray, np.ndarray]:
    live = np.array([r.score for r in records if r.label == LIVE], dtype=np.float64)
    spoof = np.array([r.score for r in records if r.label == SPOOF], dtype=np.float64)
    if len(live) == 0 or len(spoof) == 0:
        raise ValueError("metrics need both live and spoof scores")
    return live, spoof


def _rates(live: np.ndarray, spoof: np.ndarray, t) -> tuple[np.ndarray, np.ndarray]:
    """FAR (spoof accepted as live) and FRR (live rejected) at thresholds ``t``."""
    t = np.asarray(t, dtype=np.float64)
    far = np.searchsorted(np.sort(spoof), t, side="right") / len(spoof)
    frr = 1.0 - np.searchsorted(np.sort(live), t, side="right") / len(live)
    return far, frr


def fix_threshold(records: Sequence[ScoreRecord]) -> float:
    """Training-score operating point where FAR and FRR are closest.

    Candidates are midpoints between adjacent distinct scores, so the
    threshold never coincides with an observed score.  Ties go to the lowest
    candidate.
    """
    live, spoof = _split(records)
    values = np.unique(np.concatenate([live, spoof]))
    if len(values) < 2:
        raise ValueError("all scores are equal; no threshold separates anything")
    cand = (values[:-1] + values[1:]) / 2
    far, frr = _rates(live, spoof, cand)
    return float(cand[np.argmin(np.abs(far - frr))])


def classification_metrics(records: Sequence[ScoreRecord], threshold: float) -> tuple[float, float, float]:
    """(APCER, BPCER, ACER) with spoof decided when score > threshold."""
    live, spoof = _split(records)
    apcer = float(np.mean(spoof <= threshold))
    bpcer = float(np.mean(live > threshold))
    return apcer, bpcer, (apcer + bpcer) / 2


def eer(records: Sequence[ScoreRecord]) -> float:
    """Equal error rate, interpolated linearly where FAR - FRR changes sign.

    Operating points are "accept nothing as spoof" plus one threshold per
    distinct score value, so equal scores form a single point.
    """
    live, spoof = _split(records)
    points = np.concatenate([[-np.inf], np.unique(np.concatenate([live, spoof]))])
    far, frr = _rates(live, spoof, points)
    diff = far - frr  # starts at -1 (FAR 0, FRR 1) and ends at 1 (FAR 1, FRR 0)
    k = int(np.argmax(diff >= 0))
    if diff[k] == 0:
        return float(far[k])
    d0, d1 = diff[k - 1], diff[k]
    w = d0 / (d0 - d1)
    return float(far[k - 1] + w * (far[k] - far[k - 1]))


def auc(records: Sequence[ScoreRecord]) -> float:
    """P(spoof score > live score) with ties counted as one half."""
    live, spoof = _split(records)
    # Mann-Whitney: pairwise win count = sum over spoof of (#live below + 0.5 #live equal)
    ls = np.sort(live)
    below = np.searchsorted(ls, spoof, side="left")
    upto = np.searchsorted(ls, spoof, side="right")
    wins2 = int(np.sum(2 * below + (upto - below)))  # doubled to stay in integers
    return wins2 / (2 * len(live) * len(spoof))


@dataclass(frozen=True)
class MetricsReport:
    threshold: float
    apcer: float
    bpcer: float
    acer: float
    eer: float
    auc: float

    FIELDS = ("apcer", "bpcer", "acer", "eer", "auc")

    @classmethod
    def from_scores(cls, test: Sequence[ScoreRecord], threshold: float) -> "MetricsReport":
        apcer, bpcer, acer = classification_metrics(test, threshold)
        return cls(threshold, apcer, bpcer, acer, eer(test), auc(test))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))

    def table(self) -> str:
        rows = [("threshold", f"{self.threshold:.6f}")]
        rows += [(k.upper(), f"{100 * getattr(self, k):.2f}%") for k in self.FIELDS]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v:>10}" for k, v in rows) + "\n"


# ---------------------------------------------------------------------------
# protocols


@dataclass
class ProtocolResult:
    protocol: ProtocolSpec
    report: MetricsReport
    train_scores: list[ScoreRecord]
    test_scores: list[ScoreRecord]
    stage1: Checkpoint
    stage2: Checkpoint
    stage1_log: TrainLog
    stage2_log: TrainLog
    access_log: list[tuple[str, str]] = field(default_factory=list)  # (phase, sample id)
    seconds: float = 0.0


def run_protocol(cfg: TrainConfig, dataset: Dataset, protocol: ProtocolSpec) -> ProtocolResult:
    """Train both stages on the protocol's training split and evaluate on its test split."""
    start = time.perf_counter()
    train, test = protocol_splits(dataset, protocol)
    access: list[tuple[str, str]] = []

    def touch(phase: str, ds: Dataset) -> Dataset:
        access.extend((phase, i) for i in ds.ids)
        return ds

    live_train = touch("stage1", train.live())
    ckpt1, log1 = train_stage1(cfg, live_train)
    ckpt2, log2 = train_stage2(cfg, ckpt1, touch("stage2", train))
    train_scores = score_dataset(ckpt2, touch("threshold", train))
    threshold = fix_threshold(train_scores)
    test_scores = score_dataset(ckpt2, touch("evaluate", test))
    report = MetricsReport.from_scores(test_scores, threshold)
    return ProtocolResult(
        protocol, report, train_scores, test_scores, ckpt1, ckpt2, log1, log2, access,
        seconds=time.perf_counter() - start,
    )


def summarize(reports: dict[str, MetricsReport]) -> dict[str, tuple[float, float]]:
    """Mean and population std of each metric across protocols."""
    out = {}
    for k in MetricsReport.FIELDS:
        vals = np.array([getattr(r, k) for r in reports.values()])
        out[k] = (float(vals.mean()), float(vals.std()))
    return out


def summary_table(reports: dict[str, MetricsReport]) -> str:
    """Metric rows by held-out-type columns, plus an Average column of mean±std (in %)."""
    names = list(reports)
    stats = summarize(reports)
    header = ["Metric (%)", *names, "Average"]
    rows = [header]
    for k in MetricsReport.FIELDS:
        m, s = stats[k]
        rows.append(
            [k.upper(), *(f"{100 * getattr(reports[n], k):.2f}" for n in names), f"{100 * m:.2f}±{100 * s:.2f}"]
        )
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in rows]
    return "\n".join(lines) + "\n"


def summary_json(reports: dict[str, MetricsReport]) -> str:
    stats = summarize(reports)
    doc = {
        "protocols": {n: asdict(r) for n, r in reports.items()},
        "average": {k: {"mean": m, "std": s} for k, (m, s) in stats.items()},
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# translation and features


def swap_spoof_features(fused_a: Tensor, fused_b: Tensor, live_channels: int) -> tuple[Tensor, Tensor]:
    """Exchange the spoof halves of two fused latents."""
    la, sa = split_latents(fused_a, live_channels)
    lb, sb = split_latents(fused_b, live_channels)
    return fuse_latents(la, sb), fuse_latents(lb, sa)


def translate(ckpt: Checkpoint, image_a: Tensor, image_b: Tensor) -> tuple[np.ndarray, np.ndarray]:
    """Swap spoof features between two images and decode both hybrids."""
    ckpt.require_stage("stage2")
    if image_a.shape != image_b.shape:
        raise ValueError(f"image shapes differ: {image_a.shape} vs {image_b.shape}")
    a, b = _stack(image_a), _stack(image_b)
    fa = fuse_latents(ckpt.run("E_L", a), ckpt.run("E_S", a))
    fb = fuse_latents(ckpt.run("E_L", b), ckpt.run("E_S", b))
    ta, tb = swap_spoof_features(fa, fb, ckpt.arch["latent_channels"])
    out_a, out_b = ckpt.run("D_syn", ta).data, ckpt.run("D_syn", tb).data
    if image_a.ndim == 3:
        out_a, out_b = out_a[0], out_b[0]
    return out_a, out_b


def reconstruct(ckpt: Checkpoint, image: Tensor) -> np.ndarray:
    """Ordinary stage-2 reconstruction D_syn(E_L(x) ⊕ E_S(x))."""
    ckpt.require_stage("stage2")
    x = _stack(image)
    out = ckpt.run("D_syn", fuse_latents(ckpt.run("E_L", x), ckpt.run("E_S", x))).data
    return out[0] if image.ndim == 3 else out


def features_csv(ckpt: Checkpoint, dataset: Dataset, chunk: int = 64) -> str:
    """Flattened live and spoof latents, one row per sample."""
    ckpt.require_stage("stage2")
    shape = ckpt.spec("E_L").output_shape
    n = int(np.prod(shape))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "label", "attack_type", *(f"F_L{i}" for i in range(n)), *(f"F_S{i}" for i in range(n))])
    for start in range(0, len(dataset), chunk):
        idx = list(range(start, min(start + chunk, len(dataset))))
        x = Tensor(dataset.images(idx))
        fl = ckpt.run("E_L", x).data.reshape(len(idx), -1)
        fs = ckpt.run("E_S", x).data.reshape(len(idx), -1)
        for j, i in enumerate(idx):
            s = dataset[i]
            label = "live" if s.is_live else "spoof"
            w.writerow([s.id, label, s.attack_type, *map(repr, fl[j].tolist()), *map(repr, fs[j].tolist())])
    return buf.getvalue()


def export_features(ckpt: Checkpoint, dataset: Dataset, path) -> None:
    from .models import _atomic_write

    _atomic_write(path, features_csv(ckpt, dataset).encode())
