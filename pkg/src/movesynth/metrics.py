"""Image and temporal quality metrics, episode evaluation and aggregation.

Pixel metrics work on [0, 1] frames rescaled to the 0..255 range.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence as Seq

import numpy as np
import torch

from .errors import DegenerateSetError, EmptyError, ShapeError
from .io import atomic_write_bytes

PSNR_CAP = 100.0
MAX_VAL = 255.0


def _as_array(frames) -> np.ndarray:
    """Sequence / list of Frames / (T,H,W,3) array / (T,3,H,W) tensor -> float64 (T,H,W,3)."""
    if hasattr(frames, "frames"):
        frames = frames.frames
    if torch.is_tensor(frames):
        a = frames.detach().cpu().double().numpy()
        return a.transpose(0, 2, 3, 1) if a.ndim == 4 and a.shape[1] in (1, 3) else a
    if isinstance(frames, np.ndarray):
        return frames.astype(np.float64)
    out = []
    for f in frames:
        if torch.is_tensor(f):
            out.append(f.detach().cpu().double().numpy().reshape(-1, *f.shape[-2:])
                       .transpose(1, 2, 0))
        else:
            out.append(np.asarray(getattr(f, "pixels", f), dtype=np.float64))
    return np.stack(out)


def _pair(pred, truth):
    p, t = _as_array(pred), _as_array(truth)
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} and target {t.shape} differ")
    if p.shape[0] == 0:
        raise EmptyError("no frames to compare")
    return p * MAX_VAL, t * MAX_VAL


def frame_mse(pred, truth) -> np.ndarray:
    p, t = _pair(pred, truth)
    return ((p - t) ** 2).reshape(p.shape[0], -1).mean(1)


def mse(pred, truth) -> float:
    """Mean squared error on the 0..255 scale, averaged over frames."""
    return float(frame_mse(pred, truth).mean())


def psnr_from_mse(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    with np.errstate(divide="ignore"):
        v = 10.0 * np.log10(MAX_VAL ** 2 / m)
    return np.where(m > 0, np.minimum(v, PSNR_CAP), PSNR_CAP)


def psnr(pred, truth) -> float:
    """Per-frame PSNR averaged over frames; identical frames count as the 100 dB cap."""
    return float(psnr_from_mse(frame_mse(pred, truth)).mean())


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def luminance(a: np.ndarray) -> np.ndarray:
    return a[..., 0] * 0.299 + a[..., 1] * 0.587 + a[..., 2] * 0.114


def _filter(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Same-size correlation with symmetric (edge-repeating) padding."""
    r = win.shape[0] // 2
    padded = np.pad(img, r, mode="symmetric")
    h, w = img.shape
    out = np.zeros((h, w))
    for dy in range(win.shape[0]):
        for dx in range(win.shape[1]):
            out += win[dy, dx] * padded[dy:dy + h, dx:dx + w]
    return out


def ssim_map(x: np.ndarray, y: np.ndarray, win=None) -> np.ndarray:
    win = gaussian_window() if win is None else win
    c1, c2 = (0.01 * MAX_VAL) ** 2, (0.03 * MAX_VAL) ** 2
    mx, my = _filter(x, win), _filter(y, win)
    sxx = _filter(x * x, win) - mx * mx
    syy = _filter(y * y, win) - my * my
    sxy = _filter(x * y, win) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (sxx + syy + c2))


def ssim(pred, truth) -> float:
    """Gaussian-window SSIM of the luminance channel, averaged over pixels then frames."""
    p, t = _pair(pred, truth)
    return float(np.mean([ssim_map(luminance(a), luminance(b)).mean() for a, b in zip(p, t)]))


# ---------------------------------------------------------------------------
# Frechet distance on frozen features


def frechet_distance(mu1, s1, mu2, s2) -> float:
    """||mu1-mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)), symmetric square roots via eigh."""
    mu1, mu2 = np.atleast_1d(mu1).astype(np.float64), np.atleast_1d(mu2).astype(np.float64)
    s1, s2 = np.atleast_2d(s1).astype(np.float64), np.atleast_2d(s2).astype(np.float64)
    if not (np.all(np.isfinite(s1)) and np.all(np.isfinite(s2))):
        raise DegenerateSetError("covariance is not finite")

    def sqrtm(a):
        w, v = np.linalg.eigh((a + a.T) / 2)
        return (v * np.sqrt(np.clip(w, 0, None))) @ v.T

    r1 = sqrtm(s1)
    cross = np.clip(np.linalg.eigvalsh(r1 @ s2 @ r1), 0, None)
    d = float(((mu1 - mu2) ** 2).sum() + np.trace(s1) + np.trace(s2) - 2 * np.sqrt(cross).sum())
    return max(d, 0.0)


def feature_stats(feats: np.ndarray):
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[:, None]
    if feats.shape[0] < 2:
        raise DegenerateSetError(f"need at least 2 samples, got {feats.shape[0]}")
    return feats.mean(0), np.cov(feats, rowvar=False).reshape(feats.shape[1], feats.shape[1])


def proxy_fid_from_features(f1, f2) -> float:
    m1, s1 = feature_stats(f1)
    m2, s2 = feature_stats(f2)
    return frechet_distance(m1, s1, m2, s2)


def pooled_features(frames, fx) -> np.ndarray:
    a = _as_array(frames)
    x = torch.from_numpy(a.transpose(0, 3, 1, 2).copy()).float()
    with torch.no_grad():
        return fx.pooled(x).double().numpy()


def proxy_fid(pred_set, real_set, fx) -> float:
    """Frechet distance between pooled last-stage features of two frame sets."""
    return proxy_fid_from_features(pooled_features(pred_set, fx), pooled_features(real_set, fx))


# ---------------------------------------------------------------------------
# temporal warping error


def _flow_arrays(flows):
    out = []
    for f in flows:
        if hasattr(f, "flow"):
            out.append((np.asarray(f.flow, np.float64), np.asarray(f.occlusion_mask, np.float64)))
        else:
            fl, m = f
            out.append((np.asarray(fl, np.float64), np.asarray(m, np.float64)))
    return out


def warp_np(img: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Backward bilinear warp of an (H, W, C) image by an (H, W, 2) flow, border clamped."""
    h, w = img.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = np.clip(xs + flow[..., 0], 0, w - 1)
    sy = np.clip(ys + flow[..., 1], 0, h - 1)
    x0, y0 = np.floor(sx).astype(int), np.floor(sy).astype(int)
    x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
    ax, ay = (sx - x0)[..., None], (sy - y0)[..., None]
    return (img[y0, x0] * (1 - ax) * (1 - ay) + img[y0, x1] * ax * (1 - ay)
            + img[y1, x0] * (1 - ax) * ay + img[y1, x1] * ax * ay)


def twe(pred, flows) -> float:
    """Masked squared flow-warping residual between adjacent frames, 0..255 scale.

    Per pair: sum over valid pixels of the squared RGB residual norm divided
    by the number of valid pixels; pairs are then averaged.
    """
    a = _as_array(pred) * MAX_VAL
    fl = _flow_arrays(flows)
    if len(fl) != a.shape[0] - 1:
        raise ShapeError(f"{a.shape[0]} frames need {a.shape[0] - 1} flows, got {len(fl)}")
    if not fl:
        raise EmptyError("temporal warping error needs at least two frames")
    vals = []
    for t, (f, m) in enumerate(fl):
        if f.shape[:2] != a.shape[1:3] or m.shape != a.shape[1:3]:
            raise ShapeError("flow resolution does not match the frames")
        r = ((a[t + 1] - warp_np(a[t], f)) ** 2).sum(-1)
        n = m.sum()
        vals.append(float((r * m).sum() / n) if n > 0 else 0.0)
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# records and aggregation


@dataclass
class MetricsRecord:
    episode_id: str
    person_id: str
    K: int
    mse: float
    psnr: float
    ssim: float
    fid: Optional[float]
    twe: Optional[float]

    def __post_init__(self):
        if self.mse < 0 or (self.twe is not None and self.twe < 0):
            raise ValueError("mse and twe must be nonnegative")
        if not -1.0 <= self.ssim <= 1.0:
            raise ValueError(f"ssim {self.ssim} outside [-1, 1]")


RECORD_COLUMNS = tuple(f.name for f in fields(MetricsRecord))
METRIC_NAMES = ("mse", "psnr", "ssim", "fid", "twe")


def _mean(vals):
    vals = [v for v in vals if v is not None and not (isinstance(v, float) and math.isnan(v))]
    return math.fsum(vals) / len(vals) if vals else None


def aggregate(records: Seq[MetricsRecord]) -> dict:
    """Per-shot means of every metric plus cross-shot means of FID and TWE."""
    if not records:
        raise EmptyError("nothing to aggregate")
    shots = sorted({r.K for r in records})
    per_shot = {}
    for k in shots:
        rs = [r for r in records if r.K == k]
        per_shot[k] = {m: _mean([getattr(r, m) for r in rs]) for m in METRIC_NAMES}
        per_shot[k]["episodes"] = len(rs)
    mean = {m: _mean([per_shot[k][m] for k in shots]) for m in ("fid", "twe")}
    return {"shots": shots, "per_shot": per_shot, "mean": mean}


def _fmt(v, digits):
    return "-" if v is None else f"{v:.{digits}f}"


DIGITS = {"mse": 2, "psnr": 2, "ssim": 3, "fid": 2, "twe": 2}


def summary_rows(summary: dict, label: str = "") -> List[dict]:
    """One row per shot, then a mean row for the cross-shot columns; values as strings."""
    rows = []
    for k in summary["shots"]:
        s = summary["per_shot"][k]
        row = {"model": label, "shot": str(k)}
        row.update({m: _fmt(s[m], DIGITS[m]) for m in METRIC_NAMES})
        rows.append(row)
    mean = {"model": label, "shot": "mean", "mse": "-", "psnr": "-", "ssim": "-"}
    mean.update({m: _fmt(summary["mean"][m], DIGITS[m]) for m in ("fid", "twe")})
    rows.append(mean)
    return rows


def format_table(rows: List[dict]) -> str:
    cols = list(rows[0])
    widths = {c: max(len(c), *(len(str(r[c])) for r in rows)) for c in cols}
    lines = ["  ".join(c.rjust(widths[c]) for c in cols)]
    lines += ["  ".join(str(r[c]).rjust(widths[c]) for c in cols) for r in rows]
    return "\n".join(lines)


def write_records_csv(path, records: Seq[MetricsRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RECORD_COLUMNS)
        w.writeheader()
        for r in records:
            w.writerow({k: ("" if v is None else v) for k, v in asdict(r).items()})


def read_records_csv(path) -> List[MetricsRecord]:
    out = []
    with open(path) as fh:
        for row in csv.DictReader(fh):
            def num(k):
                return None if row[k] == "" else float(row[k])
            out.append(MetricsRecord(row["episode_id"], row["person_id"], int(row["K"]),
                                     num("mse"), num("psnr"), num("ssim"), num("fid"), num("twe")))
    return out


def write_summary(path_prefix, summaries: Dict[str, dict]) -> None:
    """``<prefix>.json`` with the raw summaries and ``<prefix>.csv`` with table rows."""
    prefix = Path(path_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(prefix.with_suffix(".json"),
                       json.dumps(summaries, indent=1, sort_keys=True).encode())
    rows = [r for label, s in summaries.items() for r in summary_rows(s, label)]
    with open(prefix.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
