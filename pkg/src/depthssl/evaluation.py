"""Metrics (mIoU, mAP), paired significance testing (Wilcoxon signed-rank
with Holm correction), rank correlation and embedding export."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

# per-class lists of (score, is_positive) in evaluation-frame order
RankedPredictions = dict[int, list[tuple[float, bool]]]

EXACT_WILCOXON_MAX_N = 12


def confusion_matrix(gt: np.ndarray, pred: np.ndarray, num_classes: int, ignore: int = 255) -> np.ndarray:
    """K x K counts, rows = ground truth, cols = prediction; ``ignore``
    pixels are dropped."""
    gt = np.asarray(gt).ravel()
    pred = np.asarray(pred).ravel()
    if gt.shape != pred.shape:
        raise ValueError("ground truth and prediction sizes differ")
    keep = gt != ignore
    gt = gt[keep].astype(np.int64)
    pred = pred[keep].astype(np.int64)
    if gt.size and (gt.max() >= num_classes or pred.max() >= num_classes):
        raise ValueError("class id out of range")
    cm = np.bincount(gt * num_classes + pred, minlength=num_classes * num_classes)
    return cm.reshape(num_classes, num_classes)


def miou(cm: np.ndarray) -> float:
    """Mean over classes of TP / (TP + FP + FN); classes with zero union
    are excluded.  Errors if the matrix is empty or all-zero."""
    cm = np.asarray(cm, dtype=np.int64)
    if cm.size == 0 or cm.sum() == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    present = union > 0
    return float((tp[present] / union[present]).mean())


def map_score(ranked: RankedPredictions) -> float:
    """Mean over classes of average precision.

    Per class the (score, is_positive) list is sorted by descending score
    (stable, so ties keep evaluation-frame order) and AP is the mean of
    precision-at-rank over the positive entries.
    """
    if not ranked:
        raise ValueError("no classes to score")
    aps = []
    for cls in sorted(ranked):
        entries = ranked[cls]
        order = sorted(range(len(entries)), key=lambda i: -entries[i][0])
        n_pos = 0
        precisions = []
        for rank, idx in enumerate(order, start=1):
            if entries[idx][1]:
                n_pos += 1
                precisions.append(n_pos / rank)
        if not precisions:
            raise ValueError(f"class {cls} has no positives")
        aps.append(sum(precisions) / len(precisions))
    return float(np.mean(aps))


def wilcoxon_signed_rank(paired_diffs) -> tuple[float, float]:
    """Two-sided Wilcoxon signed-rank test.

    Zero differences are discarded; absolute differences get average ranks
    on ties; the statistic is W = min(W+, W-).  For n <= 12 the p-value is
    exact over all 2^n sign assignments (ranks doubled to stay in integer
    arithmetic); for larger n a normal approximation with tie-corrected
    variance and 0.5 continuity correction is used.
    """
    diffs = np.asarray(paired_diffs, dtype=np.float64)
    diffs = diffs[diffs != 0]
    n = diffs.size
    if n == 0:
        raise ValueError("all differences are zero")
    ranks = rankdata(np.abs(diffs))  # average ranks; multiples of 0.5
    r2 = np.rint(ranks * 2).astype(np.int64)
    total2 = int(r2.sum())  # == n(n+1)
    w2_plus = int(r2[diffs > 0].sum())
    w2_lo = min(w2_plus, total2 - w2_plus)
    stat = w2_lo / 2.0

    if n <= EXACT_WILCOXON_MAX_N:
        assign = (np.arange(1 << n, dtype=np.int64)[:, None] >> np.arange(n)[None, :]) & 1
        w2_all = assign @ r2
        count = int((w2_all <= w2_lo).sum() + (w2_all >= total2 - w2_lo).sum())
        p = min(1.0, count / float(1 << n))
        return stat, p

    mu = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(diffs), return_counts=True)
    tie_term = float((tie_counts.astype(np.float64) ** 3 - tie_counts).sum()) / 48.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term
    sigma = math.sqrt(var)
    z = (stat - mu + 0.5) / sigma
    p = math.erfc(-z / math.sqrt(2.0))  # = 2 * Phi(z) for z <= 0
    return stat, float(min(1.0, max(0.0, p)))


def holm_adjust(pvalues) -> list[float]:
    """Step-down Holm adjustment; returns values in the original order."""
    ps = np.asarray(pvalues, dtype=np.float64)
    if ps.size == 0:
        return []
    if ((ps < 0) | (ps > 1)).any():
        raise ValueError("p-values must lie in [0, 1]")
    m = ps.size
    order = np.argsort(ps, kind="stable")
    adjusted = np.empty(m, dtype=np.float64)
    running = 0.0
    for i, idx in enumerate(order):
        running = max(running, (m - i) * ps[idx])
        adjusted[idx] = min(1.0, running)
    return adjusted.tolist()


def spearman(xs, ys) -> float:
    """Spearman rank correlation: Pearson correlation of average ranks."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1 or xs.size < 2:
        raise ValueError("need two equal-length 1-D samples with >= 2 points")
    rx = rankdata(xs)
    ry = rankdata(ys)
    if np.all(rx == rx[0]) or np.all(ry == ry[0]):
        raise ValueError("spearman is undefined for constant input")
    return float(np.corrcoef(rx, ry)[0, 1])


@dataclass
class SignificanceRow:
    task: str
    fraction: float
    n_pairs: int
    mean_delta: float
    statistic: float
    p_raw: float
    p_holm: float


def significance_table(records: list[dict], baseline_init: str = "scratch") -> list[SignificanceRow]:
    """Per-fraction Wilcoxon tests of pretrained-vs-scratch metric
    differences paired by split seed, Holm-corrected across fractions
    within each task."""
    by_key: dict[tuple[str, float, int], dict[str, float]] = {}
    for rec in records:
        key = (rec["task"], float(rec["fraction"]), int(rec["seed"]))
        by_key.setdefault(key, {})[rec["init"]] = float(rec["metric_value"])
    tasks = sorted({k[0] for k in by_key})
    rows: list[SignificanceRow] = []
    for task in tasks:
        fractions = sorted({k[1] for k in by_key if k[0] == task})
        raw: list[tuple[float, int, float, float]] = []
        for frac in fractions:
            diffs = []
            for (t, f, _seed), metrics in sorted(by_key.items()):
                if t == task and f == frac and baseline_init in metrics and "pretrained" in metrics:
                    diffs.append(metrics["pretrained"] - metrics[baseline_init])
            if not diffs:
                continue
            stat, p = wilcoxon_signed_rank(diffs)
            raw.append((frac, len(diffs), float(np.mean(diffs)), stat, p))
        adjusted = holm_adjust([r[4] for r in raw])
        for (frac, n, mean_d, stat, p), p_holm in zip(raw, adjusted):
            rows.append(SignificanceRow(task, frac, n, mean_d, stat, p, p_holm))
    return rows


def format_significance_table(rows: list[SignificanceRow]) -> str:
    lines = [
        f"{'task':<6} {'fraction':>8} {'n':>3} {'mean_delta':>11} {'W':>7} "
        f"{'p_raw':>9} {'p_holm':>9} {'sig@0.05':>8} {'sig@0.01':>8}"
    ]
    for r in rows:
        lines.append(
            f"{r.task:<6} {r.fraction:>8.2f} {r.n_pairs:>3d} {r.mean_delta:>11.5f} "
            f"{r.statistic:>7.1f} {r.p_raw:>9.4f} {r.p_holm:>9.4f} "
            f"{'yes' if r.p_holm < 0.05 else 'no':>8} {'yes' if r.p_holm < 0.01 else 'no':>8}"
        )
    return "\n".join(lines)


def pca_2d(embeddings: np.ndarray) -> np.ndarray:
    """Top-2 principal-component projection via a deterministic eigen
    decomposition of the Gram matrix; component signs are fixed so the
    largest-magnitude coordinate of each column is positive."""
    x = np.asarray(embeddings, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        return np.zeros((0, 2))
    xc = x - x.mean(axis=0, keepdims=True)
    if n == 1:
        return np.zeros((1, 2))
    gram = xc @ xc.T
    eigvals, eigvecs = np.linalg.eigh(gram)
    proj = np.zeros((n, 2), dtype=np.float64)
    for comp in range(min(2, n)):
        lam = eigvals[-1 - comp]
        vec = eigvecs[:, -1 - comp]
        coords = vec * math.sqrt(max(lam, 0.0))
        pivot = int(np.argmax(np.abs(coords)))
        if coords[pivot] < 0:
            coords = -coords
        proj[:, comp] = coords
    return proj


def majority_class(labels: np.ndarray, rows: np.ndarray, cols: np.ndarray, ignore: int = 255) -> int:
    """Most frequent non-ignore class over the given pixels (smallest id on
    ties); -1 when nothing remains."""
    vals = labels[rows, cols]
    vals = vals[vals != ignore]
    if vals.size == 0:
        return -1
    counts = np.bincount(vals)
    return int(np.argmax(counts))


def export_embeddings(
    checkpoint_path: str | Path,
    manifest,
    out_dir: str | Path,
    slic_params=None,
    thresholds=None,
    unit_scale: float = 0.001,
) -> int:
    """Write per-cluster embeddings for external analysis.

    Produces ``embeddings.bin`` (raw float32 little-endian rows),
    ``index.csv`` (row, frame_id, cluster_id, gt_class, embedding dim) and
    ``projection.csv`` (row, pc1, pc2).  Returns the number of rows.
    """
    import torch

    from . import depthio as dio
    from . import model as M
    from .geometry import FilterThresholds
    from .pipeline import compute_frame_pairs
    from .superpix import SlicParams

    slic_params = slic_params or SlicParams()
    thresholds = thresholds or FilterThresholds()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    header, weights = M.load_checkpoint(checkpoint_path)
    cfg = M.ModelConfig.from_dict(header["config"])
    net = M.PretextModel(cfg)
    M.load_weights_into(net, weights)
    net.eval()

    rows_meta: list[tuple[str, int, int]] = []
    chunks: list[np.ndarray] = []
    for i in range(len(manifest.entries)):
        frame = dio.load_frame(manifest, i, unit_scale=unit_scale)
        fp, kept, spmap = compute_frame_pairs(frame, slic_params, thresholds, max_pairs=0, seed=0)
        if not kept:
            continue
        x = torch.from_numpy(M.normalize_depth(frame, cfg.input_size))[None]
        bboxes = torch.tensor([list(r.bbox_norm) for r in kept], dtype=torch.float32)
        fidx = torch.zeros(len(kept), dtype=torch.long)
        with torch.no_grad():
            emb = net.embed(x, fidx, bboxes).numpy().astype("<f4")
        chunks.append(emb)
        for r in kept:
            if frame.labels is not None:
                rr, cc = np.nonzero(spmap.labels == r.id)
                gt = majority_class(frame.labels, rr, cc)
            else:
                gt = -1
            rows_meta.append((frame.frame_id, r.id, gt))

    emb_all = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, cfg.embedding_dim), dtype="<f4")
    with open(out_dir / "embeddings.bin", "wb") as f:
        f.write(emb_all.astype("<f4").tobytes())
    with open(out_dir / "index.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["row", "frame_id", "cluster_id", "gt_class", "dim"])
        for row, (fid, cid, gt) in enumerate(rows_meta):
            writer.writerow([row, fid, cid, gt, cfg.embedding_dim])
    proj = pca_2d(emb_all.astype(np.float64))
    with open(out_dir / "projection.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["row", "pc1", "pc2"])
        for row in range(proj.shape[0]):
            writer.writerow([row, repr(float(proj[row, 0])), repr(float(proj[row, 1]))])
    return emb_all.shape[0]


def read_results_jsonl(path: str | Path) -> list[dict]:
    records = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def append_result_jsonl(path: str | Path, record: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")
