"""Pretext training, label-fraction splits and semi-supervised fine-tuning.

Batches are made of frames; each frame contributes its cached cluster
pairs, so one encoder/decoder forward serves every pair sampled from that
frame.  All shuffling comes from numpy generators seeded per (run seed,
epoch), and weight init uses an explicit torch generator, so repeated runs
on the deterministic tiny profile are bit-identical.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import evaluation, model as M, pipeline
from .depthio import DatasetManifest, load_frame
from .geometry import FilterThresholds
from .superpix import SlicParams


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    batch_size: int = 32
    epochs: int = 200
    seed: int = 0
    optimizer: str = "adam"  # adam (betas 0.9/0.999, eps 1e-8) | sgd
    profile: str = "full"
    pairs_per_frame: int = 32

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("hyperparameters must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class CheckpointMeta:
    epoch: int
    metric: float
    metric_name: str
    config_hash: str


def pretext_loss(h_a: torch.Tensor, h_b: torch.Tensor, d) -> torch.Tensor:
    """| ||h_a - h_b||_2 - d |, averaged over the batch of pairs.

    Both non-differentiable points carry subgradient 0 (the norm at equal
    embeddings and the absolute value at a perfect prediction).
    """
    if h_a.shape != h_b.shape:
        raise ValueError(f"embedding shapes differ: {tuple(h_a.shape)} vs {tuple(h_b.shape)}")
    if h_a.ndim == 1:
        h_a = h_a[None]
        h_b = h_b[None]
    d = torch.as_tensor(d, dtype=h_a.dtype, device=h_a.device).reshape(-1)
    if d.shape[0] != h_a.shape[0]:
        raise ValueError("one distance per pair required")
    if (d < 0).any():
        raise ValueError("distances must be non-negative")
    l2 = torch.linalg.vector_norm(h_a - h_b, dim=1)
    return (l2 - d).abs().mean()


@dataclass
class PretextFrame:
    frame_id: str
    net_input: np.ndarray  # (1, s, s) float32
    bbox_a: np.ndarray  # (n, 4) float32
    bbox_b: np.ndarray  # (n, 4) float32
    dist: np.ndarray  # (n,) float32


def build_pretext_frames(
    manifest: DatasetManifest,
    pairs_by_frame: dict[str, list[dict]],
    input_size: int,
    unit_scale: float = 0.001,
) -> list[PretextFrame]:
    """Network inputs plus per-frame pair arrays; frames without pairs are
    skipped."""
    out = []
    for i, entry in enumerate(manifest.entries):
        pairs = pairs_by_frame.get(entry.frame_id, [])
        if not pairs:
            continue
        frame = load_frame(manifest, i, unit_scale=unit_scale)
        out.append(
            PretextFrame(
                frame_id=entry.frame_id,
                net_input=M.normalize_depth(frame, input_size),
                bbox_a=np.asarray([p["bbox_a"] for p in pairs], dtype=np.float32),
                bbox_b=np.asarray([p["bbox_b"] for p in pairs], dtype=np.float32),
                dist=np.asarray([p["distance"] for p in pairs], dtype=np.float32),
            )
        )
    return out


def _pair_batch(frames: list[PretextFrame], idxs: list[int]):
    x = torch.from_numpy(np.stack([frames[i].net_input for i in idxs]))
    fidx, bb_a, bb_b, dist = [], [], [], []
    for slot, i in enumerate(idxs):
        n = frames[i].dist.shape[0]
        fidx.append(np.full(n, slot, dtype=np.int64))
        bb_a.append(frames[i].bbox_a)
        bb_b.append(frames[i].bbox_b)
        dist.append(frames[i].dist)
    return (
        x,
        torch.from_numpy(np.concatenate(fidx)),
        torch.from_numpy(np.concatenate(bb_a)),
        torch.from_numpy(np.concatenate(bb_b)),
        torch.from_numpy(np.concatenate(dist)),
    )


def _pretext_batch_loss(net: M.PretextModel, frames, idxs) -> tuple[torch.Tensor, int]:
    x, fidx, bb_a, bb_b, dist = _pair_batch(frames, idxs)
    dense = net(x)
    s = net.config.sps_size
    both = M.sps_sample_batch(dense, torch.cat([fidx, fidx]), torch.cat([bb_a, bb_b]), s)
    h_a, h_b = both.chunk(2, dim=0)
    return pretext_loss(h_a, h_b, dist), int(dist.shape[0])


def pretext_dataset_loss(net: M.PretextModel, frames: list[PretextFrame], batch_size: int = 32) -> float:
    """Mean pretext loss over every pair of a frame list (no grad)."""
    net.eval()
    total, n_pairs = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(frames), batch_size):
            idxs = list(range(start, min(start + batch_size, len(frames))))
            loss, n = _pretext_batch_loss(net, frames, idxs)
            total += float(loss.detach()) * n
            n_pairs += n
    if n_pairs == 0:
        raise ValueError("no pairs to evaluate")
    return total / n_pairs


def embedding_distance_spearman(net: M.PretextModel, frames: list[PretextFrame], batch_size: int = 32) -> float:
    """Rank correlation between embedding distance and true 3D distance
    over every pair of a frame list."""
    net.eval()
    preds, trues = [], []
    with torch.no_grad():
        for start in range(0, len(frames), batch_size):
            idxs = list(range(start, min(start + batch_size, len(frames))))
            x, fidx, bb_a, bb_b, dist = _pair_batch(frames, idxs)
            dense = net(x)
            s = net.config.sps_size
            both = M.sps_sample_batch(dense, torch.cat([fidx, fidx]), torch.cat([bb_a, bb_b]), s)
            h_a, h_b = both.chunk(2, dim=0)
            preds.append(torch.linalg.vector_norm(h_a - h_b, dim=1).numpy())
            trues.append(dist.numpy())
    return evaluation.spearman(np.concatenate(preds), np.concatenate(trues))


def make_optimizer(config: TrainConfig, params):
    if config.optimizer == "adam":
        return torch.optim.Adam(params, lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    return torch.optim.SGD(params, lr=config.learning_rate)


def train_pretext(
    model_cfg: M.ModelConfig,
    train_cfg: TrainConfig,
    train_manifest: DatasetManifest,
    val_manifest: DatasetManifest,
    out_dir: str | Path,
    slic_params: SlicParams | None = None,
    thresholds: FilterThresholds | None = None,
    workers: int = 1,
    unit_scale: float = 0.001,
) -> tuple[Path, CheckpointMeta]:
    """Pretext training loop with best-on-validation checkpointing.

    Pair labels are computed once per manifest and cached as JSONL next to
    the run outputs.  The checkpoint is persisted only when the epoch's
    mean validation loss strictly improves.
    """
    if not train_manifest.entries or not val_manifest.entries:
        raise ValueError("train and validation manifests must be non-empty")
    overlap = set(train_manifest.frame_ids()) & set(val_manifest.frame_ids())
    if overlap:
        raise ValueError(f"train/val splits share frame ids, e.g. {sorted(overlap)[:3]}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    slic_params = slic_params or SlicParams()
    thresholds = thresholds or FilterThresholds()

    pairs_train = pipeline.ensure_pairs_cached(
        train_manifest, out_dir / "pairs_train.jsonl", slic_params, thresholds,
        train_cfg.pairs_per_frame, train_cfg.seed, workers=workers, unit_scale=unit_scale,
    )
    pairs_val = pipeline.ensure_pairs_cached(
        val_manifest, out_dir / "pairs_val.jsonl", slic_params, thresholds,
        train_cfg.pairs_per_frame, train_cfg.seed, workers=workers, unit_scale=unit_scale,
    )
    frames_train = build_pretext_frames(train_manifest, pairs_train, model_cfg.input_size, unit_scale)
    frames_val = build_pretext_frames(val_manifest, pairs_val, model_cfg.input_size, unit_scale)
    if not frames_train:
        raise ValueError("no usable pairs in the training manifest")
    if not frames_val:
        raise ValueError("no usable pairs in the validation manifest")

    net = M.init_weights(M.PretextModel(model_cfg), seed=train_cfg.seed)
    optimizer = make_optimizer(train_cfg, net.parameters())

    best_path = out_dir / "checkpoint_best.ckpt"
    log_path = out_dir / "train_log.jsonl"
    best_val = float("inf")
    best_meta = None
    with open(log_path, "w") as log:
        for epoch in range(1, train_cfg.epochs + 1):
            order = np.random.default_rng(
                np.random.SeedSequence([train_cfg.seed, 101, epoch])
            ).permutation(len(frames_train))
            net.train()
            total, n_pairs = 0.0, 0
            for start in range(0, len(order), train_cfg.batch_size):
                idxs = order[start : start + train_cfg.batch_size].tolist()
                optimizer.zero_grad()
                loss, n = _pretext_batch_loss(net, frames_train, idxs)
                loss.backward()
                optimizer.step()
                total += float(loss.detach()) * n
                n_pairs += n
            if n_pairs == 0:
                raise ValueError("epoch produced no pairs")
            train_loss = total / n_pairs
            val_loss = pretext_dataset_loss(net, frames_val, train_cfg.batch_size)
            log.write(json.dumps({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss}) + "\n")
            log.flush()
            if val_loss < best_val:
                best_val = val_loss
                best_meta = CheckpointMeta(
                    epoch=epoch, metric=val_loss, metric_name="val_pretext_loss",
                    config_hash=M.config_hash(model_cfg),
                )
                M.save_checkpoint(best_path, net, model_cfg, epoch, val_loss, "val_pretext_loss")
    assert best_meta is not None
    return best_path, best_meta


@dataclass
class SplitPlan:
    fractions: tuple[float, ...] = (0.02, 0.05, 0.10, 0.20, 0.50, 1.00)
    n_seeds: int = 5
    seed: int = 0
    ids: dict[str, dict[str, list[str]]] = field(default_factory=dict)

    def key(self, fraction: float) -> str:
        return f"{fraction:g}"

    def frame_ids(self, fraction: float, seed_index: int) -> list[str]:
        return self.ids[self.key(fraction)][str(seed_index)]


def make_fraction_splits(train_manifest: DatasetManifest, plan: SplitPlan) -> SplitPlan:
    """Populate per-(fraction, seed) frame-id lists.

    One seeded permutation per seed; fraction f takes its first
    round(f * N) ids (at least 1), so smaller fractions are nested inside
    larger ones for the same seed.
    """
    if not train_manifest.entries:
        raise ValueError("empty training manifest")
    all_ids = train_manifest.frame_ids()
    n = len(all_ids)
    ids: dict[str, dict[str, list[str]]] = {f"{f:g}": {} for f in plan.fractions}
    for s in range(plan.n_seeds):
        rng = np.random.default_rng(np.random.SeedSequence([plan.seed, 555, s]))
        perm = [all_ids[i] for i in rng.permutation(n)]
        for f in plan.fractions:
            k = min(n, max(1, int(np.floor(f * n + 0.5))))
            ids[f"{f:g}"][str(s)] = perm[:k]
    return SplitPlan(fractions=tuple(plan.fractions), n_seeds=plan.n_seeds, seed=plan.seed, ids=ids)


def write_split_plan(path: str | Path, plan: SplitPlan) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(asdict(plan), sort_keys=True, indent=2) + "\n")


def read_split_plan(path: str | Path) -> SplitPlan:
    raw = json.loads(Path(path).read_text())
    return SplitPlan(
        fractions=tuple(raw["fractions"]), n_seeds=raw["n_seeds"], seed=raw["seed"], ids=raw["ids"]
    )


@dataclass
class _LabeledFrame:
    frame_id: str
    net_input: np.ndarray  # (1, s, s) float32
    seg_target: np.ndarray | None  # (s, s) int64 with 255 ignore
    activity: int | None


def build_labeled_frames(
    manifest: DatasetManifest,
    task: str,
    input_size: int,
    frame_ids: set[str] | None = None,
    unit_scale: float = 0.001,
) -> list[_LabeledFrame]:
    out = []
    for i, entry in enumerate(manifest.entries):
        if frame_ids is not None and entry.frame_id not in frame_ids:
            continue
        frame = load_frame(manifest, i, unit_scale=unit_scale)
        if task == "segmentation":
            if frame.labels is None:
                raise ValueError(f"frame {entry.frame_id!r} has no label mask")
            target = M.nearest_resize(frame.labels, input_size, input_size).astype(np.int64)
        else:
            if frame.activity is None:
                raise ValueError(f"frame {entry.frame_id!r} has no activity label")
            target = None
        out.append(
            _LabeledFrame(
                frame_id=entry.frame_id,
                net_input=M.normalize_depth(frame, input_size),
                seg_target=target,
                activity=frame.activity,
            )
        )
    return out


def _seg_val_miou(net, frames, num_classes: int, batch_size: int) -> float:
    net.eval()
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    with torch.no_grad():
        for start in range(0, len(frames), batch_size):
            chunk = frames[start : start + batch_size]
            x = torch.from_numpy(np.stack([f.net_input for f in chunk]))
            scores = net(x).numpy()
            pred = np.argmax(scores, axis=1)
            for f, p in zip(chunk, pred):
                cm += evaluation.confusion_matrix(f.seg_target, p, num_classes)
    return evaluation.miou(cm)


def _cls_val_map(net, frames, num_classes: int, batch_size: int) -> float:
    net.eval()
    scores_all = []
    with torch.no_grad():
        for start in range(0, len(frames), batch_size):
            chunk = frames[start : start + batch_size]
            x = torch.from_numpy(np.stack([f.net_input for f in chunk]))
            scores_all.append(torch.softmax(net(x), dim=1).numpy())
    scores = np.concatenate(scores_all, axis=0)
    present = sorted({f.activity for f in frames})
    ranked: evaluation.RankedPredictions = {}
    for cls in present:
        ranked[cls] = [(float(scores[i, cls]), frames[i].activity == cls) for i in range(len(frames))]
    return evaluation.map_score(ranked)


def finetune(
    model_cfg: M.ModelConfig,
    train_cfg: TrainConfig,
    task: str,
    init: str | Path,
    train_manifest: DatasetManifest,
    val_manifest: DatasetManifest,
    test_manifest: DatasetManifest,
    frame_ids: list[str] | None = None,
    fraction: float = 1.0,
    seed_tag: int = 0,
    unit_scale: float = 0.001,
) -> dict:
    """Supervised fine-tuning from scratch or from a pretext checkpoint.

    ``init`` is "scratch" or a checkpoint path; a checkpoint initializes
    the encoder (and the decoder, for segmentation) while the task head is
    always freshly seeded.  The best epoch is selected on validation
    mIoU/mAP and the returned record carries the test metric plus run
    provenance (task, init kind, fraction, seed).
    """
    if task not in ("segmentation", "classification"):
        raise ValueError(f"unknown task {task!r}")
    run_seed = int(
        np.random.SeedSequence([train_cfg.seed, 777, seed_tag, 0 if task == "segmentation" else 1]).generate_state(1)[0]
    )
    net = M.SegmentationModel(model_cfg) if task == "segmentation" else M.ClassificationModel(model_cfg)
    M.init_weights(net, seed=run_seed)

    init_kind = "scratch"
    if str(init) != "scratch":
        header, weights = M.load_checkpoint(init)
        ckpt_cfg = M.ModelConfig.from_dict(header["config"])
        if ckpt_cfg.encoder_widths != model_cfg.encoder_widths or ckpt_cfg.stem != model_cfg.stem:
            raise ValueError("checkpoint encoder profile does not match the model config")
        n_enc = M.load_weights_into(net.encoder, weights, prefix="encoder.")
        if n_enc == 0:
            raise ValueError(f"checkpoint {init} contains no encoder weights")
        if task == "segmentation":
            M.load_weights_into(net.decoder, weights, prefix="decoder.")
        init_kind = "pretrained"

    ids = set(frame_ids) if frame_ids is not None else None
    frames_train = build_labeled_frames(train_manifest, task, model_cfg.input_size, ids, unit_scale)
    frames_val = build_labeled_frames(val_manifest, task, model_cfg.input_size, None, unit_scale)
    frames_test = build_labeled_frames(test_manifest, task, model_cfg.input_size, None, unit_scale)
    if not frames_train:
        raise ValueError("no labeled frames selected for fine-tuning")

    optimizer = make_optimizer(train_cfg, net.parameters())
    ce = nn.CrossEntropyLoss(ignore_index=255)
    evaluate = _seg_val_miou if task == "segmentation" else _cls_val_map
    num_classes = model_cfg.num_seg_classes if task == "segmentation" else model_cfg.num_activity_classes

    best_metric = -float("inf")
    best_epoch = 0
    best_state = None
    for epoch in range(1, train_cfg.epochs + 1):
        order = np.random.default_rng(
            np.random.SeedSequence([run_seed, 202, epoch])
        ).permutation(len(frames_train))
        net.train()
        for start in range(0, len(order), train_cfg.batch_size):
            chunk = [frames_train[i] for i in order[start : start + train_cfg.batch_size]]
            x = torch.from_numpy(np.stack([f.net_input for f in chunk]))
            if task == "segmentation":
                target = torch.from_numpy(np.stack([f.seg_target for f in chunk]))
            else:
                target = torch.tensor([f.activity for f in chunk], dtype=torch.long)
            optimizer.zero_grad()
            loss = ce(net(x), target)
            loss.backward()
            optimizer.step()
        metric = evaluate(net, frames_val, num_classes, train_cfg.batch_size)
        if metric > best_metric:
            best_metric = metric
            best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in net.state_dict().items()}
    assert best_state is not None
    net.load_state_dict(best_state)
    test_metric = evaluate(net, frames_test, num_classes, train_cfg.batch_size)
    return {
        "task": task,
        "init": init_kind,
        "fraction": fraction,
        "seed": seed_tag,
        "metric_name": "miou" if task == "segmentation" else "map",
        "metric_value": float(test_metric),
        "val_metric": float(best_metric),
        "best_epoch": int(best_epoch),
        "epochs": train_cfg.epochs,
        "n_train_frames": len(frames_train),
        "config_hash": M.config_hash(model_cfg),
    }
