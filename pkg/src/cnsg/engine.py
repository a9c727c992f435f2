"""Training and evaluation engine.

Composes the per-frame pipeline (features -> class centroids -> CAMs ->
non-salient prototypes -> graph refinement -> temporal fusion) into a total
loss, and provides the SGD loop, checkpointing, mIoU evaluation, the
ablation grid, and the alpha sweep.
"""

import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .alignment import FrameCentroids, NoSharedClassesError, nsca_loss
from .cam import class_feature_mask, classification_loss, compute_cam
from .config import RunConfig, config_hash, to_dict, from_dict, save_config
from .core import BinaryMask, FeatureMap, masked_mean
from .nonsalient import assemble_cnsf, ema_update, nonsalient_mask
from .segnet import BackboneConfig, SegModel, fuse_frame_feature, segmentation_loss
from .synthdata import SyntheticDataset, VideoSample, photometric_augment

CHECKPOINT_FORMAT = "cnsg-checkpoint-v1"


class TrainingDivergedError(RuntimeError):
    """Raised when the batch loss stops being finite."""


def build_model(config: RunConfig) -> SegModel:
    backbone = BackboneConfig(
        stage_channels=config.model.stage_channels,
        strides=config.model.strides,
        num_classes=config.data.num_classes,
        convs_per_stage=config.model.convs_per_stage,
        bias=config.model.bias,
        aspp_channels=config.model.aspp_channels,
        aspp_rates=config.model.aspp_rates,
        reasoned_dim=config.model.reasoned_dim,
    )
    size = config.data.resolution
    return SegModel(backbone, input_hw=(size, size), ema_lambda=config.ema_lambda)


@dataclass
class _FrameStats:
    centroids: list  # [(class_id, Tensor[K])]
    cams: dict  # class_id -> Tensor[H', W'] (mask-gated)
    ns_centroids: dict  # class_id -> Tensor[K]


def _frame_stats(f_o: FeatureMap, label, model: SegModel, alpha: float) -> _FrameStats:
    centroids = []
    cams = {}
    ns_centroids = {}
    for class_id in range(model.num_classes):
        mask = class_feature_mask(label, class_id, f_o.stride)
        if mask.count() == 0:
            continue
        centroids.append((class_id, masked_mean(f_o, mask)))
        cam = compute_cam(f_o, model.centroid_classifier, class_id, mask)
        cams[class_id] = cam
        ns = nonsalient_mask(cam, alpha)
        both = mask & ns
        if both.count() > 0:
            ns_centroids[class_id] = masked_mean(f_o, both)
    return _FrameStats(centroids, cams, ns_centroids)


def _nsfr_refine(model: SegModel, f_o: FeatureMap, cams: dict) -> FeatureMap:
    """Assemble one node per class (zeros when unavailable) and refine f_o."""
    nodes = []
    valid = []
    dtype = f_o.data.dtype
    for class_id in range(model.num_classes):
        cam = cams.get(class_id)
        if cam is not None and bool(model.bank.initialized[class_id]):
            nodes.append(assemble_cnsf(model.bank, class_id, cam).data.to(dtype))
            valid.append(True)
        else:
            nodes.append(torch.zeros(model.node_dim, dtype=dtype))
            valid.append(False)
    refined = model.reasoner(f_o, torch.stack(nodes), torch.tensor(valid))
    return refined


def total_loss(pair: VideoSample, model: SegModel, config: RunConfig,
               centroid_stream: list | None = None, update_bank: bool = True):
    """Weighted sum of segmentation, classification, and alignment terms.

    Returns (total, parts) where parts holds detached scalars for
    'L_s', 'L_cls', 'L_sca', and 'total'. Prototype EMA updates happen
    here, previous frame first, before node assembly; update_bank=False
    freezes the bank (the updates are stop-gradient, so freezing gives
    the function whose analytic gradient training actually follows).
    """
    f_o_prev, f_low_prev = model.extract_features(pair.frame_prev)
    f_o_curr, f_low_curr = model.extract_features(pair.frame_curr)
    stats_prev = _frame_stats(f_o_prev, pair.label_prev, model, config.alpha)
    stats_curr = _frame_stats(f_o_curr, pair.label_curr, model, config.alpha)

    dtype = f_o_curr.data.dtype
    zero = torch.zeros((), dtype=dtype)

    centroids = stats_prev.centroids + stats_curr.centroids
    if centroids:
        loss_cls = classification_loss(centroids, model.centroid_classifier)
    else:
        loss_cls = zero

    if update_bank:
        for class_id, centroid in stats_prev.ns_centroids.items():
            ema_update(model.bank, class_id, centroid)
            if centroid_stream is not None:
                centroid_stream.append((class_id, centroid.detach().clone()))
        for class_id, centroid in stats_curr.ns_centroids.items():
            ema_update(model.bank, class_id, centroid)
            if centroid_stream is not None:
                centroid_stream.append((class_id, centroid.detach().clone()))

    if config.use_nsfr:
        f_bar = _nsfr_refine(model, f_o_curr, stats_curr.cams)
    else:
        f_bar = f_o_curr

    f_t_curr = fuse_frame_feature(model.aspp(f_o_curr), f_low_curr, f_bar)
    f_t_prev = fuse_frame_feature(model.aspp(f_o_prev), f_low_prev, f_o_prev)
    pred = model.temporal_fuse_predict(f_t_curr, f_t_prev, pair.flow)
    loss_seg = segmentation_loss(pred, pair.label_curr)

    if config.use_nsca:
        prev_fc = FrameCentroids.from_dict(stats_prev.ns_centroids, model.num_classes)
        curr_fc = FrameCentroids.from_dict(stats_curr.ns_centroids, model.num_classes)
        try:
            loss_sca = nsca_loss(prev_fc, curr_fc)
        except NoSharedClassesError:
            loss_sca = zero
    else:
        loss_sca = zero

    w = config.loss_weights
    total = w.seg * loss_seg + w.cls * loss_cls + w.sca * loss_sca
    parts = {
        "L_s": float(loss_seg.detach()),
        "L_cls": float(loss_cls.detach()),
        "L_sca": float(loss_sca.detach()),
        "total": float(total.detach()),
    }
    return total, parts


def predict_pair(pair: VideoSample, model: SegModel, config: RunConfig) -> torch.Tensor:
    """Predicted class index map [H, W] for the current frame.

    Inference has no ground-truth masks, so when refinement is on the CAM
    support comes from a preliminary unrefined prediction: its argmax at
    feature resolution gates the CAMs, and only classes both predicted
    present and covered by the prototype bank contribute nodes.
    """
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            f_o_curr, f_low_curr = model.extract_features(pair.frame_curr)
            f_o_prev, f_low_prev = model.extract_features(pair.frame_prev)
            f_h_curr = model.aspp(f_o_curr)
            f_t_prev = fuse_frame_feature(model.aspp(f_o_prev), f_low_prev, f_o_prev)
            plain = fuse_frame_feature(f_h_curr, f_low_curr, f_o_curr)
            pred = model.temporal_fuse_predict(plain, f_t_prev, pair.flow)
            if config.use_nsfr:
                stride = f_o_curr.stride
                pseudo = pred.argmax(dim=0)[::stride, ::stride]
                cams = {}
                for class_id in range(model.num_classes):
                    hits = pseudo == class_id
                    if bool(hits.any()) and bool(model.bank.initialized[class_id]):
                        mask = BinaryMask(hits)
                        cams[class_id] = compute_cam(
                            f_o_curr, model.centroid_classifier, class_id, mask)
                if cams:
                    f_bar = _nsfr_refine(model, f_o_curr, cams)
                    f_t_curr = fuse_frame_feature(f_h_curr, f_low_curr, f_bar)
                    pred = model.temporal_fuse_predict(f_t_curr, f_t_prev, pair.flow)
            return pred.argmax(dim=0)
    finally:
        if was_training:
            model.train()


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsReport:
    miou: float
    per_class_iou: list  # one entry per class, None where the class has no GT
    confusion: np.ndarray  # [N, N] int64, rows = ground truth
    per_domain: dict = field(default_factory=dict)  # name -> MetricsReport

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "per_class_iou": self.per_class_iou,
            "confusion": self.confusion.tolist(),
            "per_domain": {k: v.to_dict() for k, v in sorted(self.per_domain.items())},
        }


def accumulate_confusion(confusion: np.ndarray, gt, pred, ignore_index: int = 255):
    """Add per-pixel counts into confusion[gt, pred], skipping ignored pixels."""
    gt = np.asarray(gt).reshape(-1)
    pred = np.asarray(pred).reshape(-1)
    keep = gt != ignore_index
    n = confusion.shape[0]
    flat = gt[keep].astype(np.int64) * n + pred[keep].astype(np.int64)
    counts = np.bincount(flat, minlength=n * n)
    confusion += counts.reshape(n, n)
    return confusion


def miou_from_confusion(confusion: np.ndarray) -> MetricsReport:
    confusion = np.asarray(confusion, dtype=np.int64)
    if confusion.sum() == 0:
        raise ValueError("confusion matrix has no counted pixels")
    n = confusion.shape[0]
    per_class = []
    included = []
    for c in range(n):
        gt_total = confusion[c, :].sum()
        if gt_total == 0:
            per_class.append(None)
            continue
        tp = confusion[c, c]
        union = gt_total + confusion[:, c].sum() - tp
        iou = float(tp) / float(union)
        per_class.append(iou)
        included.append(iou)
    return MetricsReport(miou=float(np.mean(included)), per_class_iou=per_class,
                         confusion=confusion)


def evaluate(model: SegModel, dataset: SyntheticDataset, config: RunConfig,
             domains=None, max_seeds: int | None = None) -> MetricsReport:
    """Per-domain mIoU plus their arithmetic mean as the headline score."""
    if domains is None:
        domains = list(dataset.domains)
    n = model.num_classes
    pooled = np.zeros((n, n), dtype=np.int64)
    per_domain = {}
    scores = []
    for domain in domains:
        seeds = dataset.seeds if max_seeds is None else dataset.seeds[:max_seeds]
        confusion = np.zeros((n, n), dtype=np.int64)
        count = 0
        for seed in seeds:
            pair = dataset.load(domain, seed)
            pred = predict_pair(pair, model, config)
            accumulate_confusion(confusion, pair.label_curr.data.numpy(),
                                 pred.numpy(), pair.label_curr.ignore_index)
            count += 1
        if count == 0 or confusion.sum() == 0:
            print(f"warning: domain '{domain}' has no evaluable samples, skipping",
                  file=sys.stderr)
            continue
        report = miou_from_confusion(confusion)
        per_domain[domain] = report
        pooled += confusion
        scores.append(report.miou)
    if not scores:
        raise ValueError("no domain produced any evaluable samples")
    overall = miou_from_confusion(pooled)
    overall.miou = float(np.mean(scores))  # headline = mean of per-domain mIoU
    overall.per_domain = per_domain
    return overall


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: SegModel
    log: list  # one dict per iteration
    config: RunConfig
    seed: int
    checkpoint_path: Path | None = None


def _augment_pair(pair: VideoSample, seed: int, strength: float) -> VideoSample:
    if strength == 0:
        return pair
    # same draw for both frames so photometry stays temporally consistent
    return VideoSample(
        frame_prev=photometric_augment(pair.frame_prev, seed, strength),
        frame_curr=photometric_augment(pair.frame_curr, seed, strength),
        label_prev=pair.label_prev,
        label_curr=pair.label_curr,
        flow=pair.flow,
        domain=pair.domain,
        seed=pair.seed,
        valid=pair.valid,
    )


def save_checkpoint(path, model: SegModel, optimizer, config: RunConfig,
                    iteration: int, seed: int, sampler_state: dict):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": to_dict(config),
        "config_hash": config_hash(config),
        "iteration": iteration,
        "seed": seed,
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict(),
        "torch_rng": torch.get_rng_state(),
        "sampler_state": sampler_state,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a recognized checkpoint (format tag missing)")
    return payload


def model_from_checkpoint(payload: dict) -> tuple[SegModel, RunConfig]:
    config = from_dict(payload["config"])
    model = build_model(config)
    model.load_state_dict(payload["model_state"])
    return model, config


def poly_lr(base_lr: float, iteration: int, total: int, power: float) -> float:
    return base_lr * (1.0 - iteration / total) ** power


def train(config: RunConfig, dataset: SyntheticDataset, out_dir=None, seed=None,
          resume_from=None, centroid_stream: list | None = None,
          log_hook=None, stop_after: int | None = None) -> TrainResult:
    """SGD with poly decay on source-domain frame pairs.

    Writes checkpoint.pt and train_log.ndjson under out_dir when given.
    resume_from restarts from a saved checkpoint and continues to
    config.iterations. stop_after halts early (an interruption) while
    keeping the full-length schedule, so a later resume reproduces the
    uninterrupted trajectory.
    """
    seed = config.seed if seed is None else seed
    torch.manual_seed(seed)
    model = build_model(config)
    optimizer = torch.optim.SGD(model.parameters(), lr=config.optimizer.lr,
                                momentum=config.optimizer.momentum,
                                weight_decay=config.optimizer.weight_decay)
    sampler = np.random.default_rng(seed)
    start = 0
    log: list = []
    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        model.load_state_dict(payload["model_state"])
        optimizer.load_state_dict(payload["optimizer_state"])
        torch.set_rng_state(payload["torch_rng"])
        sampler.bit_generator.state = payload["sampler_state"]
        start = int(payload["iteration"])
        seed = int(payload["seed"])

    source = config.data.source_domain
    if source not in dataset.domains:
        raise ValueError(f"source domain '{source}' not in dataset domains {dataset.domains}")
    seeds = dataset.seeds

    end = config.iterations if stop_after is None else min(config.iterations, stop_after)
    model.train()
    for iteration in range(start, end):
        lr = poly_lr(config.optimizer.lr, iteration, config.iterations,
                     config.schedule_power)
        for group in optimizer.param_groups:
            group["lr"] = lr
        picks = sampler.integers(0, len(seeds), size=config.batch_size)
        aug_seeds = sampler.integers(0, 2 ** 31 - 1, size=config.batch_size)
        batch_losses = []
        sums = {"L_s": 0.0, "L_cls": 0.0, "L_sca": 0.0}
        batch_seeds = []
        for pick, aug_seed in zip(picks, aug_seeds):
            pair = dataset.load(source, seeds[int(pick)])
            batch_seeds.append(pair.seed)
            pair = _augment_pair(pair, int(aug_seed), config.augment_strength)
            loss, parts = total_loss(pair, model, config, centroid_stream)
            batch_losses.append(loss)
            for key in sums:
                sums[key] += parts[key]
        batch_loss = torch.stack(batch_losses).mean()
        if not torch.isfinite(batch_loss):
            raise TrainingDivergedError(
                f"non-finite loss at iteration {iteration} "
                f"(sample seeds {batch_seeds}, augment seeds {[int(a) for a in aug_seeds]})")
        optimizer.zero_grad()
        batch_loss.backward()
        if config.optimizer.clip_grad_norm > 0:
            # quantile masks flip membership discretely between steps, which
            # occasionally spikes the centroid-loss gradients
            torch.nn.utils.clip_grad_norm_(model.parameters(),
                                           config.optimizer.clip_grad_norm)
        optimizer.step()
        record = {
            "iter": iteration,
            "L_s": sums["L_s"] / config.batch_size,
            "L_cls": sums["L_cls"] / config.batch_size,
            "L_sca": sums["L_sca"] / config.batch_size,
            "lr": lr,
        }
        log.append(record)
        if log_hook is not None:
            log_hook(record)

    result = TrainResult(model=model, log=log, config=config, seed=seed)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.checkpoint_path = save_checkpoint(
            out_dir / "checkpoint.pt", model, optimizer, config,
            end, seed, sampler.bit_generator.state)
        with open(out_dir / "train_log.ndjson", "w") as fh:
            for record in log:
                fh.write(json.dumps(record) + "\n")
        save_config(config, out_dir / "config.json")
    return result


# ---------------------------------------------------------------------------
# studies


ABLATION_VARIANTS = (
    ("baseline", False, False),
    ("+nsca", False, True),
    ("+nsfr", True, False),
    ("+nsfr+nsca", True, True),
)


def _unseen_domains(config: RunConfig, dataset: SyntheticDataset) -> list:
    return [d for d in dataset.domains if d != config.data.source_domain]


def _train_and_score(config: RunConfig, dataset: SyntheticDataset, seed: int,
                     eval_max_seeds: int | None) -> dict:
    result = train(config, dataset, seed=seed)
    report = evaluate(result.model, dataset, config,
                      domains=_unseen_domains(config, dataset),
                      max_seeds=eval_max_seeds)
    scores = {domain: rep.miou for domain, rep in report.per_domain.items()}
    scores["avg"] = report.miou
    return scores


def ablate(config: RunConfig, dataset: SyntheticDataset,
           eval_max_seeds: int | None = None, progress=None) -> dict:
    """Train the four variants over config.seeds; score unseen-domain mIoU."""
    domains = _unseen_domains(config, dataset)
    out = {
        "config_hash": config_hash(config),
        "source_domain": config.data.source_domain,
        "domains": domains,
        "seeds": list(config.seeds),
        "variants": [],
    }
    for name, use_nsfr, use_nsca in ABLATION_VARIANTS:
        variant_cfg = dataclasses.replace(config, use_nsfr=use_nsfr, use_nsca=use_nsca)
        per_seed = {}
        errors = {}
        for seed in config.seeds:
            if progress is not None:
                progress(f"ablate: {name} seed {seed}")
            try:
                per_seed[seed] = _train_and_score(variant_cfg, dataset, seed,
                                                  eval_max_seeds)
            except Exception as err:  # a dead cell should not sink the grid
                errors[seed] = f"{type(err).__name__}: {err}"
        entry = {
            "name": name,
            "use_nsfr": use_nsfr,
            "use_nsca": use_nsca,
            "per_seed": {str(s): v for s, v in per_seed.items()},
            "errors": {str(s): v for s, v in errors.items()},
        }
        if per_seed:
            keys = domains + ["avg"]
            entry["mean"] = {k: float(np.mean([v[k] for v in per_seed.values()]))
                             for k in keys}
            entry["std"] = {k: float(np.std([v[k] for v in per_seed.values()]))
                            for k in keys}
        out["variants"].append(entry)
    return out


def alpha_sweep(config: RunConfig, alphas, dataset: SyntheticDataset,
                eval_max_seeds: int | None = None, progress=None) -> dict:
    """One refinement-enabled model per alpha per seed; unseen-domain mIoU."""
    out = {
        "config_hash": config_hash(config),
        "source_domain": config.data.source_domain,
        "domains": _unseen_domains(config, dataset),
        "seeds": list(config.seeds),
        "points": [],
    }
    for alpha in alphas:
        cfg = dataclasses.replace(config, alpha=float(alpha), use_nsfr=True)
        per_seed = {}
        errors = {}
        for seed in config.seeds:
            if progress is not None:
                progress(f"alpha-sweep: alpha={alpha} seed {seed}")
            try:
                per_seed[seed] = _train_and_score(cfg, dataset, seed, eval_max_seeds)
            except Exception as err:
                errors[seed] = f"{type(err).__name__}: {err}"
        point = {
            "alpha": float(alpha),
            "per_seed": {str(s): v for s, v in per_seed.items()},
            "errors": {str(s): v for s, v in errors.items()},
        }
        if per_seed:
            vals = [v["avg"] for v in per_seed.values()]
            point["mean"] = float(np.mean(vals))
            point["std"] = float(np.std(vals))
        out["points"].append(point)
    return out
