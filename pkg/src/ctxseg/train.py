"""Training loop, cross-validation, ablation battery, probes, and dumps.

A run is a pure function of (config, dataset): shuffling, augmentation, and
initialization all derive from the config seeds, so rerunning a config
reproduces its checkpoint byte for byte. Model selection is best-on-validation
with earlier epochs winning ties; the reported test score always comes from
that checkpoint, never the final epoch.
"""

from __future__ import annotations

import csv
import json
import re
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .augment import AugmentPolicy, augment_sample
from .data import (Sample, SplitSpec, centroid_side, dice, split_indices,
                   write_pgm)
from .diffcore import DiffTensor
from .errors import DataFormatError, NumericalError
from .model import (ModelConfig, init_weights, predict_mask, text_gated_forward,
                    unet_forward)
from .textenc import embed, tokenize
from .util import mix64, rng_from

_SALT_SHUFFLE = 0x54F1

ABLATION_ARMS = ("full", "no_text", "flip", "baseline_unet")


@dataclass
class TrainConfig:
    lr: float = 5e-5
    epochs: int = 100
    batch_size: int = 4
    ablation: str = "full"
    threshold: float = 0.5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    model: ModelConfig = field(default_factory=ModelConfig)
    policy: AugmentPolicy = field(default_factory=AugmentPolicy)
    split: SplitSpec = field(default_factory=SplitSpec)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.ablation not in ABLATION_ARMS:
            raise ValueError(f"ablation must be one of {ABLATION_ARMS}, "
                             f"got {self.ablation!r}")


@dataclass
class RunRecord:
    ablation: str
    fold_seed: int
    train_loss: list
    val_dice: list
    best_epoch: int
    test_dice_mean: float
    test_dice_sd: float
    test_scores: list
    checkpoint: str
    config: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


@dataclass
class EvalResult:
    mean: float
    sd: float
    scores: list


def config_to_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def _effective_policy(cfg: TrainConfig) -> AugmentPolicy:
    if cfg.ablation == "flip":
        return replace(cfg.policy, p_hflip=0.5)
    return cfg.policy


def _report_text(sample: Sample, cfg: TrainConfig) -> str:
    return "" if cfg.ablation == "no_text" else sample.report


def _embed_report(text: str, mc: ModelConfig):
    return embed(tokenize(text, mc.max_tokens), mc.d_e, mc.embed_seed)


def _forward_batch(weights, samples, cfg: TrainConfig, train: bool):
    imgs = np.stack([s.image for s in samples])[:, None, :, :]
    if cfg.ablation == "baseline_unet":
        return unet_forward(imgs, weights, cfg.model, train=train)
    embs = [_embed_report(_report_text(s, cfg), cfg.model) for s in samples]
    return text_gated_forward(imgs, embs, weights, cfg.model, train=train)


def _as_weights(src, mc: ModelConfig, ablation: str) -> dict:
    """Accept live weights, a {name: array} dict, or a checkpoint path."""
    if isinstance(src, (str, Path)):
        src = dc.load_checkpoint(src)
    if all(isinstance(v, DiffTensor) for v in src.values()):
        return src
    expected = set(init_weights(mc, with_attention=ablation != "baseline_unet"))
    got = set(src)
    if expected != got:
        missing = sorted(expected - got)[:3]
        extra = sorted(got - expected)[:3]
        raise DataFormatError(
            f"checkpoint does not match model config (missing {missing}, "
            f"unexpected {extra})")
    return {name: DiffTensor(arr, requires_grad=not name.endswith((".mean", ".var")))
            for name, arr in src.items()}


def evaluate(checkpoint, samples, cfg: TrainConfig,
             threshold: float | None = None) -> EvalResult:
    """Eval-mode Dice over samples: mean, population SD, per-sample scores."""
    if not samples:
        raise ValueError("evaluate needs at least one sample")
    thr = cfg.threshold if threshold is None else threshold
    weights = _as_weights(checkpoint, cfg.model, cfg.ablation)
    for s in samples:
        if s.image.shape != (cfg.model.image_size, cfg.model.image_size):
            raise DataFormatError(
                f"sample is {s.image.shape}, model config expects "
                f"{cfg.model.image_size}x{cfg.model.image_size}")
    scores = []
    for start in range(0, len(samples), 8):
        chunk = samples[start:start + 8]
        logits = _forward_batch(weights, chunk, cfg, train=False)
        preds = predict_mask(logits, thr)
        for j, s in enumerate(chunk):
            scores.append(dice(preds[j, 0], s.mask))
    mean = float(np.mean(scores))
    sd = float(np.std(scores))
    return EvalResult(mean=mean, sd=sd, scores=scores)


def _snapshot(weights: dict) -> dict:
    return {k: t.data.copy() for k, t in weights.items()}


def train(cfg: TrainConfig, dataset, out_dir, fold_seed: int | None = None
          ) -> RunRecord:
    """Train one fold: augment, optimize, select on validation, test."""
    if not dataset:
        raise ValueError("train needs a nonempty dataset")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fold_seed = cfg.split.fold_seeds[0] if fold_seed is None else fold_seed
    tr_idx, va_idx, te_idx = split_indices(len(dataset), cfg.split.fractions,
                                           fold_seed)
    policy = _effective_policy(cfg)
    use_attn = cfg.ablation != "baseline_unet"
    weights = init_weights(cfg.model, with_attention=use_attn)
    opt = dc.AdamWState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                        eps=cfg.eps, weight_decay=cfg.weight_decay)

    val_samples = [dataset[i] for i in va_idx]
    train_losses, val_dices = [], []
    best_dice, best_epoch, best_state = -1.0, -1, None

    for epoch in range(cfg.epochs):
        order = rng_from(cfg.seed, fold_seed, epoch, _SALT_SHUFFLE).permutation(
            np.asarray(tr_idx))
        losses = []
        for step_start in range(0, len(order), cfg.batch_size):
            batch_idx = order[step_start:step_start + cfg.batch_size]
            batch = [augment_sample(dataset[i], policy,
                                    mix64(cfg.seed, fold_seed, epoch, int(i)))
                     for i in batch_idx]
            targets = np.stack([s.mask for s in batch]).astype(np.float32)[:, None]
            logits = _forward_batch(weights, batch, cfg, train=True)
            loss = dc.bce_with_logits(logits, targets)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, step "
                    f"{step_start // cfg.batch_size}")
            dc.zero_grads(weights)
            dc.backward(loss)
            dc.adamw_step(weights, opt)
            losses.append(loss_val)
        train_losses.append(float(np.mean(losses)) if losses else 0.0)

        if val_samples:
            res = evaluate(weights, val_samples, cfg)
            val_dices.append(res.mean)
            if res.mean > best_dice:            # strict: earlier epoch wins ties
                best_dice, best_epoch, best_state = res.mean, epoch, _snapshot(weights)
        else:
            val_dices.append(0.0)
            if best_state is None:
                best_dice, best_epoch, best_state = 0.0, epoch, _snapshot(weights)

    if best_state is None:     # epochs == 0 can't happen (validated); safety net
        best_epoch, best_state = cfg.epochs - 1, _snapshot(weights)

    ckpt_path = out_dir / "checkpoint.ctxn"
    dc.save_checkpoint(ckpt_path, best_state)
    (out_dir / "config.echo.json").write_text(
        json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")

    test_samples = [dataset[i] for i in te_idx]
    if test_samples:
        test = evaluate(str(ckpt_path), test_samples, cfg)
    else:
        test = EvalResult(mean=0.0, sd=0.0, scores=[])

    record = RunRecord(
        ablation=cfg.ablation,
        fold_seed=int(fold_seed),
        train_loss=train_losses,
        val_dice=val_dices,
        best_epoch=int(best_epoch),
        test_dice_mean=test.mean,
        test_dice_sd=test.sd,
        test_scores=test.scores,
        checkpoint=str(ckpt_path),
        config=config_to_dict(cfg),
    )
    (out_dir / "runrecord.json").write_text(record.to_json() + "\n")
    return record


@dataclass
class CVResult:
    records: list
    mean: float
    sd: float


def cross_validate(cfg: TrainConfig, dataset, out_dir) -> CVResult:
    """One train per fold seed; aggregate mean and SD across fold test means."""
    if len(dataset) < len(cfg.split.fold_seeds) * cfg.batch_size:
        raise ValueError(
            f"dataset of {len(dataset)} too small for "
            f"{len(cfg.split.fold_seeds)} folds at batch size {cfg.batch_size}")
    out_dir = Path(out_dir)
    records = [train(cfg, dataset, out_dir / f"fold{k}", fs)
               for k, fs in enumerate(cfg.split.fold_seeds)]
    means = [r.test_dice_mean for r in records]
    result = CVResult(records=records, mean=float(np.mean(means)),
                      sd=float(np.std(means)))
    (out_dir / "cv.json").write_text(json.dumps({
        "mean": result.mean, "sd": result.sd,
        "folds": [{"fold_seed": r.fold_seed, "dice": r.test_dice_mean,
                   "sd": r.test_dice_sd, "best_epoch": r.best_epoch}
                  for r in records],
    }, indent=2, sort_keys=True) + "\n")
    return result


def _run_arm(args):
    arm_cfg, dataset, arm_dir = args
    return arm_cfg.ablation, cross_validate(arm_cfg, dataset, arm_dir)


def ablate(cfg: TrainConfig, dataset, out_dir,
           arms=ABLATION_ARMS, jobs: int = 1) -> dict:
    """Run the ablation arms under shared fold and init seeds.

    Emits comparison.csv (arm, fold, dice, sd) plus comparison.json with
    per-arm aggregates and Dice deltas against the full arm.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = [(replace(cfg, ablation=arm), dataset, out_dir / arm) for arm in arms]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = dict(pool.map(_run_arm, tasks))
    else:
        results = dict(map(_run_arm, tasks))

    with open(out_dir / "comparison.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["arm", "fold", "dice", "sd"])
        for arm in arms:
            for k, rec in enumerate(results[arm].records):
                writer.writerow([arm, k, f"{rec.test_dice_mean:.6f}",
                                 f"{rec.test_dice_sd:.6f}"])

    summary = {}
    full_mean = results["full"].mean if "full" in results else None
    for arm in arms:
        cv = results[arm]
        summary[arm] = {
            "mean": cv.mean,
            "sd": cv.sd,
            "median": float(statistics.median(
                r.test_dice_mean for r in cv.records)),
            "delta_vs_full": (cv.mean - full_mean
                              if full_mean is not None else None),
        }
    (out_dir / "comparison.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return {"summary": summary, "results": results}


# ---------------------------------------------------------------------------
# probes

_def_word = r"(?<![a-z]){}(?![a-z])"


def swap_word(text: str, src: str, dst: str) -> str:
    return re.sub(_def_word.format(re.escape(src.lower())), dst, text,
                  flags=re.IGNORECASE)


def _predict_one(weights, sample: Sample, report: str, cfg: TrainConfig,
                 threshold: float):
    img = sample.image[None, None, :, :]
    if cfg.ablation == "baseline_unet":
        logits = unet_forward(img, weights, cfg.model, train=False)
    else:
        logits = text_gated_forward(img, _embed_report(report, cfg.model),
                                    weights, cfg.model, train=False)
    return predict_mask(logits, threshold)[0, 0]


def word_swap_probe(checkpoint, samples, swaps, cfg: TrainConfig,
                    threshold: float | None = None) -> dict:
    """Re-predict each sample with single words swapped in its report.

    For every (src, dst) swap and every sample whose report contains src,
    records centroid sides before/after, the predicted-area ratio, and the
    IoU between the two predictions; aggregates flip rate and mean area ratio
    per swap (also as percentages).
    """
    thr = cfg.threshold if threshold is None else threshold
    weights = _as_weights(checkpoint, cfg.model, cfg.ablation)
    probes = {f"{src}->{dst}": [] for src, dst in swaps}
    for si, sample in enumerate(samples):
        base_pred = None
        for src, dst in swaps:
            swapped = swap_word(sample.report, src, dst)
            if swapped == sample.report:
                continue
            if base_pred is None:
                base_pred = _predict_one(weights, sample, sample.report, cfg, thr)
            new_pred = _predict_one(weights, sample, swapped, cfg, thr)
            inter = int((base_pred & new_pred).sum())
            union = int((base_pred | new_pred).sum())
            base_area = int(base_pred.sum())
            probes[f"{src}->{dst}"].append({
                "index": si,
                "orig_side": centroid_side(base_pred),
                "swapped_side": centroid_side(new_pred),
                "orig_dice": dice(base_pred, sample.mask),
                "area_ratio": (int(new_pred.sum()) / base_area
                               if base_area else None),
                "iou": inter / union if union else 1.0,
            })

    report = {"threshold": thr, "swaps": {}}
    for key, entries in probes.items():
        if not entries:
            raise ValueError(f"swap source word of {key!r} occurs in no report")
        sided = [e for e in entries
                 if e["orig_side"] is not None and e["swapped_side"] is not None]
        flips = sum(e["orig_side"] != e["swapped_side"] for e in sided)
        ratios = [e["area_ratio"] for e in entries if e["area_ratio"] is not None]
        flip_rate = flips / len(sided) if sided else 0.0
        mean_ratio = float(np.mean(ratios)) if ratios else float("nan")
        report["swaps"][key] = {
            "samples": len(entries),
            "flip_rate": flip_rate,
            "flip_rate_pct": 100.0 * flip_rate,
            "mean_area_ratio": mean_ratio,
            "mean_area_ratio_pct": 100.0 * mean_ratio,
            "entries": entries,
        }
    return report


def _to_u8(arr: np.ndarray) -> np.ndarray:
    lo, hi = float(arr.min()), float(arr.max())
    span = hi - lo if hi > lo else 1.0
    return np.round((arr - lo) / span * 255.0).astype(np.uint8)


def attention_dump(checkpoint, sample: Sample, out_dir, cfg: TrainConfig,
                   swap=("left", "right"), channel: int = 0) -> list:
    """Write per-level PGM images of the gate's inputs and outputs.

    For the original report and the word-swapped one, dumps the attention
    input feature map, the tanh-activated attention map, and the gated
    feature map at one fixed channel per decoder level, min-max normalized
    with raw ranges recorded in scales.txt.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    weights = _as_weights(checkpoint, cfg.model, cfg.ablation)
    reports = {
        "orig": sample.report,
        "swap": swap_word(sample.report, swap[0], swap[1]),
    }
    written = []
    scales = []
    for variant, text in reports.items():
        capture: dict = {}
        text_gated_forward(sample.image[None, None], _embed_report(text, cfg.model),
                           weights, cfg.model, train=False, capture=capture)
        for level in sorted(capture):
            maps = capture[level]
            for kind, key in (("q", "q"), ("tanha", "tanh_a"), ("qstar", "qstar")):
                arr = maps[key][channel]
                name = f"level{level}_{kind}_{variant}.pgm"
                write_pgm(out_dir / name, _to_u8(arr), 255)
                scales.append(f"{name} min={arr.min():.6g} max={arr.max():.6g}")
                written.append(str(out_dir / name))
    (out_dir / "scales.txt").write_text("\n".join(scales) + "\n")
    return written
