"""Training, resumption, evaluation and prediction driven by a RunConfig."""
from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import (
    augment,
    load_manifest_samples,
    prefetch,
    preprocess,
    split_cases,
    write_phantom_dataset,
    write_raw,
)
from .errors import ConfigError, ContractError, NumericError
from .losses import total_deep_supervision_loss
from .metrics import evaluate_case
from .optim import AdamW, step_decay_lr
from .segnet import forward, init_params, level_shapes, predict
from .uncertainty import (
    averaged_region_stats,
    pooled_region_stats,
    region_uncertainty_stats,
    uncertainty_map,
)


def _sub_seed(*parts):
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# -- data --------------------------------------------------------------------

def resolve_dataset(cfg: RunConfig):
    """Manifest path from the config, generating the phantom set when none is given."""
    if cfg.manifest:
        return Path(cfg.manifest)
    path = Path(cfg.out_dir) / "phantoms" / "manifest.json"
    if not path.exists():
        write_phantom_dataset(path.parent, cfg.n_phantoms, cfg.phantom_seed)
    return path


def load_split(cfg: RunConfig):
    """Preprocessed (train, test) sample lists."""
    samples = [preprocess(s) for s in load_manifest_samples(resolve_dataset(cfg), require_label=True)]
    train_ids, test_ids = split_cases([s.id for s in samples], cfg.test_fraction, cfg.split_seed)
    by_id = {s.id: s for s in samples}
    return [by_id[i] for i in train_ids], [by_id[i] for i in test_ids]


# -- training -------------------------------------------------------------------

@dataclass
class TrainResult:
    params: dict
    history: list = field(default_factory=list)
    checkpoint: Path | None = None


def _checkpoint_tensors(params, opt, epoch):
    out = {k: p.data for k, p in params.items()}
    out.update(opt.state())
    out["train.epoch"] = np.array([epoch], dtype=np.float32)
    return out


def restore(path, cfg: RunConfig):
    """Parameters, optimizer and last finished epoch from a checkpoint; checks the config digest."""
    tensors, digest = load_checkpoint(path)
    if digest != cfg.digest():
        raise ConfigError(f"checkpoint {path} was written by a different configuration")
    params = init_params(cfg.network, cfg.seed)
    for k, p in params.items():
        if k not in tensors or tensors[k].shape != p.shape:
            raise ConfigError(f"checkpoint lacks a compatible tensor {k!r}")
        p.data[...] = tensors[k]
    opt = _make_optimizer(params, cfg)
    if "optim.step" in tensors:
        opt.load_state(tensors)
    epoch = int(tensors["train.epoch"][0]) if "train.epoch" in tensors else 0
    return params, opt, epoch


def load_params(path, cfg: RunConfig, check_digest=True):
    tensors, digest = load_checkpoint(path)
    if check_digest and digest != cfg.digest():
        raise ConfigError(f"checkpoint {path} was written by a different configuration")
    params = init_params(cfg.network, cfg.seed)
    for k, p in params.items():
        if k not in tensors:
            raise ConfigError(f"checkpoint lacks tensor {k!r}")
        p.data[...] = tensors[k]
        p.requires_grad = False
    return params


def _make_optimizer(params, cfg):
    return AdamW(params, cfg.lr, cfg.betas, cfg.adam_eps, cfg.weight_decay)


def _training_view(sample, cfg, epoch, index):
    if cfg.use_augment:
        acfg = cfg.augment
        if acfg.out_shape is None:
            acfg = type(acfg)(**{**acfg.__dict__, "out_shape": cfg.volume_shape})
        sample = augment(sample, _sub_seed(cfg.seed, epoch, index), acfg)
    return sample


def train(cfg: RunConfig, samples, out_dir=None, resume=None, log=None, epochs=None):
    """Mini-batch AdamW on the summed deep-supervision loss.

    Per-epoch rows go to ``train_log.csv``; the checkpoint is rewritten after
    every epoch. ``resume`` continues from a checkpoint of the same config.
    """
    if not samples:
        raise ContractError("no training samples")
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "model.ckpt"
    log_path = out / "train_log.csv"
    epochs = cfg.epochs if epochs is None else epochs
    if resume:
        params, opt, done = restore(resume, cfg)
    else:
        params, done = init_params(cfg.network, cfg.seed), 0
        opt = _make_optimizer(params, cfg)
    n_stage = cfg.network.levels
    header = ["epoch", "lr", "loss"] + [f"stage{i}" for i in range(n_stage)] + ["dice_term", "ce_term", "seconds"]
    fresh = not (resume and log_path.exists())
    history = []
    with open(log_path, "w" if fresh else "a", newline="") as fh, threadpool_limits(cfg.threads):
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(header)
        for epoch in range(done + 1, epochs + 1):
            t0 = time.perf_counter()
            opt.lr = step_decay_lr(cfg.lr, epoch, cfg.decay_every, cfg.decay_rate)
            order = np.random.default_rng(_sub_seed(cfg.seed, epoch)).permutation(len(samples))
            views = prefetch(lambda i: (i, _training_view(samples[i], cfg, epoch, i)), list(order))
            stage_sum = np.zeros(n_stage)
            dice_sum = ce_sum = 0.0
            pending = 0
            for count, (_, view) in enumerate(views, 1):
                report = total_deep_supervision_loss(forward(view.image, params, cfg.network), view.label,
                                                     cfg.dice_conventional)
                if not np.isfinite(report.total.data):
                    raise NumericError(f"non-finite loss at epoch {epoch}")
                T.backward(report.total)
                stages, _ = report.values()
                stage_sum += stages
                dice_sum += sum(d.item() for d in report.dice_terms)
                ce_sum += sum(c.item() for c in report.ce_terms)
                pending += 1
                if pending == cfg.batch_size or count == len(samples):
                    opt.step(scale=1.0 / pending)
                    opt.zero_grad()
                    pending = 0
            n = len(samples)
            row = {"epoch": epoch, "lr": opt.lr, "loss": float(stage_sum.sum() / n),
                   "stage_losses": (stage_sum / n).tolist(), "dice_term": dice_sum / n, "ce_term": ce_sum / n,
                   "seconds": time.perf_counter() - t0}
            history.append(row)
            writer.writerow([epoch, repr(opt.lr), repr(row["loss"])] + [repr(v) for v in row["stage_losses"]]
                            + [repr(row["dice_term"]), repr(row["ce_term"]), f"{row['seconds']:.3f}"])
            fh.flush()
            save_checkpoint(ckpt, _checkpoint_tensors(params, opt, epoch), cfg.digest())
            if log:
                log(f"epoch={epoch} lr={opt.lr:.3g} loss={row['loss']:.6f} seconds={row['seconds']:.1f}")
    if epochs <= done:
        save_checkpoint(ckpt, _checkpoint_tensors(params, opt, done), cfg.digest())
    for p in params.values():
        p.grad = None
    return TrainResult(params, history, ckpt)


# -- inference ------------------------------------------------------------------

def check_volume_shape(cfg: RunConfig, shape):
    """Raise DimensionError before any compute if the network cannot take ``shape``."""
    level_shapes(cfg.network, shape)


def model_predictor(params, cfg: RunConfig):
    def run(sample):
        stages = predict(sample.image, params, cfg.network)
        return stages.final_binary, uncertainty_map(stages).values, stages.final_prob.data[0]
    return run


def predict_files(params, cfg: RunConfig, sample, out_dir):
    """Write ``<id>.mask.ltv``, ``<id>.prob.ltv`` and ``<id>.uncertainty.ltv``; returns their paths."""
    check_volume_shape(cfg, sample.image.shape)
    binary, unc, prob = model_predictor(params, cfg)(sample)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for kind, arr in (("mask", binary.astype(np.uint8)), ("prob", prob.astype(np.float32)),
                      ("uncertainty", unc.astype(np.float32))):
        paths[kind] = out / f"{sample.id}.{kind}.ltv"
        write_raw(paths[kind], arr, sample.spacing_mm)
    return paths


@dataclass
class EvalReport:
    cases: list
    summary: dict
    regions_pooled: dict
    regions_averaged: dict

    def to_dict(self):
        return {"cases": self.cases, "summary": self.summary,
                "regions_pooled": self.regions_pooled, "regions_averaged": self.regions_averaged}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_text(self):
        lines = []
        for row in self.cases:
            lines.append(" ".join(f"{k}={_fmt(row[k])}" for k in ("id", "dice", "precision", "recall", "msd_mm",
                                                                   "u_wrong", "u_correct")))
        for k, v in self.summary.items():
            lines.append(f"{k}_mean={_fmt(v['mean'])} {k}_std={_fmt(v['std'])} n={v['n']}")
        for label, regions in (("pooled", self.regions_pooled), ("averaged", self.regions_averaged)):
            for r, s in regions.items():
                lines.append(f"region={r} mode={label} " + ("absent" if s is None else
                             f"mean={_fmt(s['mean'])} std={_fmt(s['std'])} count={s['count']}"))
        return "\n".join(lines) + "\n"


def _fmt(v):
    if v is None:
        return "nan"
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def summarize(rows, keys=("dice", "precision", "recall", "msd_mm")):
    """Mean and population std per metric over cases (cases with an undefined value are skipped)."""
    out = {}
    for k in keys:
        vals = [r[k] for r in rows if r[k] is not None]
        out[k] = {"mean": float(np.mean(vals)) if vals else None,
                  "std": float(np.std(vals)) if vals else None, "n": len(vals)}
    return out


def evaluate(samples, predictor, workers=1):
    """Metrics and region uncertainty for every sample; rows are ordered by case id.

    ``predictor(sample)`` returns ``(binary_mask, uncertainty_or_None, prob_or_None)``.
    """
    for s in samples:
        if s.label is None:
            raise ContractError(f"case {s.id} has no label")

    def one(sample):
        binary, unc, _ = predictor(sample)
        rep = evaluate_case(binary, sample.label, sample.spacing_mm)
        row = {"id": sample.id, **{k: getattr(rep, k) for k in ("dice", "precision", "recall", "msd_mm")}}
        row["u_wrong"] = row["u_correct"] = None
        stats = None
        if unc is not None:
            stats = region_uncertainty_stats(unc, binary, sample.label)
            row["u_wrong"], row["u_correct"] = stats.mispredicted_vs_correct(unc, binary, sample.label)
            row["regions"] = stats.to_dict()
        return row, stats, (unc, binary, sample.label)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, samples))
    else:
        results = [one(s) for s in samples]
    results.sort(key=lambda r: r[0]["id"])
    rows = [r[0] for r in results]
    per_case = [r[1] for r in results if r[1] is not None]
    pooled = averaged = {}
    if per_case:
        pooled = pooled_region_stats([r[2] for r in results if r[1] is not None]).to_dict()
        averaged = averaged_region_stats(per_case).to_dict()
    return EvalReport(rows, summarize(rows), pooled, averaged)
