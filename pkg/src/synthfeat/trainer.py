"""Alternating generator/discriminator training loop.

Each iteration samples one synthetic and one real batch, updates the trunk
and task heads with the discriminator frozen, then updates the discriminator
with the trunk frozen. Real images never send gradients into the trunk
unless bi-fool is enabled. Loss-weight calibration equalizes per-task
gradient magnitudes at the last shared trunk layer.
"""

from __future__ import annotations

import json
import math
import sys
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from . import checkpoint, dataio, losses
from .arch import build_default_alexnet, TAP_NAMES
from .dataio import SampleSource, collate, grayscale_augment, targets_to_tensors
from .losses import LossWeights
from .network import MultiTaskModel

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

LOG_SCHEMA_VERSION = 1
TASK_NAMES = ("edge", "depth", "normal")


@dataclass
class TrainConfig:
    syn_data: str = ""
    real_data: str = ""
    out_dir: str = "runs/default"
    max_iterations: int = 1000
    batch_size_syn: int = 8
    batch_size_real: int = 8
    resolution: int = 64
    channel_divisor: int = 4
    optimizer: str = "adam"
    lr_bh: float = 2e-4
    lr_d: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adaptation: bool = True
    tap_layer: str = "conv5"
    bifool: bool = False
    grayscale: bool = True
    seed: int = 0
    checkpoint_every: int = 500
    loss_weights: LossWeights | None = None   # None -> calibrate
    calibration_batches: int = 4
    warmup_iterations: int = 100              # adversarial term off before this
    cache_in_memory: bool = True

    def validate(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.lr_bh <= 0 or self.lr_d <= 0:
            raise ValueError("learning rates must be positive")
        if self.tap_layer not in TAP_NAMES:
            raise ValueError(f"tap_layer must be one of {TAP_NAMES}")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.loss_weights is not None:
            self.loss_weights.validate()
        if self.bifool and not self.adaptation:
            raise ValueError("bifool requires adaptation")

    @staticmethod
    def from_toml(path: str | Path) -> "TrainConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(str(path))
        with open(path, "rb") as f:
            raw = tomllib.load(f)
        return TrainConfig.from_dict(raw)

    @staticmethod
    def from_dict(raw: dict) -> "TrainConfig":
        raw = dict(raw)
        lw = raw.pop("loss_weights", None)
        known = {f.name for f in _config_fields()}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = TrainConfig(**raw)
        if lw is not None:
            cfg.loss_weights = LossWeights(**lw)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.loss_weights is not None:
            d["loss_weights"] = self.loss_weights.as_dict()
        return d


def _config_fields():
    import dataclasses
    return dataclasses.fields(TrainConfig)


class _Dataset:
    """Optionally memory-cached view of a SampleSource."""

    def __init__(self, source: SampleSource, cache: bool):
        self.source = source
        self.domain = source.domain
        self._cache = [None] * len(source) if cache else None

    def __len__(self):
        return len(self.source)

    def load(self, i: int):
        if self._cache is not None:
            if self._cache[i] is None:
                self._cache[i] = self.source.load(i)
            return self._cache[i]
        return self.source.load(i)


def _batch_indices(n: int, batch: int, seed: int, tag: int, iteration: int):
    rng = np.random.default_rng((seed, tag, iteration))
    return rng.choice(n, size=min(batch, n), replace=False)


def _make_batch(ds: _Dataset, idx, grayscale: bool, aug_rng) -> dataio.Batch:
    rgbs, targets = [], []
    for i in idx:
        rgb, tgt = ds.load(int(i))
        if grayscale:
            rgb = grayscale_augment(rgb, aug_rng)
        rgbs.append(rgb)
        targets.append(tgt)
    return collate(rgbs, None if ds.domain == "real" else targets, ds.domain)


def calibrate_lambdas(model: MultiTaskModel, batches: list[dataio.Batch],
                      base_weights: LossWeights | None = None) -> LossWeights:
    """Scale per-task weights so task gradients match at the last shared layer.

    Measures the mean gradient norm of each task loss w.r.t. the final
    bottleneck layer's weight over the calibration batches and returns
    lambda_t = median(g) / g_t (optionally times explicit base weights).
    """
    if not batches:
        raise ValueError("need at least one calibration batch")
    final_name = model.config.trunk()[-1].name
    ref_param = model.trunk_blocks[final_name].op.weight
    norms = {t: 0.0 for t in TASK_NAMES}
    model.train()
    for batch in batches:
        contour, beta, log_depth, normal, valid = targets_to_tensors(batch.targets)
        feats = model.forward_base(batch.inputs)
        preds = model.forward_heads(feats)
        per_task = {
            "edge": losses.edge_loss(preds["contour"], contour, beta, valid),
            "depth": losses.depth_loss(preds["depth"], log_depth, valid),
            "normal": losses.normal_loss(preds["normal"], normal, valid),
        }
        for t, loss in per_task.items():
            (grad,) = torch.autograd.grad(loss, ref_param, retain_graph=True,
                                          allow_unused=False)
            norms[t] += grad.norm().item() / len(batches)
    if any(v == 0.0 for v in norms.values()):
        dead = [t for t, v in norms.items() if v == 0.0]
        raise ValueError(f"zero task gradient norm for {dead}; dead head(s)")
    med = float(np.median(list(norms.values())))
    base = base_weights or LossWeights(1.0, 1.0, 1.0)
    return LossWeights(edge=base.edge * med / norms["edge"],
                       depth=base.depth * med / norms["depth"],
                       normal=base.normal * med / norms["normal"])


def _head_grad_norms(model: MultiTaskModel) -> dict[str, float]:
    out = {}
    for name, blocks in model.head_blocks.items():
        sq = 0.0
        for p in blocks.parameters():
            if p.grad is not None:
                sq += float(p.grad.pow(2).sum())
        out[name] = math.sqrt(sq)
    return out


def stage1_step(model: MultiTaskModel, opt_bh: torch.optim.Optimizer,
                syn_batch: dataio.Batch, real_batch: dataio.Batch | None,
                config: TrainConfig, weights: LossWeights,
                adv_weight: float = 1.0) -> dict:
    """Update trunk + heads with the discriminator frozen.

    The discriminator runs in eval mode so its batchnorm buffers stay
    bit-identical while frozen. Without bi-fool, the real batch is never
    touched here.
    """
    if syn_batch.domain != "synthetic" or syn_batch.targets is None:
        raise ValueError("first batch must be synthetic with targets")
    use_adv = config.adaptation and adv_weight > 0.0
    contour, beta, log_depth, normal, valid = targets_to_tensors(syn_batch.targets)
    model.train()
    for p in model.discriminator_parameters():
        p.requires_grad_(False)
    model.disc_blocks.eval()
    feats = model.forward_base(syn_batch.inputs)
    preds = model.forward_heads(feats)
    tap = model.config.resolve_tap()
    d_syn = model.forward_discriminator(feats[tap]) if use_adv else None
    d_real = None
    if use_adv and config.bifool:
        real_feats = model.forward_base(real_batch.inputs)
        d_real = model.forward_discriminator(real_feats[tap])
    total, terms = losses.generator_task_loss(
        d_syn, preds, contour, beta, log_depth, normal, valid, weights,
        bifool=config.bifool and use_adv, d_real=d_real, adv_weight=adv_weight)
    opt_bh.zero_grad(set_to_none=True)
    total.backward()
    record = {"head_grad_norms": _head_grad_norms(model)}
    opt_bh.step()
    for p in model.discriminator_parameters():
        p.requires_grad_(True)
    model.disc_blocks.train()
    record["loss_bh"] = float(total.detach())
    record["terms"] = {k: float(v.detach()) for k, v in terms.items()}
    return record


def stage2_step(model: MultiTaskModel, opt_d: torch.optim.Optimizer,
                syn_batch: dataio.Batch, real_batch: dataio.Batch) -> dict:
    """Update the discriminator with the trunk frozen.

    Features are detached and the trunk runs in eval mode, so trunk
    parameters and batchnorm buffers stay bit-identical, and real images
    never touch trunk statistics.
    """
    tap = model.config.resolve_tap()
    model.disc_blocks.train()
    model.trunk_blocks.eval()
    with torch.no_grad():
        z_syn = model.forward_base(syn_batch.inputs)[tap]
        z_real = model.forward_base(real_batch.inputs)[tap]
    d_syn2 = model.forward_discriminator(z_syn)
    d_real2 = model.forward_discriminator(z_real)
    l_d = losses.discriminator_loss(d_syn2, d_real2)
    opt_d.zero_grad(set_to_none=True)
    l_d.backward()
    opt_d.step()
    model.trunk_blocks.train()
    with torch.no_grad():
        correct = float((d_syn2 > 0).float().mean() + (d_real2 < 0).float().mean())
    return {"loss_d": float(l_d.detach()), "disc_accuracy": correct / 2.0}


def train_step(model: MultiTaskModel, opt_bh: torch.optim.Optimizer,
               opt_d: torch.optim.Optimizer, syn_batch: dataio.Batch,
               real_batch: dataio.Batch | None, config: TrainConfig,
               weights: LossWeights, adv_weight: float = 1.0) -> dict:
    """One alternation of the training algorithm; returns the log record."""
    t0 = time.perf_counter()
    if config.adaptation and real_batch is None:
        raise ValueError("adaptation requires a real batch")
    record = stage1_step(model, opt_bh, syn_batch, real_batch, config,
                         weights, adv_weight)
    if config.adaptation:
        record.update(stage2_step(model, opt_d, syn_batch, real_batch))
    logged = record["terms"]
    record["task_total"] = (weights.edge * logged["edge"]
                            + weights.depth * logged["depth"]
                            + weights.normal * logged["normal"])
    record["wall_time"] = time.perf_counter() - t0
    if not math.isfinite(record["loss_bh"]):
        raise RuntimeError("non-finite generator loss")
    return record


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    weights: LossWeights
    records: list[dict] = field(default_factory=list)


def _build_optimizers(model: MultiTaskModel, config: TrainConfig):
    opt_bh = torch.optim.Adam(model.base_parameters() + model.head_parameters(),
                              lr=config.lr_bh, betas=(config.beta1, config.beta2))
    opt_d = torch.optim.Adam(model.discriminator_parameters(), lr=config.lr_d,
                             betas=(config.beta1, config.beta2))
    return opt_bh, opt_d


def _save(path, model, config, weights, iteration, opt_bh, opt_d):
    skel_bh, t_bh = checkpoint.serialize_optimizer(opt_bh, "opt_bh")
    skel_d, t_d = checkpoint.serialize_optimizer(opt_d, "opt_d")
    state = {
        "iteration": iteration,
        "config": config.to_dict(),
        "weights": weights.as_dict(),
        "opt_bh": skel_bh,
        "opt_d": skel_d,
    }
    checkpoint.save_checkpoint(path, model, state, {**t_bh, **t_d})


def train(config: TrainConfig, resume_from: str | Path | None = None) -> TrainResult:
    """Run the full alternating loop; checkpoints on cadence, logs JSONL.

    Batch composition, augmentation, and initialization are pure functions of
    (config.seed, iteration), so an interrupted run resumed from a checkpoint
    reproduces the uninterrupted run bit for bit.
    """
    config.validate()
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)

    syn = _Dataset(SampleSource(config.syn_data, "synthetic"), config.cache_in_memory)
    real = None
    if config.adaptation or config.real_data:
        real = _Dataset(SampleSource(config.real_data, "real"), config.cache_in_memory)

    if resume_from is not None:
        model, state, extra = checkpoint.load_checkpoint(resume_from)
        start_iter = state["iteration"]
        weights = LossWeights(**state["weights"])
        opt_bh, opt_d = _build_optimizers(model, config)
        checkpoint.deserialize_optimizer(opt_bh, state["opt_bh"], extra)
        checkpoint.deserialize_optimizer(opt_d, state["opt_d"], extra)
    else:
        arch_cfg = build_default_alexnet(config.resolution, config.tap_layer,
                                         config.channel_divisor)
        model = MultiTaskModel(arch_cfg, init_seed=config.seed)
        opt_bh, opt_d = _build_optimizers(model, config)
        start_iter = 0
        if config.loss_weights is not None:
            weights = config.loss_weights
        else:
            calib = []
            rng = np.random.default_rng((config.seed, 99))
            for k in range(config.calibration_batches):
                idx = _batch_indices(len(syn), config.batch_size_syn,
                                     config.seed, 100 + k, 0)
                calib.append(_make_batch(syn, idx, config.grayscale, rng))
            weights = calibrate_lambdas(model, calib)
        weights.validate()

    log_path = out_dir / "train_log.jsonl"
    mode = "a" if resume_from is not None else "w"
    records = []
    last_ckpt = None
    with open(log_path, mode) as log_f:
        for t in range(start_iter + 1, config.max_iterations + 1):
            syn_idx = _batch_indices(len(syn), config.batch_size_syn,
                                     config.seed, 1, t)
            aug_rng = np.random.default_rng((config.seed, 2, t))
            syn_batch = _make_batch(syn, syn_idx, config.grayscale, aug_rng)
            real_batch = None
            if real is not None:
                real_idx = _batch_indices(len(real), config.batch_size_real,
                                          config.seed, 3, t)
                real_batch = _make_batch(real, real_idx, config.grayscale, aug_rng)
            adv_weight = 0.0 if t <= config.warmup_iterations else 1.0
            try:
                record = train_step(model, opt_bh, opt_d, syn_batch, real_batch,
                                    config, weights, adv_weight)
            except (RuntimeError, ValueError) as e:
                raise RuntimeError(
                    f"iteration {t}: {e}; last good checkpoint: {last_ckpt}") from e
            record.update(schema_version=LOG_SCHEMA_VERSION, iteration=t)
            records.append(record)
            log_f.write(json.dumps(record) + "\n")
            if config.checkpoint_every and t % config.checkpoint_every == 0:
                last_ckpt = out_dir / f"ckpt_{t:07d}.synthfeat"
                _save(last_ckpt, model, config, weights, t, opt_bh, opt_d)

    final_path = out_dir / "ckpt_final.synthfeat"
    _save(final_path, model, config, weights, config.max_iterations, opt_bh, opt_d)
    return TrainResult(final_path, log_path, weights, records)


def write_csv_summary(records: list[dict], path: Path):
    import csv
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "loss_bh", "loss_d", "task_total",
                    "disc_accuracy", "wall_time"])
        for r in records:
            w.writerow([r["iteration"], r["loss_bh"], r.get("loss_d", ""),
                        r["task_total"], r.get("disc_accuracy", ""),
                        r["wall_time"]])
