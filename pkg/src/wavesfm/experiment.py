"""Experiment orchestration: config schema, stage execution, artifacts.

A run is described by one YAML file.  Stages: ``simulate`` writes a sample
archive, ``pretrain`` trains the masked autoencoder, ``finetune`` adapts a
pretrained backbone to a task, ``evaluate`` re-scores a saved checkpoint.
Every run directory gets a metrics.jsonl stream (one record per epoch), a
report.json, checkpoints, and CSV tables where the task produces curves.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import model as M
from . import training as TR
from .archive import load_archive, save_archive, write_tensor
from .channel import (OfdmConfig, estimate_covariances, interpolate_pilots,
                      ls_estimate, lmmse_estimate, unpack_chanest_input,
                      unpack_chanest_target)
from .checkpoint import load_checkpoint, save_checkpoint
from .generators import (ArenaSpec, make_activity_set, make_chanest_set,
                         make_positioning_set, make_spectrogram_set,
                         split_chanest_sample)
from .masking import sample_mask
from .metrics import (MetricReport, classification_metrics, convergence_epoch,
                      grid_mse, mse_vs_snr, positioning_metrics)
from .model import LoraConfig, ModelConfig, make_task_head
from .optim import AdamState, DivergenceError, OptimConfig
from .params import ParameterStore
from .pipeline import (DatasetStats, fit_stats, make_pipeline, minmax_invert,
                       minmax_normalize, patchify, unpatchify, PatchSeq)
from .rng import RngState
from .tensor import no_grad
from .losses import class_weights, mwm_loss
from .training import FreezePolicy, finetune_epoch, predict_chanest, \
    predict_logits, pretrain_epoch

STAGES = ("pretrain", "finetune", "evaluate", "simulate")
TASKS = ("pretrain", "sensing", "rfclass", "positioning", "chanest")


class ConfigError(Exception):
    """Invalid experiment configuration; the CLI maps this to exit code 2."""


def _from_mapping(cls, mapping, where: str):
    """Build a dataclass from a dict, rejecting unknown keys and coercing
    lists to tuples where the default is a tuple."""
    mapping = dict(mapping or {})
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(mapping) - set(names)
    if unknown:
        raise ConfigError(f"unknown keys under '{where}': {sorted(unknown)}")
    kwargs = {}
    for key, val in mapping.items():
        if isinstance(val, list):
            val = tuple(val)
        kwargs[key] = val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad '{where}' section: {exc}") from exc


def _plain(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


@dataclass(frozen=True)
class DataSpec:
    """Where samples come from: a generator recipe or a saved archive."""
    source: str = "synthetic"
    archive: Optional[str] = None          # train archive (source=archive)
    val_archive: Optional[str] = None
    n_train: int = 128
    n_val: int = 32
    classes: tuple = (0, 1, 2, 3)
    n_frames: int = 64
    snr_db: Optional[float] = 20.0         # None draws from the ofdm snr range
    ofdm: dict = field(default_factory=dict)
    cov_draws: int = 2000                  # simulator draws behind the covariance estimate

    def __post_init__(self):
        if self.source not in ("synthetic", "archive"):
            raise ValueError(f"unknown data source: {self.source}")
        if self.source == "archive" and not self.archive:
            raise ValueError("archive source needs an archive path")

    def ofdm_config(self) -> OfdmConfig:
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in self.ofdm.items()}
        return OfdmConfig(**kw)


@dataclass(frozen=True)
class TaskSpec:
    name: str = "pretrain"
    theta: float = 0.1                     # label smoothing (sensing)
    weight_floor: float = 0.01             # SNR-weight clamp (chanest)
    n_classes: Optional[int] = None        # override for class subsets

    def __post_init__(self):
        if self.name not in TASKS:
            raise ValueError(f"unknown task: {self.name}")


@dataclass(frozen=True)
class FreezeSpec:
    mode: str = "head_only"
    n: int = 0

    def policy(self, lora: Optional[LoraConfig]) -> FreezePolicy:
        return FreezePolicy(mode=self.mode, n=self.n,
                            lora=lora if self.mode == "lora" else None)


@dataclass
class ExperimentConfig:
    stage: str
    seed: int = 0
    out_dir: str = "runs/exp"
    runs: int = 3                          # seeds averaged when aggregating
    checkpoint_every: int = 10
    dump_preds: bool = False
    init_from: Optional[str] = None        # backbone checkpoint for finetune
    checkpoint: Optional[str] = None       # checkpoint scored by evaluate
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataSpec = field(default_factory=DataSpec)
    task: TaskSpec = field(default_factory=TaskSpec)
    freeze: FreezeSpec = field(default_factory=FreezeSpec)
    lora: Optional[LoraConfig] = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage: {self.stage}")
        if self.runs < 1:
            raise ConfigError("runs must be positive")
        if self.stage == "finetune" and not self.init_from:
            raise ConfigError("finetune needs init_from")
        if self.stage == "evaluate" and not self.checkpoint:
            raise ConfigError("evaluate needs a checkpoint path")
        for label, path in (("init_from", self.init_from),
                            ("checkpoint", self.checkpoint),
                            ("data.archive", self.data.archive),
                            ("data.val_archive", self.data.val_archive)):
            if path is not None and not Path(path).exists():
                raise ConfigError(f"{label} path does not exist: {path}")
        if self.freeze.mode == "lora" and self.lora is None:
            raise ConfigError("lora freeze mode needs a lora section")

    def to_dict(self) -> dict:
        return _plain(self)

    @classmethod
    def from_dict(cls, mapping: dict) -> "ExperimentConfig":
        mapping = dict(mapping or {})
        if "stage" not in mapping:
            raise ConfigError("config needs a stage")
        sections = {
            "model": (ModelConfig, "model"),
            "optim": (OptimConfig, "optim"),
            "data": (DataSpec, "data"),
            "task": (TaskSpec, "task"),
            "freeze": (FreezeSpec, "freeze"),
        }
        kwargs = {}
        for key, val in mapping.items():
            if key in sections:
                sub_cls, where = sections[key]
                kwargs[key] = _from_mapping(sub_cls, val, where)
            elif key == "lora":
                kwargs[key] = None if val is None else _from_mapping(LoraConfig, val, "lora")
            else:
                kwargs[key] = tuple(val) if isinstance(val, list) else val
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(kwargs) - known
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config is not valid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping")
        return cls.from_dict(raw)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)


# -- dataset plumbing ------------------------------------------------------------


def build_splits(cfg: ExperimentConfig, seed: int):
    """(train samples, val samples) from the configured source."""
    d = cfg.data
    if d.source == "archive":
        train, _ = load_archive(d.archive)
        if d.val_archive:
            val, _ = load_archive(d.val_archive)
        else:
            n_val = min(d.n_val, len(train) // 4)
            train, val = train[:len(train) - n_val], train[len(train) - n_val:]
        return train, val
    rng = RngState(seed).split("data")
    task = cfg.task.name
    if task in ("pretrain", "rfclass"):
        train = make_spectrogram_set(d.n_train, d.classes, rng.split("train"),
                                     snr_db=d.snr_db, n_frames=d.n_frames)
        val = make_spectrogram_set(d.n_val, d.classes, rng.split("val"),
                                   snr_db=d.snr_db, n_frames=d.n_frames)
    elif task == "sensing":
        train = make_activity_set(d.n_train, rng.split("train"), n_frames=d.n_frames,
                                  classes=d.classes)
        val = make_activity_set(d.n_val, rng.split("val"), n_frames=d.n_frames,
                                classes=d.classes)
    elif task == "positioning":
        train = make_positioning_set(d.n_train, rng.split("train"))
        val = make_positioning_set(d.n_val, rng.split("val"))
    elif task == "chanest":
        ofdm = d.ofdm_config()
        train = make_chanest_set(d.n_train, ofdm, rng.split("train"), snr_db=d.snr_db)
        val = make_chanest_set(d.n_val, ofdm, rng.split("val"), snr_db=d.snr_db)
    else:
        raise ConfigError(f"no generator for task: {task}")
    return train, val


def _label_index(samples, classes) -> list:
    lut = {c: i for i, c in enumerate(classes)}
    out = []
    for s in samples:
        if s.label not in lut:
            raise ConfigError(f"sample label {s.label} not in configured classes")
        out.append(lut[s.label])
    return out


def save_stats(stats: DatasetStats, path) -> None:
    d = {"vmin": stats.vmin, "vmax": stats.vmax,
         "mean": None if stats.mean is None else stats.mean.tolist(),
         "std": None if stats.std is None else stats.std.tolist()}
    with open(path, "w") as fh:
        json.dump(d, fh)


def load_stats(path) -> DatasetStats:
    with open(path) as fh:
        d = json.load(fh)
    return DatasetStats(vmin=d["vmin"], vmax=d["vmax"], mean=d["mean"], std=d["std"])


class _Jsonl:
    def __init__(self, path):
        self._fh = open(path, "w")

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


def _write_csv(path, rows: list) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


# -- task preparation ------------------------------------------------------------


def _fit_target_range(targets) -> DatasetStats:
    vmin = min(float(t.min()) for t in targets)
    vmax = max(float(t.max()) for t in targets)
    return DatasetStats(vmin=vmin, vmax=vmax)


def _prep_chanest(samples, pipe, tgt_stats: Optional[DatasetStats], patch: int):
    """[(input patches, (normalized target patches, snr))], plus raw extras
    for baseline estimators and raw-domain scoring."""
    inputs, raw_targets, extras = [], [], []
    for s in samples:
        inp, tgt = split_chanest_sample(s)
        inputs.append(patchify(pipe(inp).data, patch).patches)
        raw_targets.append(tgt)
        extras.append({"sample": s, "snr_db": s.snr_db})
    if tgt_stats is None:
        tgt_stats = _fit_target_range(raw_targets)
    data = []
    for inp_p, tgt, s in zip(inputs, raw_targets, samples):
        norm = minmax_normalize(np.asarray(tgt, dtype=np.float64), tgt_stats,
                                (-1.0, 1.0))
        tgt_p = patchify(norm.astype(np.float32), patch).patches
        data.append((inp_p, (tgt_p, float(s.snr_db))))
    return data, tgt_stats, extras


def prepare_task_data(samples, cfg: ExperimentConfig, stats: DatasetStats,
                      tgt_stats: Optional[DatasetStats] = None):
    """Preprocess one split into (patches, target) pairs for the task."""
    task = cfg.task.name
    patch = cfg.model.patch_size
    if task == "chanest":
        pipe = make_pipeline("finetune_ofdm", stats, cfg.model.image_size)
        return _prep_chanest(samples, pipe, tgt_stats, patch)
    pipe = make_pipeline("finetune_image", stats, cfg.model.image_size)
    if task in ("sensing", "rfclass"):
        labels = _label_index(samples, cfg.data.classes)
        data = [(patchify(pipe(s).data, patch).patches, lab)
                for s, lab in zip(samples, labels)]
        return data, None, {"labels": labels}
    if task == "positioning":
        data = [(patchify(pipe(s).data, patch).patches, np.asarray(s.position))
                for s in samples]
        return data, None, {"positions": [s.position for s in samples]}
    raise ConfigError(f"task {task} has no supervised preparation")


def _n_classes(cfg: ExperimentConfig) -> int:
    if cfg.task.n_classes is not None:
        return cfg.task.n_classes
    if cfg.task.name in M.TASK_HEAD_DIMS and cfg.task.name != "positioning":
        return len(cfg.data.classes) if cfg.data.classes else M.TASK_HEAD_DIMS[cfg.task.name]
    return M.TASK_HEAD_DIMS.get(cfg.task.name, 0)


# -- evaluation ------------------------------------------------------------------


def _guarded_val(fn):
    """Validation forward passes hit the same NaN-softmax guard as training
    when a huge-but-finite update has wrecked the weights; classify that as
    divergence so the stage can fall back to its last good state."""
    try:
        return fn()
    except ValueError as exc:
        if "NaN" in str(exc):
            raise DivergenceError(
                f"non-finite activations during validation: {exc}") from exc
        raise


def eval_mwm(data, model: M.Model, ratio: float, rng: RngState) -> float:
    """Masked-reconstruction loss over a split without updates."""
    total = 0.0
    with no_grad():
        for i, patches in enumerate(data):
            plan = sample_mask(model.cfg.n_patches, ratio, rng.split("eval-mask", i))
            rec = model.forward_mwm(patches, plan)
            targets = np.asarray(patches)[plan.masked]
            total += mwm_loss(targets, rec).item()
    return total / max(1, len(data))


def _invert_chanest(pred_patches: np.ndarray, cfg: ModelConfig,
                    tgt_stats: DatasetStats, n_antennas: int) -> np.ndarray:
    """Patch-space prediction back to a complex (antennas, symbols, F) grid."""
    seq = PatchSeq(patches=np.asarray(pred_patches), grid=(cfg.grid, cfg.grid),
                   patch_size=cfg.patch_size, channels=2)
    img = unpatchify(seq).astype(np.float64)
    raw = minmax_invert(img, tgt_stats, (-1.0, 1.0))
    return unpack_chanest_target(raw, n_antennas)


def evaluate_task(model: M.Model, cfg: ExperimentConfig, val_data, extras,
                  tgt_stats: Optional[DatasetStats] = None,
                  baselines: Optional[dict] = None):
    """(metric value for convergence tracking, final metrics dict, raw preds)."""
    task = cfg.task.name
    if task in ("sensing", "rfclass"):
        logits = predict_logits(val_data, model)
        preds = np.argmax(logits, axis=1)
        rep = classification_metrics(preds, extras["labels"], _n_classes(cfg))
        return rep["mean_per_class_accuracy"], rep, logits
    if task == "positioning":
        preds = predict_logits(val_data, model)
        rep = positioning_metrics(preds, np.stack(extras["positions"]))
        return -rep["mean_error_m"], rep, preds
    if task == "chanest":
        n_ant = cfg.data.ofdm_config().n_rx_antennas
        patch_preds = predict_chanest(val_data, model)
        grids = [_invert_chanest(p, cfg.model, tgt_stats, n_ant) for p in patch_preds]
        truths = [unpack_chanest_target(split_chanest_sample(e["sample"])[1], n_ant)
                  for e in extras]
        snrs = [e["snr_db"] for e in extras]
        lo = min(snrs) - 2.5
        hi = max(snrs) + 2.5
        n_bins = max(1, int(round((hi - lo) / 5.0)))
        table = mse_vs_snr(grids, truths, snrs, np.linspace(lo, hi, n_bins + 1),
                           baselines=baselines)
        mean_mse = float(np.mean([grid_mse(g, t) for g, t in zip(grids, truths)]))
        rep = {"mse": mean_mse, "mse_vs_snr": table}
        return -mean_mse, rep, np.stack(patch_preds)
    raise ConfigError(f"task {task} is not evaluable")


def chanest_baselines(extras, cfg: ExperimentConfig, seed: int):
    """LS and LMMSE estimates for every val sample, aligned with targets."""
    ofdm = cfg.data.ofdm_config()
    rf, rt = estimate_covariances(ofdm, RngState(seed).split("cov"),
                                  n_draws=cfg.data.cov_draws)
    ls_col, lmmse_col = [], []
    for e in extras:
        tx, rx = unpack_chanest_input(split_chanest_sample(e["sample"])[0],
                                      ofdm.n_rx_antennas)
        pilots, est = ls_estimate(tx, rx)
        ls_col.append(interpolate_pilots(est, pilots, ofdm.n_symbols))
        snr = e["snr_db"]
        sigma2 = 0.0 if snr is None or np.isinf(snr) else 10.0 ** (-snr / 10.0)
        lmmse_col.append(lmmse_estimate(est, pilots, rf, rt, sigma2))
    return {"ls": ls_col, "lmmse": lmmse_col}


# -- stages ----------------------------------------------------------------------


def _stage_simulate(cfg: ExperimentConfig, out: Path) -> MetricReport:
    train, val = build_splits(cfg, cfg.seed)
    meta = {"task": cfg.task.name, "seed": cfg.seed, "data": _plain(cfg.data)}
    save_archive(out / "train", train, meta=meta)
    save_archive(out / "val", val, meta=meta)
    rep = MetricReport(task=cfg.task.name,
                       final={"n_train": len(train), "n_val": len(val),
                              "train_archive": str(out / "train"),
                              "val_archive": str(out / "val")})
    rep.save(out / "report.json")
    return rep


def _stage_pretrain(cfg: ExperimentConfig, out: Path, seed: int) -> MetricReport:
    train_s, val_s = build_splits(cfg, seed)
    if cfg.task.name == "chanest":
        # combined samples carry the target channels; the backbone only
        # ever sees the observation half
        train_s = [split_chanest_sample(s)[0] for s in train_s]
        val_s = [split_chanest_sample(s)[0] for s in val_s]
    stats = fit_stats(train_s, "pretrain", cfg.model.image_size)
    save_stats(stats, out / "stats.json")
    pipe = make_pipeline("pretrain", stats, cfg.model.image_size)
    patch = cfg.model.patch_size
    train = [patchify(pipe(s).data, patch).patches for s in train_s]
    val = [patchify(pipe(s).data, patch).patches for s in val_s]

    rng = RngState(seed)
    model = M.Model(cfg.model, rng=rng.split("init"), with_decoder=True)
    moments = AdamState()
    stream = _Jsonl(out / "metrics.jsonl")
    report = MetricReport(task="pretrain")
    init_loss = eval_mwm(val, model, cfg.optim.mask_ratio, rng.split("eval", 0))
    report.final["initial_val_loss"] = init_loss
    good = (model.params.state_dict(), moments.state_dict())
    try:
        for epoch in range(cfg.optim.epochs):
            rec = pretrain_epoch(train, model, cfg.optim, rng.split("train"),
                                 moments, epoch=epoch)
            rec.pop("step_losses", None)
            val_loss = _guarded_val(lambda: eval_mwm(
                val, model, cfg.optim.mask_ratio, rng.split("eval", epoch + 1)))
            rec["val_loss"] = val_loss
            stream.write(rec)
            report.records.append(rec)
            good = (model.params.state_dict(), moments.state_dict())
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"ckpt_epoch{epoch + 1}", model.params,
                                cfg.model, step=epoch + 1, moments=moments)
    except DivergenceError:
        model.params.load_state_dict(good[0])
        moments.load_state_dict(good[1])
        save_checkpoint(out / "ckpt_last_good", model.params, cfg.model,
                        step=len(report.records), moments=moments)
        report.status = "diverged"
        report.save(out / "report.json")
        stream.close()
        raise
    stream.close()
    save_checkpoint(out / "ckpt_final", model.params, cfg.model,
                    step=cfg.optim.epochs, moments=moments)
    losses = [r["val_loss"] for r in report.records]
    report.final["final_val_loss"] = losses[-1] if losses else init_loss
    report.convergence = convergence_epoch(losses, mode="min")
    report.save(out / "report.json")
    return report


def _load_backbone(path, expect: ModelConfig):
    params, loaded_cfg, _step, _m = load_checkpoint(path, expect_cfg=expect)
    return params.subset(lambda n: not n.startswith("decoder.")), loaded_cfg


def _build_finetune_model(cfg: ExperimentConfig, params: ParameterStore,
                          seed: int) -> M.Model:
    rng = RngState(seed)
    lora = cfg.lora if cfg.freeze.mode == "lora" else None
    if lora is not None:
        M.attach_lora(params, cfg.model, lora, rng.split("lora"))
    head = make_task_head(cfg.task.name, cfg.model, rng.split("head"),
                          n_classes=_n_classes(cfg) or None)
    for name, t in head.items():
        params.add(name, t)
    return M.Model(cfg.model, params=params, lora=lora, with_decoder=False)


def _stage_finetune(cfg: ExperimentConfig, out: Path, seed: int) -> MetricReport:
    train_s, val_s = build_splits(cfg, seed)
    kind = "finetune_ofdm" if cfg.task.name == "chanest" else "finetune_image"
    stats_src = train_s if cfg.task.name != "chanest" \
        else [split_chanest_sample(s)[0] for s in train_s]
    stats = fit_stats(stats_src, kind, cfg.model.image_size)
    save_stats(stats, out / "stats.json")
    train, tgt_stats, _ = prepare_task_data(train_s, cfg, stats)
    val, _, val_extras = prepare_task_data(val_s, cfg, stats, tgt_stats=tgt_stats)
    if tgt_stats is not None:
        save_stats(tgt_stats, out / "target_stats.json")

    params, _ = _load_backbone(cfg.init_from, cfg.model)
    model = _build_finetune_model(cfg, params, seed)
    policy = cfg.freeze.policy(cfg.lora)

    beta = None
    if cfg.task.name == "rfclass":
        beta = class_weights([t for _, t in train], _n_classes(cfg))
    loss_fn = TR.make_task_loss(cfg.task.name, theta=cfg.task.theta, beta=beta,
                                weight_floor=cfg.task.weight_floor)
    baselines = chanest_baselines(val_extras, cfg, seed) \
        if cfg.task.name == "chanest" else None

    rng = RngState(seed)
    moments = AdamState()
    stream = _Jsonl(out / "metrics.jsonl")
    report = MetricReport(task=cfg.task.name)
    metric_series = []
    final_metrics, preds = {}, None
    good = (model.params.state_dict(), moments.state_dict())
    try:
        for epoch in range(cfg.optim.epochs):
            rec = finetune_epoch(train, model, None, policy, loss_fn,
                                 cfg.optim, rng.split("train"), moments,
                                 epoch=epoch, task=cfg.task.name)
            rec.pop("step_losses", None)
            metric, final_metrics, preds = _guarded_val(lambda: evaluate_task(
                model, cfg, val, val_extras, tgt_stats=tgt_stats,
                baselines=baselines))
            rec["val_metric"] = metric
            stream.write(rec)
            report.records.append(rec)
            metric_series.append(metric)
            good = (model.params.state_dict(), moments.state_dict())
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"ckpt_epoch{epoch + 1}", model.params,
                                cfg.model, step=epoch + 1, moments=moments)
    except DivergenceError:
        model.params.load_state_dict(good[0])
        moments.load_state_dict(good[1])
        save_checkpoint(out / "ckpt_last_good", model.params, cfg.model,
                        step=len(report.records), moments=moments)
        report.status = "diverged"
        report.save(out / "report.json")
        stream.close()
        raise
    stream.close()
    save_checkpoint(out / "ckpt_final", model.params, cfg.model,
                    step=cfg.optim.epochs, moments=moments)
    report.final = final_metrics
    report.final["shared_fraction"] = TR.shared_fraction(
        model.params, policy, cfg.model.enc_blocks)
    report.convergence = convergence_epoch(metric_series, mode="max")
    if "confusion" in final_metrics:
        rows = [{"true_class": i, **{f"pred_{j}": v for j, v in enumerate(row)}}
                for i, row in enumerate(final_metrics["confusion"])]
        _write_csv(out / "confusion.csv", rows)
    if "mse_vs_snr" in final_metrics:
        _write_csv(out / "mse_vs_snr.csv", final_metrics["mse_vs_snr"]["rows"])
    if cfg.dump_preds and preds is not None:
        write_tensor(out / "predictions.wfm1", np.asarray(preds, dtype=np.float32))
        _dump_eval_targets(out, cfg, val_extras)
    report.save(out / "report.json")
    return report


def _dump_eval_targets(out: Path, cfg: ExperimentConfig, extras) -> None:
    if cfg.task.name in ("sensing", "rfclass"):
        write_tensor(out / "targets.wfm1",
                     np.asarray(extras["labels"], dtype=np.float32))
    elif cfg.task.name == "positioning":
        write_tensor(out / "targets.wfm1",
                     np.stack(extras["positions"]).astype(np.float32))
    elif cfg.task.name == "chanest":
        tgts = [split_chanest_sample(e["sample"])[1] for e in extras]
        write_tensor(out / "targets.wfm1", np.stack(tgts).astype(np.float32))


def _stage_evaluate(cfg: ExperimentConfig, out: Path) -> MetricReport:
    ckpt_dir = Path(cfg.checkpoint)
    run_dir = ckpt_dir.parent
    params, _, step, _ = load_checkpoint(ckpt_dir, expect_cfg=cfg.model)
    params = params.subset(lambda n: not n.startswith("decoder."))
    lora = cfg.lora if cfg.freeze.mode == "lora" else None
    model = M.Model(cfg.model, params=params, lora=lora, with_decoder=False)

    _, val_s = build_splits(cfg, cfg.seed)
    stats_path = run_dir / "stats.json"
    if not stats_path.exists():
        raise ConfigError(f"no stats.json beside checkpoint: {run_dir}")
    stats = load_stats(stats_path)
    tgt_path = run_dir / "target_stats.json"
    if cfg.task.name == "chanest" and not tgt_path.exists():
        raise ConfigError(f"no target_stats.json beside checkpoint: {run_dir}")
    tgt_stats = load_stats(tgt_path) if tgt_path.exists() else None
    val, tgt_stats, val_extras = prepare_task_data(val_s, cfg, stats,
                                                   tgt_stats=tgt_stats)
    baselines = chanest_baselines(val_extras, cfg, cfg.seed) \
        if cfg.task.name == "chanest" else None
    metric, final_metrics, preds = evaluate_task(
        model, cfg, val, val_extras, tgt_stats=tgt_stats, baselines=baselines)
    report = MetricReport(task=cfg.task.name, final=final_metrics)
    report.final["val_metric"] = metric
    report.final["checkpoint_step"] = step
    if cfg.dump_preds and preds is not None:
        write_tensor(out / "predictions.wfm1", np.asarray(preds, dtype=np.float32))
        _dump_eval_targets(out, cfg, val_extras)
    report.save(out / "report.json")
    return report


def _aggregate(reports: list, cfg: ExperimentConfig) -> dict:
    """Mean and spread of the headline metric across seeds."""
    key_by_task = {"sensing": "mean_per_class_accuracy",
                   "rfclass": "mean_per_class_accuracy",
                   "positioning": "mean_error_m",
                   "chanest": "mse",
                   "pretrain": "final_val_loss"}
    key = key_by_task.get(cfg.task.name if cfg.stage == "finetune" else "pretrain")
    vals = [r.final.get(key) for r in reports if r.final.get(key) is not None]
    if not vals:
        return {}
    return {"metric": key, "mean": float(np.mean(vals)),
            "std": float(np.std(vals)), "n_runs": len(vals),
            "convergence_epochs": [r.convergence for r in reports]}


def run_experiment(cfg: ExperimentConfig) -> MetricReport:
    """Execute the configured stage; returns the (last run's) report.

    Training stages repeat over ``cfg.runs`` seeds (seed, seed+1, ...) in
    per-run subdirectories and write an aggregate summary beside them.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.yaml")
    if cfg.stage == "simulate":
        return _stage_simulate(cfg, out)
    if cfg.stage == "evaluate":
        return _stage_evaluate(cfg, out)
    reports = []
    for r in range(cfg.runs):
        seed = cfg.seed + r
        run_dir = out if cfg.runs == 1 else out / f"run{r}"
        run_dir.mkdir(parents=True, exist_ok=True)
        if cfg.stage == "pretrain":
            reports.append(_stage_pretrain(cfg, run_dir, seed))
        else:
            reports.append(_stage_finetune(cfg, run_dir, seed))
    if cfg.runs > 1:
        agg = _aggregate(reports, cfg)
        with open(out / "aggregate.json", "w") as fh:
            json.dump(agg, fh, indent=2)
    return reports[-1]
