"""Pretraining and finetuning loops with exact resume.

Randomness is keyed by counters rather than carried as generator state: the
data order of epoch ``e`` comes from substream ``("epoch", e)`` and every
draw made during global step ``s`` (augmentation, farthest point sampling,
dropout) comes from substream ``("step", s)``. A checkpoint therefore only
needs the counters to continue a run bit-for-bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import AugmentationSpec, apply_augmentation, augment_image, two_views
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .contrast import ContrastConfig, loss_components
from .data import batch_iter
from .errors import DataError, NumericError, ParameterError
from .evaluate import extract_embeddings, probe_accuracy
from .model import ViPFormer, ViPFormerConfig, calibrate_batchnorm
from .optim import AdamW, SchedulerState, lr_at
from .rng import RngStream
from .tensor import Tensor
from .tokenize import build_point_patches_batch

METRICS_HEADER = ("epoch", "L_imc", "L_cmc", "L_total", "lr", "probe_acc")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    lr_peak: float = 1e-3
    peak_decay: float = 0.6
    cycle_len: float = 100.0
    warmup_len: float = 5.0
    schedule: str = "step"  # "step": fractional epochs, "epoch": lr fixed within an epoch
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    probe_l2: float = 1e-4
    probe_loss: str = "softmax"
    probe_feature: str = "adapter"
    cmc_view: str = "t1"  # "t1" reuses the first view, "clean" adds an unaugmented pass
    workers: int = 1
    max_steps: int | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ParameterError("need epochs >= 0 and batch_size >= 1")
        if self.schedule not in ("step", "epoch"):
            raise ParameterError(f"unknown schedule granularity {self.schedule!r}")
        if self.cmc_view not in ("t1", "clean"):
            raise ParameterError(f"unknown cmc_view {self.cmc_view!r}")

    def scheduler(self) -> SchedulerState:
        return SchedulerState(self.lr_peak, self.peak_decay, self.cycle_len, self.warmup_len)

    def adamw(self) -> dict:
        return {"beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "weight_decay": self.weight_decay}

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _fractional_epoch(cfg: TrainConfig, epoch: int, step_in_epoch: int, steps_per_epoch: int) -> float:
    if cfg.schedule == "epoch":
        return float(epoch)
    # evaluate at the end of the step so the very first update is not taken at lr = 0
    return epoch + (step_in_epoch + 1) / steps_per_epoch


def _nan(x):
    return float("nan") if x is None else float(x.item())


def write_metrics(path, records):
    with open(path, "w") as fh:
        fh.write("\t".join(METRICS_HEADER) + "\n")
        for r in records:
            fh.write("\t".join([str(r["epoch"])] + [repr(float(r[k])) for k in METRICS_HEADER[1:]]) + "\n")


def read_metrics(path) -> list:
    lines = Path(path).read_text().splitlines()
    head = lines[0].split("\t")
    out = []
    for line in lines[1:]:
        vals = line.split("\t")
        rec = {k: float(v) for k, v in zip(head, vals)}
        rec["epoch"] = int(rec["epoch"])
        out.append(rec)
    return out


class Pretrainer:
    """Contrastive pretraining with per-epoch probe-based model selection.

    ``probe_sets`` is an optional ``(fit, eval)`` pair of labeled datasets;
    without it no probe runs and ``probe_acc`` is logged as nan.
    """

    def __init__(self, model_cfg: ViPFormerConfig, contrast: ContrastConfig, train_cfg: TrainConfig,
                 dataset, probe_sets=None, augment: AugmentationSpec | None = None, out_dir=None):
        self.model_cfg = model_cfg
        self.contrast = contrast
        self.cfg = train_cfg
        self.augment = augment if augment is not None else AugmentationSpec()
        self.augment.validate()
        self.dataset = dataset
        if contrast.uses_cmc and dataset.images is None:
            raise DataError("cross-modal contrast needs paired images in the training set")
        self.probe_sets = probe_sets
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.root = RngStream(train_cfg.seed)
        self.model = ViPFormer(model_cfg, self.root.substream("model"))
        self.params = dict(self.model.named_parameters(include_head=False))
        self.optimizer = AdamW(self.params.items(), **train_cfg.adamw())
        self.sched = train_cfg.scheduler()
        self.steps_per_epoch = len(dataset) // train_cfg.batch_size
        if train_cfg.epochs > 0 and self.steps_per_epoch == 0:
            raise DataError(f"training split of {len(dataset)} samples cannot fill one batch of "
                            f"{train_cfg.batch_size}")
        self.step = 0
        self.epoch = 0
        self.step_in_epoch = 0
        self.sums = {"imc": 0.0, "cmc": 0.0, "total": 0.0, "lr": 0.0}
        self.records = []
        self.trace = []
        self.best = {"acc": None, "epoch": None}
        self.best_arrays = None

    # -- state ------------------------------------------------------------
    def checkpoint(self) -> Checkpoint:
        tensors = {k: np.array(v, copy=True) for k, v in self.model.state_arrays(include_head=False).items()}
        tensors.update({k: np.array(v, copy=True) for k, v in self.optimizer.state_arrays().items()})
        if self.best_arrays is not None:
            tensors.update({f"best/{k}": v for k, v in self.best_arrays.items()})
        meta = {
            "kind": "pretrain",
            "step": self.step, "epoch": self.epoch, "step_in_epoch": self.step_in_epoch,
            "sums": dict(self.sums), "records": self.records, "trace": self.trace,
            "best": dict(self.best), "optimizer": self.optimizer.hyper(),
            "scheduler": asdict(self.sched), "train": self.cfg.to_dict(),
            "contrast": asdict(self.contrast), "augment": asdict(self.augment),
        }
        return Checkpoint(tensors, self.model_cfg.to_dict(), meta)

    def best_checkpoint(self) -> Checkpoint:
        """Model-only checkpoint of the epoch with the highest probe accuracy."""
        arrays = self.best_arrays if self.best_arrays is not None else self.model.state_arrays(include_head=False)
        return Checkpoint({k: np.array(v, copy=True) for k, v in arrays.items()}, self.model_cfg.to_dict(),
                          {"kind": "model", "best": dict(self.best)})

    def load_state(self, ckpt: Checkpoint):
        meta = ckpt.meta
        model_arrays = {k: v for k, v in ckpt.tensors.items() if k.startswith(("param/", "buffer/"))}
        self.model.load_arrays(model_arrays)
        self.optimizer.load(meta["optimizer"], {k: v for k, v in ckpt.tensors.items()
                                                if k.startswith(("opt.m/", "opt.v/"))})
        self.step, self.epoch, self.step_in_epoch = meta["step"], meta["epoch"], meta["step_in_epoch"]
        self.sums = dict(meta["sums"])
        self.records = [dict(r) for r in meta["records"]]
        self.trace = [dict(t) for t in meta["trace"]]
        self.best = dict(meta["best"])
        best = {k[len("best/"):]: v for k, v in ckpt.tensors.items() if k.startswith("best/")}
        self.best_arrays = best or None

    @classmethod
    def resume(cls, ckpt: Checkpoint, dataset, probe_sets=None, out_dir=None, **overrides):
        meta = ckpt.meta
        train_cfg = TrainConfig.from_dict({**meta["train"], **overrides})
        self = cls(ViPFormerConfig.from_dict(ckpt.config), ContrastConfig(**meta["contrast"]), train_cfg,
                   dataset, probe_sets, AugmentationSpec(**_tuples(meta["augment"])), out_dir)
        self.load_state(ckpt)
        return self

    # -- one optimization step ------------------------------------------------
    def _views(self, batch, rng):
        t1, t2 = [], []
        for j, idx in enumerate(batch.indices):
            a, b = two_views(batch.points[j], self.augment, rng.substream("augment", int(idx)))
            t1.append(a)
            t2.append(b)
        return t1, t2

    def train_step(self, batch, lr: float) -> dict:
        cfg, model, rng = self.cfg, self.model, self.root.substream("step", self.step)
        c = self.contrast
        t1, t2 = self._views(batch, rng)
        need_t2 = c.uses_imc
        p1 = model.forward_points(t1, rng.substream("p1"), train=True, workers=cfg.workers)
        p2 = model.forward_points(t2, rng.substream("p2"), train=True, workers=cfg.workers) if need_t2 else None
        f = None
        anchor = p1
        if c.uses_cmc:
            images = np.stack([augment_image(im, self.augment, rng.substream("image", int(i)))
                               for im, i in zip(batch.images, batch.indices)])
            f = model.forward_image(images, train=True, rng=rng.substream("f"))
            if cfg.cmc_view == "clean":
                anchor = model.forward_points(batch.points, rng.substream("p0"), train=True, workers=cfg.workers)
        if c.mode == "both" and cfg.cmc_view == "clean":
            parts = loss_components(p1, p2, None, ContrastConfig(c.tau, c.alpha, "imc_only"))
            cmc = loss_components(anchor, None, f, ContrastConfig(c.tau, c.alpha, "cmc_only"))["cmc"]
            parts = {"imc": parts["imc"], "cmc": cmc, "total": parts["imc"] + cmc * float(c.alpha)}
        elif c.mode == "cmc_only":
            parts = loss_components(anchor, None, f, c)
        else:
            parts = loss_components(p1, p2, f, c)
        values = {k: _nan(v) for k, v in parts.items()}
        if not math.isfinite(values["total"]):
            raise NumericError(f"non-finite loss {values['total']} at step {self.step}",
                               last_good=self._last_good())
        self.optimizer.zero_grad()
        parts["total"].backward()
        try:
            self.optimizer.step(lr)
        except NumericError as exc:
            raise NumericError(f"{exc} at step {self.step}", last_good=self._last_good()) from None
        return values

    def _last_good(self):
        # the failing step has not modified any parameter yet
        ckpt = self.checkpoint()
        if self.out_dir is not None:
            save_checkpoint(ckpt, self.out_dir / "last_good.ckpt")
        return ckpt

    # -- probing -----------------------------------------------------------
    def probe(self) -> float:
        if not self.probe_sets:
            return float("nan")
        fit_set, eval_set = self.probe_sets
        if int(self.model.output_adapter.norm1.num_batches_tracked) == 0:
            calibrate_batchnorm(self.model, [fit_set.points[:max(2, self.cfg.batch_size)]])
        kw = {"feature": self.cfg.probe_feature, "workers": self.cfg.workers}
        xf, yf = extract_embeddings(self.model, fit_set, **kw)
        xe, ye = extract_embeddings(self.model, eval_set, **kw)
        return probe_accuracy(xf, yf, xe, ye, l2=self.cfg.probe_l2, loss=self.cfg.probe_loss)

    # -- loop --------------------------------------------------------------
    def run(self, log=None) -> Checkpoint:
        """Train until ``cfg.epochs`` (or ``cfg.max_steps``) and return the resume checkpoint."""
        cfg = self.cfg
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        while self.epoch < cfg.epochs:
            batches = batch_iter(self.dataset, cfg.batch_size, self.root.substream("epoch", self.epoch),
                                 drop_last=True, with_images=self.contrast.uses_cmc)
            for i, batch in enumerate(batches):
                if i < self.step_in_epoch:
                    continue
                if cfg.max_steps is not None and self.step >= cfg.max_steps:
                    return self._stop()
                lr = lr_at(self.sched, _fractional_epoch(cfg, self.epoch, i, self.steps_per_epoch))
                values = self.train_step(batch, lr)
                self.trace.append({"step": self.step, **values, "lr": lr})
                for k in ("imc", "cmc", "total"):
                    self.sums[k] += values[k]
                self.sums["lr"] += lr
                self.step += 1
                self.step_in_epoch = i + 1
            self._end_epoch(log)
        return self._stop()

    def _end_epoch(self, log):
        n = max(self.step_in_epoch, 1)
        acc = self.probe()
        rec = {"epoch": self.epoch + 1, "L_imc": self.sums["imc"] / n, "L_cmc": self.sums["cmc"] / n,
               "L_total": self.sums["total"] / n, "lr": self.sums["lr"] / n, "probe_acc": acc}
        self.records.append(rec)
        # without a probe the most recent epoch stands in as the selected model
        improved = not math.isfinite(acc) or self.best["acc"] is None or acc > self.best["acc"]
        if improved:
            self.best = {"acc": acc if math.isfinite(acc) else None, "epoch": self.epoch + 1}
            self.best_arrays = {k: np.array(v, copy=True)
                                for k, v in self.model.state_arrays(include_head=False).items()}
        self.epoch += 1
        self.step_in_epoch = 0
        self.sums = {"imc": 0.0, "cmc": 0.0, "total": 0.0, "lr": 0.0}
        if log is not None:
            log(rec)
        if self.out_dir is not None:
            write_metrics(self.out_dir / "metrics.tsv", self.records)
            if improved:
                save_checkpoint(self.best_checkpoint(), self.out_dir / "best.ckpt")

    def _stop(self) -> Checkpoint:
        ckpt = self.checkpoint()
        if self.out_dir is not None:
            save_checkpoint(ckpt, self.out_dir / "final.ckpt")
            if not (self.out_dir / "best.ckpt").exists():
                save_checkpoint(self.best_checkpoint(), self.out_dir / "best.ckpt")
            write_metrics(self.out_dir / "metrics.tsv", self.records)
        return ckpt


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def pretrain(dataset, model_cfg: ViPFormerConfig, contrast: ContrastConfig, train_cfg: TrainConfig,
             probe_sets=None, augment=None, out_dir=None, log=None) -> Pretrainer:
    trainer = Pretrainer(model_cfg, contrast, train_cfg, dataset, probe_sets, augment, out_dir)
    trainer.run(log)
    return trainer


def model_from_checkpoint(ckpt: Checkpoint | str | Path, best: bool = False) -> ViPFormer:
    """Rebuild a model from any checkpoint written by this package."""
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    model = ViPFormer(ViPFormerConfig.from_dict(ckpt.config))
    prefix = "best/" if best and any(k.startswith("best/") for k in ckpt.tensors) else ""
    arrays = {k[len(prefix):]: v for k, v in ckpt.tensors.items()
              if k.startswith(prefix) and k[len(prefix):].startswith(("param/", "buffer/"))}
    model.load_arrays(arrays, strict=False, include_head=True)
    return model


# -- finetuning -----------------------------------------------------------------

@dataclass
class FinetuneResult:
    best_oa: float
    best_epoch: int
    history: list  # per epoch: {"epoch", "loss", "val_oa", "lr"}
    checkpoint: Checkpoint


def classification_accuracy(model: ViPFormer, dataset, eval_seed: int = 0, batch_size: int = 32,
                            workers: int = 1) -> float:
    root = RngStream(eval_seed).substream("eval-fps")
    hits = 0
    with T.no_grad():
        for start in range(0, len(dataset), batch_size):
            idx = list(range(start, min(start + batch_size, len(dataset))))
            patches, centers = build_point_patches_batch([dataset.points[i] for i in idx], model.config.length,
                                                         model.config.k, [root.substream(i) for i in idx], workers)
            logits = model.classify(patches, centers, train=False)
            hits += int(np.sum(np.argmax(logits.data, axis=1) == dataset.labels[idx]))
    return hits / len(dataset)


def _check_labels(dataset, num_classes):
    labels = np.asarray(dataset.labels)
    bad = (labels < 0) | (labels >= num_classes)
    if np.any(bad):
        i = int(np.nonzero(bad)[0][0])
        raise DataError(f"class index {int(labels[i])} of sample {i} outside [0, {num_classes})")


def finetune(source, train_set, val_set, train_cfg: TrainConfig, model_cfg: ViPFormerConfig | None = None,
             freeze_encoder: bool = False, augment: AugmentationSpec | None = None,
             num_classes: int | None = None, log=None) -> FinetuneResult:
    """Supervised classification on top of the pooled encoder feature.

    ``source`` is a checkpoint (pretrain-finetune) or ``None`` (train from
    scratch with ``model_cfg``). Returns the best validation overall accuracy
    across epochs; with ``epochs=0`` that is the accuracy of the initial
    weights.
    """
    root = RngStream(train_cfg.seed).substream("finetune")
    if source is None:
        if model_cfg is None:
            raise ParameterError("training from scratch needs a model configuration")
        model = ViPFormer(model_cfg, root.substream("model"))
    else:
        model = model_from_checkpoint(source, best=True)
    num_classes = int(num_classes if num_classes is not None else max(train_set.num_classes, val_set.num_classes))
    _check_labels(train_set, num_classes)
    _check_labels(val_set, num_classes)
    model.attach_head(num_classes)
    augment = augment if augment is not None else AugmentationSpec()
    if freeze_encoder:
        params = dict(model.head.named_parameters("head."))
    else:
        params = {n: p for n, p in model.named_parameters() if not n.startswith("output_adapter.")}
    optimizer = AdamW(params.items(), **train_cfg.adamw())
    sched = train_cfg.scheduler()
    steps_per_epoch = max(1, math.ceil(len(train_set) / train_cfg.batch_size))

    best_oa = classification_accuracy(model, val_set, workers=train_cfg.workers)
    best_epoch = 0
    best_arrays = {k: np.array(v, copy=True) for k, v in model.state_arrays().items()}
    history = []
    step = 0
    for epoch in range(train_cfg.epochs):
        total, count, lr_sum = 0.0, 0, 0.0
        for i, batch in enumerate(batch_iter(train_set, train_cfg.batch_size, root.substream("epoch", epoch),
                                             drop_last=False, with_images=False)):
            lr = lr_at(sched, _fractional_epoch(train_cfg, epoch, i, steps_per_epoch))
            rng = root.substream("step", step)
            clouds = [apply_augmentation(p, augment, rng.substream("augment", int(j)))
                      for p, j in zip(batch.points, batch.indices)]
            patches, centers = model.tokenize_points(clouds, rng.substream("fps"), train_cfg.workers)
            if freeze_encoder:
                with T.no_grad():
                    r = model.point_features(patches, centers, train=False)
                logits = model.head(Tensor(r.data), True, rng.substream("head"))
            else:
                logits = model.classify(patches, centers, train=True, rng=rng)
            loss = T.cross_entropy(logits, batch.labels)
            value = float(loss.item())
            if not math.isfinite(value):
                raise NumericError(f"non-finite finetune loss at epoch {epoch + 1}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step(lr)
            total += value * len(batch)
            count += len(batch)
            lr_sum += lr
            step += 1
        oa = classification_accuracy(model, val_set, workers=train_cfg.workers)
        rec = {"epoch": epoch + 1, "loss": total / count, "val_oa": oa, "lr": lr_sum / (i + 1)}
        history.append(rec)
        if log is not None:
            log(rec)
        if oa > best_oa:
            best_oa, best_epoch = oa, epoch + 1
            best_arrays = {k: np.array(v, copy=True) for k, v in model.state_arrays().items()}
    meta = {"kind": "finetune", "best_oa": best_oa, "best_epoch": best_epoch, "history": history,
            "num_classes": num_classes, "freeze_encoder": freeze_encoder, "train": train_cfg.to_dict()}
    return FinetuneResult(best_oa, best_epoch, history, Checkpoint(best_arrays, model.config.to_dict(), meta))


def compare_strategies(pretrained, train_set, val_set, train_cfg: TrainConfig, model_cfg: ViPFormerConfig,
                       freeze_encoder: bool = False, log=None) -> list:
    """Train from scratch and from a pretrained checkpoint under the same budget."""
    rows = []
    for name, source in (("Train from scratch", None), ("Pretrain-Finetune", pretrained)):
        res = finetune(source, train_set, val_set, train_cfg, model_cfg, freeze_encoder=freeze_encoder,
                       log=None if log is None else (lambda r, n=name: log(n, r)))
        rows.append({"strategy": name, "best_oa": res.best_oa, "best_epoch": res.best_epoch,
                     "final_loss": res.history[-1]["loss"] if res.history else float("nan")})
    return rows


def format_comparison(rows) -> str:
    out = ["strategy\tbest_oa\tbest_epoch\tfinal_loss"]
    for r in rows:
        out.append(f"{r['strategy']}\t{r['best_oa']:.4f}\t{r['best_epoch']}\t{r['final_loss']:.6f}")
    return "\n".join(out) + "\n"


def dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
