"""Training loop, learning-rate schedule and experiment orchestration.

Schedule (all patience values are counted in optimizer iterations):

* validation runs once per epoch;
* the learning rate is multiplied by ``lr_decay_factor`` once the validation
  loss has gone ``plateau_patience_iters`` iterations without a strict
  decrease (measured from the later of the last improvement and the last
  decay);
* the run stops when the validation loss has not strictly decreased for
  ``early_stop_patience_iters`` iterations, or after ``max_epochs``.

The best-so-far validation loss carries over across decays. The weights
with the highest validation AUCROC are kept and restored at the end; an exact
AUCROC tie goes to the epoch with the lower validation loss.
"""

import copy
import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import seeding
from .data.augment import AugmentParams, augment_tensor
from .errors import ConfigurationError, SingularityError, TrainingAborted, UndefinedAUCError
from .evaluation import (
    MetricsReport,
    ScoreSet,
    aggregate_runs,
    auc_roc,
    evaluate_scores,
    score_subset,
    threshold_for,
)
from .losses import LossConfig, LossFamily, compute_loss
from .models import Head, Network, save_checkpoint, to_nchw

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    initial_lr: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 400
    lr_decay_factor: float = 0.5
    plateau_patience_iters: int = 900
    early_stop_patience_iters: int = 4500
    n_seeds: int = 5
    checkpoint_metric: str = "val_aucroc"
    augment: AugmentParams = AugmentParams()
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    eval_batch_size: int = 256
    device: str = "cpu"

    def __post_init__(self):
        if isinstance(self.augment, dict):
            object.__setattr__(self, "augment", AugmentParams(**self.augment))
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        if self.optimizer != "adam":
            raise ConfigurationError("only the adam optimizer is supported")
        if self.checkpoint_metric != "val_aucroc":
            raise ConfigurationError("checkpoint_metric must be val_aucroc")
        if not self.plateau_patience_iters < self.early_stop_patience_iters:
            raise ConfigurationError("plateau_patience_iters must be < early_stop_patience_iters")
        if self.batch_size <= 0 or self.max_epochs <= 0:
            raise ConfigurationError("batch_size and max_epochs must be positive")
        if not 0 < self.lr_decay_factor <= 1:
            raise ConfigurationError("lr_decay_factor must be in (0, 1]")

    def to_dict(self):
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class PlateauSchedule:
    """Reduce-on-plateau and early stopping driven by a validation-loss stream."""

    def __init__(self, initial_lr, factor=0.5, plateau_patience=900, stop_patience=4500):
        self.lr = float(initial_lr)
        self.factor = factor
        self.plateau_patience = plateau_patience
        self.stop_patience = stop_patience
        self.best = math.inf
        self.best_iteration = 0
        self._plateau_ref = 0
        self.events = []

    def update(self, iteration, val_loss):
        """Feed one validation result; returns ``(decayed, stop)``."""
        decayed = stop = False
        if val_loss < self.best:
            self.best = val_loss
            self.best_iteration = iteration
            self._plateau_ref = iteration
        else:
            if iteration - self._plateau_ref >= self.plateau_patience:
                self.lr *= self.factor
                self._plateau_ref = iteration
                decayed = True
                self.events.append(("lr_decay", iteration, self.lr))
            if iteration - self.best_iteration >= self.stop_patience:
                stop = True
                self.events.append(("early_stop", iteration, self.lr))
        return decayed, stop


@dataclass
class RunResult:
    best_state: dict
    best_val_aucroc: float
    best_iteration: int
    history: list
    seed: int
    wall_time: float
    iterations_per_epoch: int
    stopped_early: bool = False
    final_lr: float = math.nan
    center_unchanged: bool = True
    initial_param_digest: str = ""
    schedule_events: list = field(default_factory=list)

    def restore(self, net: Network):
        net.load_state_dict(self.best_state)
        return net


def check_compatible(net: Network, loss_cfg: LossConfig):
    head = net.config.head
    if loss_cfg.family.is_metric:
        if head is not Head.METRIC:
            raise ConfigurationError(f"{loss_cfg.family.value} loss needs a metric head, got {head.value}")
        if loss_cfg.latent_dim != net.config.latent_dim:
            raise ConfigurationError(
                f"center has {loss_cfg.latent_dim} components but the latent dimension is {net.config.latent_dim}"
            )
    elif head is not Head.SIGMOID_CLASSIFIER:
        raise ConfigurationError(f"{loss_cfg.family.value} loss needs a classifier head, got {head.value}")


def param_digest(net):
    h = hashlib.sha256()
    for name, p in sorted(net.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _outputs(net, images, cfg: TrainConfig):
    outs = []
    with torch.no_grad():
        for start in range(0, len(images), cfg.eval_batch_size):
            outs.append(net(to_nchw(images[start : start + cfg.eval_batch_size], cfg.device)))
    return torch.cat(outs)


def make_validator(val_set, loss_cfg: LossConfig, cfg: TrainConfig):
    """Default evaluator: full-set validation loss and AUCROC in eval mode."""
    labels = torch.as_tensor(val_set.labels, dtype=torch.float32)

    def evaluate(net, iteration):
        was_training = net.training
        net.eval()
        try:
            out = _outputs(net, val_set.images, cfg)
        finally:
            net.train(was_training)
        center = loss_cfg.center_tensor(device=cfg.device) if loss_cfg.family.is_metric else None
        try:
            val_loss = float(compute_loss(loss_cfg, out, labels.to(out.device), center))
        except SingularityError:
            val_loss = math.inf
        if loss_cfg.family.is_metric:
            scores = torch.linalg.vector_norm(out.double() - center.double(), dim=1).cpu().numpy()
        else:
            scores = out.reshape(-1).double().cpu().numpy()
        try:
            auc = auc_roc(ScoreSet(np.nan_to_num(scores, nan=0.0), val_set.labels, "distance" if loss_cfg.family.is_metric else "probability"))
        except (UndefinedAUCError, ConfigurationError):
            auc = math.nan
        return val_loss, auc

    return evaluate


class _RunWriter:
    def __init__(self, run_dir):
        self.dir = Path(run_dir) if run_dir is not None else None
        if self.dir is not None:
            self.dir.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.dir / "history.csv", "w", newline="")
            self._csv = None

    def row(self, row):
        if self.dir is None:
            return
        if self._csv is None:
            self._csv = csv.DictWriter(self._fh, fieldnames=list(row))
            self._csv.writeheader()
        self._csv.writerow(row)
        self._fh.flush()

    def abort(self, report):
        if self.dir is None:
            return None
        path = self.dir / "abort_report.json"
        path.write_text(json.dumps(report, indent=2, sort_keys=True, default=str) + "\n")
        return path

    def close(self):
        if self.dir is not None:
            self._fh.close()


def train(
    net: Network,
    split,
    loss_cfg: LossConfig,
    cfg: TrainConfig,
    seed=0,
    run_dir=None,
    evaluator: Optional[Callable] = None,
) -> RunResult:
    """Optimise ``net`` on ``split.train``, validating on ``split.val`` each epoch.

    ``evaluator(net, iteration) -> (val_loss, val_aucroc)`` replaces the default
    validation pass (used to script the schedule in tests). On return ``net``
    holds the best-AUCROC weights. A non-finite training loss raises
    :class:`TrainingAborted` with a report (also written to the run directory).
    """
    check_compatible(net, loss_cfg)
    train_set = split.train
    if len(train_set) == 0:
        raise ConfigurationError("training set is empty")
    if evaluator is None:
        evaluator = make_validator(split.val, loss_cfg, cfg)

    t0 = time.time()
    net.to(cfg.device)
    net.train()
    metric = loss_cfg.family.is_metric
    center = loss_cfg.center_tensor(device=cfg.device) if metric else None
    center_at_start = center.clone() if metric else None
    initial_digest = param_digest(net)

    opt = torch.optim.Adam(net.parameters(), lr=cfg.initial_lr, betas=cfg.adam_betas, eps=cfg.adam_eps)
    schedule = PlateauSchedule(cfg.initial_lr, cfg.lr_decay_factor, cfg.plateau_patience_iters, cfg.early_stop_patience_iters)
    shuffle_rng = seeding.rng(seed, "shuffle")
    augment_rng = seeding.rng(seed, "augment")
    n = len(train_set)
    iters_per_epoch = math.ceil(n / cfg.batch_size)
    writer = _RunWriter(run_dir)

    best_auc, best_val_loss, best_state, best_iteration = -math.inf, math.inf, None, 0
    history = []
    iteration = 0
    stopped = False

    def abort(reason, **extra):
        report = {"reason": reason, "seed": seed, "iteration": iteration, "epoch": epoch, "lr": schedule.lr}
        report.update(extra)
        path = writer.abort(report)
        writer.close()
        if path is not None:
            report["report_path"] = str(path)
        raise TrainingAborted(f"run aborted at iteration {iteration}: {reason}", report)

    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        perm = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(perm[start : start + cfg.batch_size])
            x = augment_tensor(to_nchw(train_set.images[idx], cfg.device), augment_rng, cfg.augment)
            y = torch.as_tensor(train_set.labels[idx], dtype=torch.float32, device=cfg.device)
            try:
                loss = compute_loss(loss_cfg, net(x), y, center)
            except SingularityError as exc:
                abort(f"singular loss: {exc}")
            if not torch.isfinite(loss):
                abort("non-finite training loss (NAN)", loss=str(float(loss.detach())))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            iteration += 1
            total += float(loss.detach()) * len(idx)
        train_loss = total / n

        val_loss, val_auc = evaluator(net, iteration)
        if not math.isfinite(val_loss) and val_loss != math.inf:
            abort("non-finite validation loss (NAN)")
        better = math.isfinite(val_auc) and (
            val_auc > best_auc or (val_auc == best_auc and val_loss < best_val_loss)
        )
        if best_state is None or better:
            best_auc = val_auc if math.isfinite(val_auc) else -math.inf
            best_val_loss = val_loss
            best_state = copy.deepcopy({k: v.detach().cpu() for k, v in net.state_dict().items()})
            best_iteration = iteration
        row = {
            "epoch": epoch,
            "iteration": iteration,
            "train_loss": train_loss,
            "val_loss": val_loss,
            "val_aucroc": val_auc,
            "lr": schedule.lr,
        }
        history.append(row)
        writer.row(row)
        log.debug("epoch %d it %d train %.4f val %.4f auc %.4f lr %.2e", epoch, iteration, train_loss, val_loss, val_auc, schedule.lr)
        decayed, stop = schedule.update(iteration, val_loss)
        if decayed:
            for g in opt.param_groups:
                g["lr"] = schedule.lr
        if stop:
            stopped = True
            break
    writer.close()

    net.load_state_dict(best_state)
    center_unchanged = bool(torch.equal(center, center_at_start)) if metric else True
    result = RunResult(
        best_state=best_state,
        best_val_aucroc=best_auc if best_auc != -math.inf else math.nan,
        best_iteration=best_iteration,
        history=history,
        seed=seed,
        wall_time=time.time() - t0,
        iterations_per_epoch=iters_per_epoch,
        stopped_early=stopped,
        final_lr=schedule.lr,
        center_unchanged=center_unchanged,
        initial_param_digest=initial_digest,
        schedule_events=list(schedule.events),
    )
    if run_dir is not None:
        save_checkpoint(
            Path(run_dir) / "checkpoints" / "best.pt",
            net,
            step=best_iteration,
            best_val_aucroc=result.best_val_aucroc,
            extra={"seed": seed, "loss_config": json.dumps(loss_cfg.to_dict())},
        )
    return result


@dataclass
class MultiSeedResult:
    results: list
    aborts: list  # (seed, report)


def run_multi_seed(build_net: Callable, split, loss_cfg, cfg: TrainConfig, seeds=None, run_dir=None) -> MultiSeedResult:
    """Independent runs, one per seed; aborted runs are recorded and skipped.

    ``build_net(seed)`` must return a freshly initialised network.
    """
    seeds = list(range(cfg.n_seeds)) if seeds is None else list(seeds)
    if not seeds:
        raise ConfigurationError("need at least one seed")
    results, aborts = [], []
    for s in seeds:
        net = build_net(seeding.stream_seed(s, "init"))
        sub = None if run_dir is None else Path(run_dir) / f"seed_{s}"
        try:
            results.append(train(net, split, loss_cfg, cfg, seed=s, run_dir=sub))
        except TrainingAborted as exc:
            log.warning("seed %s aborted: %s", s, exc)
            aborts.append((s, exc.report))
    return MultiSeedResult(results, aborts)


def evaluate_run(net, loss_cfg, train_set, eval_set, cfg: TrainConfig) -> MetricsReport:
    """Threshold from the loss family's rule, then metrics on ``eval_set``."""
    train_scores = score_subset(net, train_set, loss_cfg, cfg.eval_batch_size, cfg.device) if loss_cfg.family is LossFamily.DEEP_SAD else None
    thr = threshold_for(loss_cfg, train_scores)
    return evaluate_scores(score_subset(net, eval_set, loss_cfg, cfg.eval_batch_size, cfg.device), thr)


@dataclass
class OuterFoldResult:
    outer_index: int
    inner_results: list
    selected_inner: int
    report: MetricsReport


@dataclass
class DoubleCVResult:
    folds: list
    summary: dict
    access_log: list


@dataclass
class _PatientSplit:
    train: object
    val: object


def run_double_cv(plan, source, build_net: Callable, loss_cfg, cfg: TrainConfig, seed=0, run_dir=None, train_fn=train):
    """Nested CV: 4 inner runs per outer fold, pick the best inner val AUCROC,
    evaluate that model once on the outer-fold patients.

    ``source`` is a :class:`~cdcm.data.ppmr.SliceSource`; its access log is
    returned so callers can audit when outer patients were read.
    """
    folds = []
    for o, fold in enumerate(plan.outer_folds):
        source.access_log.append(("begin_outer", (o,)))
        inner_results = []
        for i, split in enumerate(fold.inner_splits):
            data = _PatientSplit(
                source.subset(split.train_patients, "train"), source.subset(split.inner_val_patients, "inner_val")
            )
            net = build_net(seeding.stream_seed(seed * 1000 + o * 10 + i, "init"))
            sub = None if run_dir is None else Path(run_dir) / f"outer_{o}" / f"inner_{i}"
            res = train_fn(net, data, loss_cfg, cfg, seed=seed, run_dir=sub)
            inner_results.append(res)
        aucs = [r.best_val_aucroc if math.isfinite(r.best_val_aucroc) else -math.inf for r in inner_results]
        best = int(np.argmax(aucs))
        net = build_net(0)
        inner_results[best].restore(net)
        train_set = source.subset(fold.inner_splits[best].train_patients, "threshold_fit")
        outer = source.subset(fold.outer_val_patients, "outer_eval")
        report = evaluate_run(net, loss_cfg, train_set, outer, cfg)
        folds.append(OuterFoldResult(o, inner_results, best, report))
    summary = aggregate_runs([f.report for f in folds])
    return DoubleCVResult(folds, summary, list(source.access_log))

