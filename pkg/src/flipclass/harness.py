"""Training loop: paired weak/strong views, teacher forward with key alignment,
loss assembly, SGD with momentum, and per-epoch metrics."""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import linalg
from .align import AlignConfig, AttentionSlice, cross_energy
from .data import AugmentConfig, GcdDataset, SyntheticGcdSpec, generate, strong_aug, weak_aug
from .encoder import EncoderConfig, EncoderParams, classify, forward, forward_teacher_aligned
from .errors import DomainError, NumericError
from .evaluation import ERROR_KEYS, EvalReport, hungarian_accuracy
from .objectives import BatchViews, DistributionAligner, LossConfig, coral_loss, confidence_mask, loss_terms, one_hot

log = logging.getLogger(__name__)

ALIGN_MODES = ("flipclass", "none", "distribution_alignment", "fixmatch", "coral")

# stream ids under the run seed
_INIT_STREAM, _ORDER_STREAM, _AUG_STREAM, _EVAL_STREAM = 10, 11, 12, 13


@dataclass
class TrainConfig:
    mode: str = "flipclass"
    seed: int = 0
    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.1
    cosine: bool = True
    momentum: float = 0.9
    weight_decay: float = 5e-5
    # alignment
    alpha: float = 0.0
    beta: float = 1.0
    gamma_update: float = 0.1
    gamma_reg: float = 0.5
    target_layers: tuple = (1,)
    # losses
    lambda_balance: float = 0.35
    tau_u: float = 0.07
    tau_c: float = 1.0
    tau_t: float = 0.07
    tau_s: float = 0.1
    epsilon_me: float = 1.0
    da_momentum: float = 0.999
    fixmatch_threshold: float = 0.95
    coral_weight: float = 1.0
    # augmentation
    sigma_w: float = 0.1
    sigma_s: float = 0.4
    mask_fraction: float = 0.25
    # encoder
    d_model: int = 32
    d_ff: int = 64
    n_blocks: int = 2
    layer_norm: bool = False
    # data (ignored when dataset_path is set)
    dataset_path: str | None = None
    data_seed: int | None = None  # None: use the run seed
    d_in: int = 32
    k_old: int = 5
    k_new: int = 5
    samples_per_class: int = 200
    separation: float = 3.0
    label_fraction: float = 0.5
    within_std: float = 1.0
    test_fraction: float = 0.2
    out_dir: str | None = None

    def __post_init__(self):
        self.target_layers = tuple(int(i) for i in self.target_layers)
        if self.mode not in ALIGN_MODES:
            raise DomainError(f"unknown alignment mode {self.mode!r}")
        if self.epochs < 1:
            raise DomainError("epochs must be at least 1")
        if self.batch_size < 2:
            raise DomainError("batch_size must be at least 2")
        if not self.lr > 0:
            raise DomainError("lr must be positive")
        # validate the derived configs eagerly
        self.align_config()
        self.loss_config()
        self.augment_config()

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def align_config(self) -> AlignConfig:
        return AlignConfig(self.alpha, self.beta, self.gamma_update, self.gamma_reg, self.target_layers)

    def loss_config(self) -> LossConfig:
        return LossConfig(
            self.lambda_balance, self.tau_u, self.tau_c, self.tau_t, self.tau_s, self.epsilon_me,
            self.da_momentum, self.fixmatch_threshold, self.coral_weight,
        )

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(self.sigma_w, self.sigma_s, self.mask_fraction)

    def data_spec(self) -> SyntheticGcdSpec:
        return SyntheticGcdSpec(
            d_in=self.d_in, k_old=self.k_old, k_new=self.k_new, samples_per_class=self.samples_per_class,
            separation=self.separation, label_fraction=self.label_fraction,
            seed=self.seed if self.data_seed is None else self.data_seed,
            within_std=self.within_std, test_fraction=self.test_fraction,
        )

    def encoder_config(self, d_in: int, n_classes: int) -> EncoderConfig:
        return EncoderConfig(d_in, n_classes, self.d_model, self.d_ff, self.n_blocks, self.layer_norm)


@dataclass
class EpochMetrics:
    epoch: int
    loss_total: float
    loss_rep: float
    loss_cons: float
    energies: list  # per encoder layer, mean over the epoch's steps
    teacher: dict  # all/old/new accuracies on weak test views
    student: dict  # all/old/new accuracies on strong test views
    errors: dict  # categorize-error counts on clean test data
    clean: dict  # all/old/new accuracies on clean test data


@dataclass
class RunReport:
    config: TrainConfig
    epochs: list = field(default_factory=list)
    final: EvalReport | None = None
    wall_seconds: float = 0.0

    @property
    def seed(self) -> int:
        return self.config.seed

    def series(self, name: str) -> np.ndarray:
        """Per-epoch series by column name, e.g. ``s_acc_new`` or ``energy_layer_1``."""
        return np.array([row[name] for row in self.rows()])

    def rows(self) -> list[dict]:
        out = []
        for m in self.epochs:
            row = {"epoch": m.epoch, "loss_total": m.loss_total, "loss_rep": m.loss_rep, "loss_cons": m.loss_cons}
            row.update({f"energy_layer_{i}": e for i, e in enumerate(m.energies)})
            row.update({f"t_acc_{k}": m.teacher[k] for k in ("all", "old", "new")})
            row.update({f"s_acc_{k}": m.student[k] for k in ("all", "old", "new")})
            row.update({k: m.errors[k] for k in ERROR_KEYS})
            row.update({f"acc_{k}": m.clean[k] for k in ("all", "old", "new")})
            out.append(row)
        return out

    def metrics_csv(self) -> str:
        rows = self.rows()
        if not rows:
            return ""
        cols = list(rows[0])
        lines = [",".join(cols)]
        for row in rows:
            lines.append(",".join(_fmt(row[c]) for c in cols))
        return "\n".join(lines) + "\n"

    def write(self, out_dir, params: EncoderParams | None = None) -> Path:
        from .config import dump_config

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config_echo.txt").write_text(dump_config(self.config))
        with open(out / "metrics.csv", "w", newline="\n") as fh:
            fh.write(self.metrics_csv())
        if self.final is not None:
            self.final.write(out / "report.txt")
        if params is not None:
            params.save(out / "checkpoint.npz")
        return out


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def cosine_lr(base: float, step: int, total: int, enabled: bool = True) -> float:
    if not enabled or total <= 1:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * step / total))


def sgd_step(params: EncoderParams, grads: dict, velocity: dict, lr: float, momentum: float = 0.9,
             weight_decay: float = 0.0) -> EncoderParams:
    """In place: ``v <- m v + g + wd p``; ``p <- p - lr v``; prototypes renormalised."""
    if not lr > 0:
        raise DomainError("lr must be positive")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    for name, g in grads.items():
        p = params.arrays[name]
        v = velocity.get(name)
        step = g + weight_decay * p if weight_decay else g
        v = step if v is None else momentum * v + step
        velocity[name] = v
        params.arrays[name] = p - lr * v
    params.renormalize_prototypes()
    return params


def _accs(report: EvalReport) -> dict:
    return {"all": report.acc_all, "old": report.acc_old, "new": report.acc_new}


class Trainer:
    """One training run; ``run()`` returns the :class:`RunReport`."""

    def __init__(self, cfg: TrainConfig, dataset: GcdDataset | None = None):
        self.cfg = cfg
        if dataset is None:
            dataset = GcdDataset.load(cfg.dataset_path) if cfg.dataset_path else generate(cfg.data_spec())
        self.ds = dataset
        self.align = cfg.align_config()
        self.losses = cfg.loss_config()
        self.aug = cfg.augment_config()
        enc_cfg = cfg.encoder_config(dataset.X.shape[1], dataset.n_classes)
        if cfg.mode == "flipclass":
            self.align.validate_layers(enc_cfg.n_blocks)
        self.params = EncoderParams.init(enc_cfg, linalg.RngStream(cfg.seed, _INIT_STREAM))
        self.velocity: dict = {}
        self.aligner = DistributionAligner(dataset.n_classes, cfg.da_momentum) if cfg.mode == "distribution_alignment" else None
        self.order_stream = linalg.RngStream(cfg.seed, _ORDER_STREAM)
        self.aug_stream = linalg.RngStream(cfg.seed, _AUG_STREAM)
        self.is_labeled = dataset.split == "L"

    # -- one step ----------------------------------------------------------

    def _teacher(self, weak, student):
        if self.cfg.mode == "flipclass":
            return forward_teacher_aligned(weak, student, self.params, self.align)
        return forward(weak, self.params)

    def step(self, idx: np.ndarray, lr: float) -> tuple[dict, list]:
        cfg, ds = self.cfg, self.ds
        x = ds.X[idx]
        weak = weak_aug(x, self.aug_stream, self.aug.sigma_w)
        strong = strong_aug(x, self.aug_stream, self.aug.sigma_s, self.aug.mask_fraction)
        tape = ad.Tape()
        student = forward(strong, self.params, tape)
        teacher = self._teacher(weak, student)
        q = classify(teacher.features, self.params["prototypes"], cfg.tau_t)
        weights = None
        if self.aligner is not None:
            q = self.aligner(q)
        elif cfg.mode == "fixmatch":
            mask, hard = confidence_mask(q, cfg.fixmatch_threshold)
            q, weights = one_hot(hard, ds.n_classes), mask.astype(np.float64)
        lab = np.flatnonzero(self.is_labeled[idx])
        views = BatchViews(student.logit_var, q, student.feature_var, teacher.features, lab, ds.y[idx][lab], weights)
        terms = loss_terms(views, self.losses)
        total = terms["total"]
        if cfg.mode == "coral":
            total = total + cfg.coral_weight * coral_loss(student.feature_var, teacher.features)
        if not np.isfinite(total.item()):
            norms = {k: float(np.linalg.norm(v)) for k, v in self.params.arrays.items()}
            raise NumericError(f"non-finite loss on batch {idx[:8].tolist()}...; parameter norms {norms}")
        grads = ad.backward(tape, total)
        self.params = sgd_step(
            self.params, {k: grads[v.id] for k, v in student.param_vars.items()}, self.velocity, lr,
            cfg.momentum, cfg.weight_decay,
        )
        energies = [
            cross_energy(AttentionSlice(qs, kt), cfg.alpha, cfg.beta) for qs, kt in zip(student.queries, teacher.keys)
        ]
        return {"total": total.item(), "rep": terms["rep"].item(), "cons": terms["cons"].item()}, energies

    # -- evaluation --------------------------------------------------------

    def _chunks(self, idx):
        bs = self.cfg.batch_size
        return [idx[i:i + bs] for i in range(0, idx.size, bs)]

    def evaluate(self) -> tuple[EvalReport, EvalReport, EvalReport]:
        """Clean, teacher (weak views) and student (strong views) test reports."""
        ds = self.ds
        test = ds.test_idx
        stream = linalg.RngStream(self.cfg.seed, _EVAL_STREAM)
        clean, tpred, spred = [], [], []
        for chunk in self._chunks(test):
            x = ds.X[chunk]
            clean.append(np.argmax(forward(x, self.params).logits, axis=1))
            weak = weak_aug(x, stream, self.aug.sigma_w)
            strong = strong_aug(x, stream, self.aug.sigma_s, self.aug.mask_fraction)
            student = forward(strong, self.params)
            teacher = self._teacher(weak, student)
            spred.append(np.argmax(student.logits, axis=1))
            tpred.append(np.argmax(teacher.logits, axis=1))
        old, k, y = ds.old_classes, ds.n_classes, ds.y[test]
        return tuple(hungarian_accuracy(np.concatenate(p), y, old, k) for p in (clean, tpred, spred))

    # -- main loop ---------------------------------------------------------

    def run(self) -> RunReport:
        cfg = self.cfg
        start = time.perf_counter()
        report = RunReport(cfg)
        train = self.ds.train_idx
        batches_per_epoch = max(1, train.size // cfg.batch_size + (train.size % cfg.batch_size >= 2))
        total_steps = cfg.epochs * batches_per_epoch
        step_no = 0
        for epoch in range(cfg.epochs):
            order = train[linalg.rng_permutation(self.order_stream, train.size)]
            batches = [b for b in self._chunks(order) if b.size >= 2]
            losses, energies = [], []
            for b in batches:
                lr = cosine_lr(cfg.lr, step_no, total_steps, cfg.cosine)
                loss, energy = self.step(b, lr)
                losses.append(loss)
                energies.append(energy)
                step_no += 1
            clean, teacher, student = self.evaluate()
            report.epochs.append(EpochMetrics(
                epoch=epoch,
                loss_total=float(np.mean([l["total"] for l in losses])),
                loss_rep=float(np.mean([l["rep"] for l in losses])),
                loss_cons=float(np.mean([l["cons"] for l in losses])),
                energies=[float(e) for e in np.mean(energies, axis=0)],
                teacher=_accs(teacher), student=_accs(student),
                errors=dict(clean.categorize_errors), clean=_accs(clean),
            ))
            log.debug("epoch %d loss %.4f acc %.3f/%.3f/%.3f", epoch, report.epochs[-1].loss_total,
                      clean.acc_all, clean.acc_old, clean.acc_new)
            report.final = clean
        report.wall_seconds = time.perf_counter() - start
        return report


def train(cfg: TrainConfig, dataset: GcdDataset | None = None, out_dir=None) -> RunReport:
    """Run one training job and, if ``out_dir`` (or ``cfg.out_dir``) is set, write its outputs."""
    trainer = Trainer(cfg, dataset)
    report = trainer.run()
    out_dir = out_dir or cfg.out_dir
    if out_dir:
        report.write(out_dir, trainer.params)
    return report


# -- multi-seed suites -----------------------------------------------------

SUMMARY_METRICS = ("acc_all", "acc_old", "acc_new", "true_old", "false_old", "true_new", "false_new")


def _suite_job(args):
    cfg, out_dir = args
    try:
        rep = train(cfg, out_dir=out_dir)
        return cfg.seed, rep.final.as_dict(), None
    except Exception as exc:  # a failing seed must not sink the suite
        return cfg.seed, None, f"{type(exc).__name__}: {exc}"


def run_suite(configs, seeds, out_dir, threads: int = 1) -> dict:
    """Train every config under every seed and write ``summary.csv``.

    ``configs`` maps a label to a :class:`TrainConfig`. Returns
    ``{label: {"runs": {seed: metrics}, "failures": {seed: msg}, "mean": ..., "std": ...}}``.
    """
    if not seeds:
        raise DomainError("run_suite needs at least one seed")
    if isinstance(configs, TrainConfig):
        configs = {configs.mode: configs}
    out = Path(out_dir)
    jobs, keys = [], []
    for label, cfg in configs.items():
        for s in seeds:
            jobs.append((cfg.replace(seed=int(s), out_dir=None), str(out / label / f"seed_{s}")))
            keys.append(label)
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_suite_job, jobs))
    else:
        results = [_suite_job(j) for j in jobs]
    summary: dict = {}
    for label, (seed, metrics, err) in zip(keys, results):
        entry = summary.setdefault(label, {"runs": {}, "failures": {}})
        if err is None:
            entry["runs"][seed] = metrics
        else:
            entry["failures"][seed] = err
            log.warning("run %s seed %s failed: %s", label, seed, err)
    lines = ["label,metric,mean,std,n"]
    for label, entry in summary.items():
        entry["mean"], entry["std"] = {}, {}
        for m in SUMMARY_METRICS:
            vals = np.array([r[m] for r in entry["runs"].values()], dtype=np.float64)
            entry["mean"][m] = float(vals.mean()) if vals.size else float("nan")
            entry["std"][m] = float(vals.std()) if vals.size else float("nan")
            lines.append(f"{label},{m},{_fmt(entry['mean'][m])},{_fmt(entry['std'][m])},{vals.size}")
        for seed, err in entry["failures"].items():
            lines.append(f"{label},failed_seed_{seed},nan,nan,0")
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.csv").write_text("\n".join(lines) + "\n")
    return summary
