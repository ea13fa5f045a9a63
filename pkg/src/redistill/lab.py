"""Desk-scale distillation experiments: noisy teachers, sweeps, comparisons.

A run is a pure function of (config, seed): the dataset draw, both network
initializations, batch order, and noise injection all derive from the run
seed, so matched-seed comparisons across losses share everything except the
objective.  Teacher corruption happens on the fly per (sample, epoch) draw,
modelling per-prediction unreliability; `fixed_per_sample` freezes the draw
to model a systematically wrong teacher instead.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import DatasetSpec, LabeledDataset, generate
from .loss import (
    RedistillConfig,
    cross_entropy_loss_batch,
    kd_loss_batch,
    redistill_loss_batch,
)
from .neural import (
    Mlp,
    MlpSpec,
    SgdConfig,
    backward_batch,
    forward_batch,
    init_mlp,
    lr_at_epoch,
    sgd_step,
    zero_velocity,
)
from .robust import sign_test_pvalue

__all__ = [
    "ABORT_LOSS_THRESHOLD",
    "LOSS_KINDS",
    "NoiseModel",
    "ExperimentConfig",
    "RunRecord",
    "SweepCell",
    "ComparisonReport",
    "corrupt_teacher_logits",
    "train_teacher",
    "distill_student",
    "lambda_sweep",
    "compare_losses",
    "default_experiment_config",
]

LOSS_KINDS = ("cross_entropy", "kd", "dkd", "redistill")
_NOISE_KINDS = ("none", "label_flip", "logit_bump", "logit_dip", "overconfidence")

# A batch loss above this (or any non-finite loss) aborts the run with a
# diagnostic record instead of crashing: extreme orders can overflow.
ABORT_LOSS_THRESHOLD = 1e6


@dataclass(frozen=True)
class NoiseModel:
    """Teacher corruption: which fraction of predictions degrade, and how."""

    kind: str = "none"
    rate: float = 0.0
    magnitude: float = 0.0
    fixed_per_sample: bool = False

    def __post_init__(self):
        if self.kind not in _NOISE_KINDS:
            raise ValueError(f"kind must be one of {_NOISE_KINDS}, got {self.kind!r}")
        if not (0.0 <= self.rate <= 1.0):
            raise ValueError(f"rate must be in [0, 1], got {self.rate}")
        if self.magnitude < 0:
            raise ValueError(f"magnitude must be >= 0, got {self.magnitude}")
        if self.kind == "none" and self.rate != 0.0:
            raise ValueError("kind 'none' forces rate = 0")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "rate": self.rate, "magnitude": self.magnitude,
                "fixed_per_sample": self.fixed_per_sample}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseModel":
        return cls(d.get("kind", "none"), float(d.get("rate", 0.0)),
                   float(d.get("magnitude", 0.0)), bool(d.get("fixed_per_sample", False)))


def corrupt_teacher_logits(logits, label: int, noise: NoiseModel,
                           rng: np.random.Generator) -> np.ndarray:
    """Corrupt one teacher prediction with probability ``noise.rate``.

    label_flip swaps the top-1 logit with a uniformly chosen other class,
    logit_bump raises one uniformly chosen wrong class by ``magnitude``,
    logit_dip lowers the true class by ``magnitude``, and overconfidence
    rescales all logits by ``1 + magnitude``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if noise.kind == "none" or noise.rate == 0.0:
        return logits
    if rng.random() >= noise.rate:
        return logits
    out = logits.copy()
    k = logits.size
    if noise.kind == "label_flip":
        top = int(np.argmax(logits))
        other = int(rng.integers(k - 1))
        if other >= top:
            other += 1
        out[top], out[other] = out[other], out[top]
    elif noise.kind == "logit_bump":
        wrong = int(rng.integers(k - 1))
        if wrong >= label:
            wrong += 1
        out[wrong] += noise.magnitude
    elif noise.kind == "logit_dip":
        out[label] -= noise.magnitude
    else:  # overconfidence
        out *= 1.0 + noise.magnitude
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs; seeds index the repeats.

    For ``loss="kd"`` the non-decoupled baseline maps ``hard_weight`` to the
    hard coefficient and ``alpha`` to the soft coefficient of the plain
    teacher-matching KL term (``beta`` is unused).
    """

    dataset: DatasetSpec
    teacher_spec: MlpSpec
    student_spec: MlpSpec
    teacher_train: SgdConfig
    student_train: SgdConfig
    loss: str = "redistill"
    loss_config: RedistillConfig = field(default_factory=RedistillConfig)
    noise: NoiseModel = field(default_factory=NoiseModel)
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        for name, spec in (("teacher_spec", self.teacher_spec), ("student_spec", self.student_spec)):
            if spec.input_dim != self.dataset.features:
                raise ValueError(f"{name}.input_dim={spec.input_dim} does not match "
                                 f"dataset.features={self.dataset.features}")
            if spec.num_classes != self.dataset.num_classes:
                raise ValueError(f"{name}.num_classes={spec.num_classes} does not match "
                                 f"dataset.num_classes={self.dataset.num_classes}")

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset.to_dict(),
            "teacher_spec": self.teacher_spec.to_dict(),
            "student_spec": self.student_spec.to_dict(),
            "teacher_train": self.teacher_train.to_dict(),
            "student_train": self.student_train.to_dict(),
            "loss": self.loss,
            "loss_config": self.loss_config.to_dict(),
            "noise": self.noise.to_dict(),
            "seeds": list(self.seeds),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(
            dataset=DatasetSpec.from_dict(d["dataset"]),
            teacher_spec=MlpSpec.from_dict(d["teacher_spec"]),
            student_spec=MlpSpec.from_dict(d["student_spec"]),
            teacher_train=SgdConfig.from_dict(d["teacher_train"]),
            student_train=SgdConfig.from_dict(d["student_train"]),
            loss=d.get("loss", "redistill"),
            loss_config=RedistillConfig.from_dict(d.get("loss_config", {})),
            noise=NoiseModel.from_dict(d.get("noise", {})),
            seeds=tuple(d.get("seeds", (0,))),
        )


@dataclass
class RunRecord:
    """Persisted result of one training run."""

    role: str
    loss: str
    seed: int
    lambda_: float | None
    train_loss: list[float]
    val_accuracy: list[float]
    final_accuracy: float
    wall_time_s: float
    corrupted_fraction: float
    aborted: bool = False
    abort_reason: str | None = None
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "role": self.role,
            "loss": self.loss,
            "seed": self.seed,
            "lambda": self.lambda_,
            "train_loss": self.train_loss,
            "val_accuracy": self.val_accuracy,
            "final_accuracy": self.final_accuracy,
            "wall_time_s": self.wall_time_s,
            "corrupted_fraction": self.corrupted_fraction,
            "aborted": self.aborted,
            "abort_reason": self.abort_reason,
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(
            role=d["role"],
            loss=d["loss"],
            seed=int(d["seed"]),
            lambda_=d.get("lambda"),
            train_loss=list(d["train_loss"]),
            val_accuracy=list(d["val_accuracy"]),
            final_accuracy=float(d["final_accuracy"]),
            wall_time_s=float(d["wall_time_s"]),
            corrupted_fraction=float(d.get("corrupted_fraction", 0.0)),
            aborted=bool(d.get("aborted", False)),
            abort_reason=d.get("abort_reason"),
            config=dict(d.get("config", {})),
        )


def dataset_for_seed(config: ExperimentConfig, seed: int) -> LabeledDataset:
    """Each run seed draws its own dataset; matched seeds share the draw."""
    return generate(config.dataset.with_seed(config.dataset.seed + seed))


def _accuracy(model: Mlp, x: np.ndarray, y: np.ndarray) -> float:
    if x.shape[0] == 0:
        return float("nan")
    logits = forward_batch(model, x)
    return float(np.mean(np.argmax(logits, axis=1) == y))


class _RunAborted(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


def _train(spec: MlpSpec, train_cfg: SgdConfig, data: LabeledDataset, seed: int,
           init_stream: int, batch_loss, epoch_teacher) -> tuple[Mlp, dict]:
    """Shared SGD loop; ``epoch_teacher(epoch)`` supplies per-sample teacher rows or None."""
    model = init_mlp(spec, [seed, init_stream])
    velocity = zero_velocity(model)
    shuffle_rng = np.random.default_rng([seed, 17])
    x_train, y_train = data.train_features, data.train_labels
    n = x_train.shape[0]
    batch = train_cfg.batch_size
    train_losses: list[float] = []
    val_accs: list[float] = []
    aborted, reason = False, None
    start = time.perf_counter()
    for epoch in range(train_cfg.epochs):
        lr = lr_at_epoch(train_cfg, epoch)
        teacher_rows = epoch_teacher(epoch)
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        try:
            for lo in range(0, n, batch):
                idx = order[lo: lo + batch]
                logits, cache = forward_batch(model, x_train[idx], return_cache=True)
                t_rows = None if teacher_rows is None else teacher_rows[idx]
                losses, logit_grads = batch_loss(logits, t_rows, y_train[idx])
                mean_loss = float(losses.mean())
                if not np.isfinite(mean_loss) or mean_loss > ABORT_LOSS_THRESHOLD:
                    raise _RunAborted(f"loss diverged at epoch {epoch} "
                                      f"(batch mean {mean_loss!r})")
                if not np.all(np.isfinite(logit_grads)):
                    raise _RunAborted(f"non-finite gradient at epoch {epoch}")
                epoch_loss += mean_loss * idx.size
                grads = backward_batch(model, cache, logit_grads)
                sgd_step(model, grads, velocity, train_cfg, lr)
        except _RunAborted as exc:
            aborted, reason = True, exc.reason
            break
        train_losses.append(epoch_loss / n)
        val_accs.append(_accuracy(model, data.val_features, data.val_labels))
    info = {
        "train_loss": train_losses,
        "val_accuracy": val_accs,
        "final_accuracy": _accuracy(model, data.val_features, data.val_labels),
        "wall_time_s": time.perf_counter() - start,
        "aborted": aborted,
        "abort_reason": reason,
    }
    return model, info


def train_teacher(config: ExperimentConfig, seed: int) -> tuple[Mlp, RunRecord]:
    """Cross-entropy training of the teacher network on the seed's dataset."""
    data = dataset_for_seed(config, seed)

    def batch_loss(logits, _teacher_rows, labels):
        return cross_entropy_loss_batch(logits, labels)

    model, info = _train(config.teacher_spec, config.teacher_train, data, seed,
                         init_stream=0, batch_loss=batch_loss, epoch_teacher=lambda _: None)
    record = RunRecord(role="teacher", loss="cross_entropy", seed=seed, lambda_=None,
                       corrupted_fraction=0.0, config=config.to_dict(), **info)
    return model, record


def _corrupted_teacher_rows(clean: np.ndarray, labels: np.ndarray, noise: NoiseModel,
                            rng: np.random.Generator):
    rows = np.empty_like(clean)
    changed = 0
    for i in range(clean.shape[0]):
        row = corrupt_teacher_logits(clean[i], int(labels[i]), noise, rng)
        if row is not clean[i] and not np.array_equal(row, clean[i]):
            changed += 1
        rows[i] = row
    return rows, changed


def distill_student(config: ExperimentConfig, teacher: Mlp | None,
                    seed: int) -> tuple[Mlp, RunRecord]:
    """Train the student under the configured loss against (possibly noisy) teacher logits."""
    data = dataset_for_seed(config, seed)
    loss_kind = config.loss
    cfg = config.loss_config
    if loss_kind != "cross_entropy" and teacher is None:
        raise ValueError(f"loss {loss_kind!r} needs a trained teacher")

    clean_rows = None
    if loss_kind != "cross_entropy":
        clean_rows = forward_batch(teacher, data.train_features)
    noise_rng = np.random.default_rng([seed, 29])
    corruption = {"count": 0, "samples": 0, "fixed_rows": None}

    def epoch_teacher(epoch: int):
        if clean_rows is None:
            return None
        if config.noise.kind == "none" or config.noise.rate == 0.0:
            return clean_rows
        if config.noise.fixed_per_sample:
            if corruption["fixed_rows"] is None:
                rows, changed = _corrupted_teacher_rows(clean_rows, data.train_labels,
                                                        config.noise, noise_rng)
                corruption["fixed_rows"] = rows
                corruption["count"] += changed
                corruption["samples"] += clean_rows.shape[0]
            return corruption["fixed_rows"]
        rows, changed = _corrupted_teacher_rows(clean_rows, data.train_labels,
                                                config.noise, noise_rng)
        corruption["count"] += changed
        corruption["samples"] += clean_rows.shape[0]
        return rows

    if loss_kind == "cross_entropy":
        def batch_loss(logits, _rows, labels):
            return cross_entropy_loss_batch(logits, labels)
    elif loss_kind == "kd":
        def batch_loss(logits, rows, labels):
            return kd_loss_batch(logits, rows, labels,
                                 c1=cfg.hard_weight, c2=cfg.alpha, tau=cfg.tau)
    else:
        effective = cfg.with_lambda(0.0) if loss_kind == "dkd" else cfg

        def batch_loss(logits, rows, labels):
            return redistill_loss_batch(logits, rows, labels, effective)

    model, info = _train(config.student_spec, config.student_train, data, seed,
                         init_stream=1, batch_loss=batch_loss, epoch_teacher=epoch_teacher)
    lambda_ = None
    if loss_kind == "dkd":
        lambda_ = 0.0
    elif loss_kind == "redistill":
        lambda_ = cfg.lambda_
    fraction = corruption["count"] / corruption["samples"] if corruption["samples"] else 0.0
    record = RunRecord(role="student", loss=loss_kind, seed=seed, lambda_=lambda_,
                       corrupted_fraction=fraction, config=config.to_dict(), **info)
    return model, record


@dataclass
class SweepCell:
    lambda_: float
    mean_accuracy: float
    std_accuracy: float
    n_seeds: int
    accuracies: list[float]
    errors: list[str]

    def to_dict(self) -> dict:
        return {
            "lambda": self.lambda_,
            "mean_accuracy": self.mean_accuracy,
            "std_accuracy": self.std_accuracy,
            "n_seeds": self.n_seeds,
            "accuracies": self.accuracies,
            "errors": self.errors,
        }


def _teacher_pool(config: ExperimentConfig) -> dict[int, Mlp]:
    return {seed: train_teacher(config, seed)[0] for seed in config.seeds}


def lambda_sweep(config: ExperimentConfig, lambdas,
                 records_out: list[RunRecord] | None = None) -> list[SweepCell]:
    """Run the redistill objective across divergence orders, seed-matched.

    Teachers are trained once per seed and shared by every order.  Per-cell
    failures (aborted or crashed runs) are recorded, not fatal.
    """
    lambdas = [float(v) for v in lambdas]
    if len(lambdas) < 2:
        raise ValueError("a sweep needs at least 2 lambda values")
    if len(config.seeds) < 3:
        raise ValueError("a sweep needs at least 3 seeds")
    teachers = _teacher_pool(config)
    cells = []
    for lam in sorted(lambdas):
        run_config = replace(config, loss="redistill",
                             loss_config=config.loss_config.with_lambda(lam))
        accs, errors = [], []
        for seed in config.seeds:
            try:
                _, record = distill_student(run_config, teachers[seed], seed)
            except Exception as exc:  # recorded per cell, not fatal
                errors.append(f"seed {seed}: {type(exc).__name__}: {exc}")
                continue
            if records_out is not None:
                records_out.append(record)
            if record.aborted:
                errors.append(f"seed {seed}: aborted: {record.abort_reason}")
            else:
                accs.append(record.final_accuracy)
        mean = float(np.mean(accs)) if accs else float("nan")
        std = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
        cells.append(SweepCell(lam, mean, std, len(accs), accs, errors))
    return cells


@dataclass
class ComparisonReport:
    methods: dict[str, dict]
    pairwise: list[dict]

    def to_dict(self) -> dict:
        return {"methods": self.methods, "pairwise": self.pairwise}


def compare_losses(config: ExperimentConfig,
                   records_out: list[RunRecord] | None = None) -> ComparisonReport:
    """Seed-matched comparison of kd, dkd, and redistill under one protocol."""
    methods = ("kd", "dkd", "redistill")
    teachers = _teacher_pool(config)
    accs: dict[str, dict[int, float]] = {m: {} for m in methods}
    failures: dict[str, list[str]] = {m: [] for m in methods}
    for seed in config.seeds:
        for method in methods:
            run_config = replace(config, loss=method)
            try:
                _, record = distill_student(run_config, teachers[seed], seed)
            except Exception as exc:
                failures[method].append(f"seed {seed}: {type(exc).__name__}: {exc}")
                continue
            if records_out is not None:
                records_out.append(record)
            if record.aborted:
                failures[method].append(f"seed {seed}: aborted: {record.abort_reason}")
            else:
                accs[method][seed] = record.final_accuracy
    summary = {}
    for method in methods:
        values = list(accs[method].values())
        summary[method] = {
            "mean_accuracy": float(np.mean(values)) if values else float("nan"),
            "std_accuracy": float(np.std(values, ddof=1)) if len(values) > 1 else 0.0,
            "n_seeds": len(values),
            "errors": failures[method],
        }
    pairwise = []
    for first, second in (("redistill", "dkd"), ("redistill", "kd"), ("dkd", "kd")):
        shared = sorted(set(accs[first]) & set(accs[second]))
        diffs = [accs[first][s] - accs[second][s] for s in shared]
        pairwise.append({
            "first": first,
            "second": second,
            "seeds": shared,
            "differences": diffs,
            "median_difference": float(np.median(diffs)) if diffs else float("nan"),
            "wins": int(sum(d > 0 for d in diffs)),
            "losses": int(sum(d < 0 for d in diffs)),
            "ties": int(sum(d == 0 for d in diffs)),
            "sign_test_p": sign_test_pvalue(diffs),
        })
    return ComparisonReport(summary, pairwise)


def default_experiment_config(loss: str = "redistill", noise: NoiseModel | None = None,
                              seeds=(0, 1, 2, 3, 4, 5, 6, 7, 8, 9)) -> ExperimentConfig:
    """Desk-scale default benchmark: 10-class Gaussian blobs, scaled-down recipe.

    The schedule is a proportional shrink of the reference image-classifier
    recipe (240 epochs with decays at 150/180/210 becomes 40 epochs with
    decays at 25/32).
    """
    sgd = SgdConfig(learning_rate=0.05, momentum=0.9, weight_decay=5e-4, epochs=40,
                    batch_size=64, lr_decay_epochs=(25, 32), lr_decay_factor=0.1)
    return ExperimentConfig(
        dataset=DatasetSpec(kind="gaussian_blobs", num_classes=10, features=20,
                            train_size=2000, val_size=500, class_separation=2.2, seed=0),
        teacher_spec=MlpSpec(20, (256, 128), 10),
        student_spec=MlpSpec(20, (32,), 10),
        teacher_train=sgd,
        student_train=sgd,
        loss=loss,
        loss_config=RedistillConfig(),
        noise=noise or NoiseModel(),
        seeds=seeds,
    )
