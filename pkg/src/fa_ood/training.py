"""Few-shot sampling, the forced-prompt optimiser, evaluation and ablations.

Optimisation follows the CoOp-style recipe: SGD with momentum and weight
decay on the forced context only, per-step cosine learning-rate decay, and
fixed-epoch training without model selection. Parameters are held as
float32 (the bank precision); the update arithmetic and momentum buffer are
float64.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import BenchmarkSpec, DatasetManifest, EncodedDataset, encode_manifest
from .errors import ConfigError, DataError, NumericError
from .metrics import MetricsReport, build_report
from .objective import ce_batch, fce_k_batch
from .prompts import DualPromptBank, build_dual_prompts, check_k, trainable_parameters
from .scoring import ScoreConfig, predict_class, score_batch

log = logging.getLogger(__name__)

OBJECTIVES = ("fce_k", "ce")


@dataclass(frozen=True)
class TrainConfig:
    shots: int = 16
    epochs: int = 50
    lr: float = 2e-3
    batch_size: int = 160
    momentum: float = 0.9
    weight_decay: float = 5e-4
    K: float = 3
    tau: float = 1.0
    seed: int = 0
    schedule: str = "cosine"
    objective: str = "fce_k"

    def __post_init__(self):
        if self.shots < 1:
            raise ConfigError(f"shots must be >= 1, got {self.shots}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not self.lr > 0 or not self.tau > 0:
            raise ConfigError("lr and tau must be > 0")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.schedule != "cosine":
            raise ConfigError(f"unsupported schedule {self.schedule!r}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}")
        check_k(self.K)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def default_epochs(shots: int, num_classes: int) -> int:
    """30 / 50 epochs (1-shot / more) on ImageNet-scale label sets, 200 otherwise."""
    if num_classes >= 1000:
        return 30 if shots == 1 else 50
    return 200


@dataclass
class TrainLog:
    epoch_loss: list = field(default_factory=list)
    epoch_lr: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)
    similarity_gap: float = 0.0
    steps: int = 0

    def to_csv(self) -> str:
        lines = ["epoch,mean_loss,lr"]
        for i, (l, r) in enumerate(zip(self.epoch_loss, self.epoch_lr)):
            lines.append(f"{i},{l!r},{r!r}")
        return "\n".join(lines) + "\n"


def sample_few_shot(manifest: DatasetManifest, shots: int, seed: int) -> list:
    """``shots`` training entries per class, as (entry index, label) pairs.

    Classes are visited in index order and the picks are returned in
    manifest order within each class.
    """
    if shots < 1:
        raise ConfigError(f"shots must be >= 1, got {shots}")
    by_class: dict[int, list] = {c: [] for c in range(manifest.num_classes)}
    for i, e in enumerate(manifest.entries):
        if e.split == "train":
            by_class[e.label].append(i)
    rng = np.random.default_rng(seed)
    out = []
    for c, idx in by_class.items():
        if len(idx) < shots:
            raise DataError(
                f"class {manifest.class_names[c]!r} has {len(idx)} training examples, {shots} shots requested"
            )
        pick = np.sort(rng.choice(len(idx), size=shots, replace=False))
        out.extend((idx[j], c) for j in pick)
    return out


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps < 1 or not 0 <= step < total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps})")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def similarity_gap(bank: DualPromptBank, backend, features: np.ndarray, labels: np.ndarray) -> float:
    """Mean over samples of cos(z, t_f[y]) - cos(z, t_o[y])."""
    T_f, T_o = backend.encode_text(bank.forced), backend.encode_text(bank.original)
    rows = np.arange(len(labels))
    return float(np.mean((features @ T_f.T)[rows, labels] - (features @ T_o.T)[rows, labels]))


def train(cfg: TrainConfig, bank: DualPromptBank, backend, features, labels) -> tuple[DualPromptBank, TrainLog]:
    """Optimise ``bank.forced`` in place on global image ``features`` (n, d).

    Returns the same bank object and the training log.
    """
    if cfg.K != bank.K:
        raise ConfigError(f"bank was built with K={bank.K}, config has K={cfg.K}")
    Z = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if Z.ndim != 2 or len(Z) != len(y) or len(y) == 0:
        raise DataError(f"training data: features {Z.shape}, labels {y.shape}")

    n = len(y)
    per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * per_epoch
    rng = np.random.default_rng(cfg.seed)
    param = trainable_parameters(bank)
    T_o = backend.encode_text(bank.original)
    tlog = TrainLog()
    with np.errstate(over="ignore", invalid="ignore"):
        _run_epochs(cfg, bank, backend, Z, y, T_o, param, total, per_epoch, rng, tlog)
    tlog.similarity_gap = similarity_gap(bank, backend, Z, y)
    return bank, tlog


def _run_epochs(cfg, bank, backend, Z, y, T_o, param, total, per_epoch, rng, tlog) -> None:
    """SGD loop; non-finite values abort with NumericError rather than warn."""
    n = len(y)
    buf = None
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        losses = []
        epoch_lr = cosine_lr(step, total, cfg.lr)
        for b in range(per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            Zb, yb = Z[idx], y[idx]
            T_f, vjp = backend.encode_text_vjp(bank.forced)
            S_f = Zb @ T_f.T
            if cfg.objective == "ce":
                loss, gS = ce_batch(S_f, yb, cfg.tau)
            else:
                loss, gS = fce_k_batch(S_f, Zb @ T_o.T, yb, cfg.tau, cfg.K)
            if not np.all(np.isfinite(loss)):
                raise NumericError(f"non-finite loss at step {step} (epoch {epoch}, batch {b})")
            grad = vjp(gS.T @ Zb)
            if not np.all(np.isfinite(grad)):
                raise NumericError(f"non-finite gradient at step {step} (epoch {epoch}, batch {b})")
            p = param.astype(np.float64)
            g = grad + cfg.weight_decay * p
            buf = g if buf is None else cfg.momentum * buf + g
            new = (p - cosine_lr(step, total, cfg.lr) * buf).astype(np.float32)
            if not np.all(np.isfinite(new)):
                raise NumericError(f"parameter overflow at step {step} (epoch {epoch}, batch {b})")
            param[...] = new
            losses.append(loss)
            step += 1
        tlog.epoch_loss.append(float(np.mean(np.concatenate(losses))))
        tlog.epoch_lr.append(epoch_lr)
        tlog.epoch_seconds.append(time.perf_counter() - t0)
        log.debug("epoch %d loss %.6f lr %.3g", epoch, tlog.epoch_loss[-1], epoch_lr)
    tlog.steps = step


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class BenchmarkData:
    """Encoded features of one benchmark: the full ID manifest and each OOD set."""

    id_manifest: DatasetManifest
    id_all: EncodedDataset
    ood: dict  # name -> EncodedDataset, benchmark order

    @property
    def class_names(self) -> list:
        return self.id_manifest.class_names

    @property
    def id_test(self) -> EncodedDataset:
        return self.id_all.subset("test")

    @property
    def num_locals(self) -> int:
        return self.id_all.locals_.shape[1]


def encode_benchmark(bench: BenchmarkSpec, image_backend_for) -> BenchmarkData:
    """Encode every manifest; ``image_backend_for(manifest)`` picks the image encoder."""
    id_all = encode_manifest(bench.id_dataset, image_backend_for(bench.id_dataset))
    ood = {m.name: encode_manifest(m, image_backend_for(m)) for m in bench.ood_datasets}
    return BenchmarkData(bench.id_dataset, id_all, ood)


def few_shot_arrays(data: BenchmarkData, shots: int, seed: int):
    picks = sample_few_shot(data.id_manifest, shots, seed)
    idx = np.array([i for i, _ in picks], dtype=np.int64)
    return data.id_all.globals_[idx], data.id_all.labels[idx]


def score_dataset(bank: DualPromptBank, backend, ds: EncodedDataset, cfg: ScoreConfig, text=None):
    T_f, T_o = text if text is not None else (backend.encode_text(bank.forced), backend.encode_text(bank.original))
    scores = score_batch(ds.globals_, ds.locals_, T_f, T_o, cfg)
    return scores, np.atleast_1d(predict_class(ds.globals_, T_f))


def evaluate_bank(
    bank: DualPromptBank, backend, data: BenchmarkData, score_kind: str = "MCM", tau0: float = 1.0, **score_options
) -> MetricsReport:
    cfg = ScoreConfig(tau0=tau0, K=bank.K, score_kind=score_kind, **score_options)
    if cfg.score_kind == "GL_MCM" and data.num_locals == 0:
        raise ConfigError("GL-MCM needs local features but the image features have N = 0; use --score mcm")
    text = (backend.encode_text(bank.forced), backend.encode_text(bank.original))
    test = data.id_test
    id_scores, preds = score_dataset(bank, backend, test, cfg, text)
    ood = {name: score_dataset(bank, backend, ds, cfg, text)[0] for name, ds in data.ood.items()}
    return build_report(id_scores, ood, preds, test.labels)


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

SUITES = ("fce_vs_ce", "init_modes", "shared_vector", "k_sweep")


@dataclass(frozen=True)
class Arm:
    label: str
    K: float
    objective: str = "fce_k"
    init_mode: str = "manual"
    original_init_mode: str = "manual"
    shared: bool = True


def _tick(flag: bool) -> str:
    return "M" if flag else "-"


def ablation_arms(suite: str, base: TrainConfig, k_list: Sequence[float] = range(7)) -> list:
    if suite == "fce_vs_ce":
        return [Arm("FA_CE", base.K, objective="ce"), Arm("FA_FCE-K", base.K)]
    if suite == "init_modes":
        grid = [(False, False), (True, False), (False, True), (True, True)]
        return [
            Arm(
                f"forced={_tick(f)} original={_tick(o)}", base.K,
                init_mode="manual" if f else "random",
                original_init_mode="manual" if o else "random",
            )
            for f, o in grid
        ]
    if suite == "shared_vector":
        grid = [(False, False), (True, False), (False, True), (True, True)]
        return [
            Arm(
                f"shared={'Y' if s else '-'} init={_tick(m)}", base.K,
                init_mode="manual" if m else "random", shared=s,
            )
            for s, m in grid
        ]
    if suite == "k_sweep":
        arms = []
        for k in k_list:
            check_k(k)
            arms.append(Arm("CoOp (K=0)" if k == 0 else f"K={k:g}", k))
        return arms
    raise ConfigError(f"unknown ablation suite {suite!r}; choose from {SUITES}")


@dataclass
class AblationRow:
    arm: Arm
    reports: dict  # score kind -> list of per-seed MetricsReport
    gaps: list

    def mean(self, kind: str, metric: str) -> float:
        return float(np.mean([getattr(r, metric) for r in self.reports[kind]]))

    def std(self, kind: str, metric: str) -> float:
        return float(np.std([getattr(r, metric) for r in self.reports[kind]]))


def train_arm(arm: Arm, base: TrainConfig, backend, data: BenchmarkData, seed: int):
    cfg = replace(base, K=arm.K, objective=arm.objective, seed=seed)
    bank = build_dual_prompts(
        data.class_names, backend.spec, init_mode=arm.init_mode, shared=arm.shared,
        K=arm.K, seed=seed, original_init_mode=arm.original_init_mode,
    )
    Z, y = few_shot_arrays(data, cfg.shots, seed)
    return train(cfg, bank, backend, Z, y)


def run_ablation(
    suite: str,
    base_cfg: TrainConfig,
    data: BenchmarkData,
    backend,
    seeds: Sequence[int] = (0,),
    k_list: Sequence[float] = range(7),
    tau0: float = 1.0,
) -> list:
    """Train and evaluate every arm of ``suite`` under identical seeds."""
    kinds = ["MCM"] + (["GL_MCM"] if data.num_locals else [])
    rows = []
    for arm in ablation_arms(suite, base_cfg, k_list):
        reports = {k: [] for k in kinds}
        gaps = []
        for seed in seeds:
            bank, tlog = train_arm(arm, base_cfg, backend, data, seed)
            gaps.append(tlog.similarity_gap)
            for k in kinds:
                reports[k].append(evaluate_bank(bank, backend, data, k, tau0))
        rows.append(AblationRow(arm, reports, gaps))
        log.info("%s: %s", suite, arm.label)
    return rows


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    kinds = list(rows[0].reports)
    head = ["arm", "K", "objective", "forced_init", "original_init", "shared"]
    for k in kinds:
        tag = k.lower().replace("_", "")
        head += [f"{tag}_fpr95", f"{tag}_auroc", f"{tag}_fpr95_std", f"{tag}_auroc_std"]
    head += ["id_top1", "similarity_gap"]
    lines = [",".join(head)]
    for r in rows:
        a = r.arm
        cells = [a.label, f"{a.K:g}", a.objective, a.init_mode, a.original_init_mode, str(a.shared).lower()]
        for k in kinds:
            cells += [f"{r.mean(k, 'fpr95'):.6f}", f"{r.mean(k, 'auroc'):.6f}",
                      f"{r.std(k, 'fpr95'):.6f}", f"{r.std(k, 'auroc'):.6f}"]
        cells += [f"{r.mean(kinds[0], 'id_top1'):.6f}", f"{np.mean(r.gaps):.6f}"]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
