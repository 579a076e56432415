"""Command-line interface: ``fa-ood {train,eval,score,sweep-k,ablate}``.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric abort.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backend import CacheBackend
from .data import BenchmarkSpec, cache_embeddings, resolve_benchmark, toy_backend_for
from .errors import ConfigError, DataError, NumericError
from .prompts import build_dual_prompts, load_bank, num_trainable_parameters, save_bank
from .scoring import ScoreConfig
from .training import (
    SUITES,
    TrainConfig,
    ablation_csv,
    default_epochs,
    encode_benchmark,
    evaluate_bank,
    few_shot_arrays,
    run_ablation,
    score_dataset,
    train,
)

log = logging.getLogger("fa_ood")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
SCORES = {"mcm": "MCM", "glmcm": "GL_MCM"}
INDEPENDENT_INIT_NOTE = "independent contexts: every per-class copy starts from the same initialisation"


@dataclass
class RunArtifact:
    run_id: str
    config: dict
    bank_path: Path | None = None
    reports: dict = field(default_factory=dict)
    files: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# argument helpers
# ---------------------------------------------------------------------------

def _k_value(text: str, fractional: bool = False):
    try:
        k = float(text) if fractional else int(text)
    except ValueError:
        raise ConfigError(f"K must be {'a number' if fractional else 'an integer'}, got {text!r}") from None
    if k < 0:
        raise ConfigError(f"K must be >= 0, got {text}")
    return k


def parse_k_list(text: str, fractional: bool = False) -> list:
    """``"0,1,3,6"`` or ``"0..6"`` (inclusive) or a mix of both."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = (int(_k_value(p)) for p in part.split(".."))
            if hi < lo:
                raise ConfigError(f"empty K range {part!r}")
            out.extend(range(lo, hi + 1))
        elif part:
            out.append(_k_value(part, fractional))
    if not out:
        raise ConfigError("--k-list is empty")
    return out


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--benchmark", default="toy", help="registry benchmark name (default: toy)")
    p.add_argument("--registry", default=None, help="benchmark registry JSON (default: bundled)")
    p.add_argument("--data-root", default=None, help="root for registry paths (default: $FA_OOD_DATA_ROOT or ./fa_ood_data)")
    p.add_argument("--backend", choices=["toy", "cache", "clip-adapter"], default="toy",
                   help="encoder backend (default: toy)")
    p.add_argument("--cache-dir", default=None, help="FAEMB1 cache directory for --backend cache (default: <data-root>/cache/<benchmark>)")
    p.add_argument("--out", default="runs", help="output directory (default: runs)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_train_flags(p: argparse.ArgumentParser, with_k: bool = True) -> None:
    p.add_argument("--shots", type=int, default=16, help="examples per class (default: 16)")
    if with_k:
        p.add_argument("--k", default="3", help="forced coefficient K (default: 3)")
    p.add_argument("--fractional-k", action="store_true", help="accept non-integer K values")
    p.add_argument("--tau", type=float, default=1.0, help="training temperature (default: 1)")
    p.add_argument("--epochs", type=int, default=None,
                   help="epochs (default: 30/50 for 1-shot/other on >=1000 classes, else 200)")
    p.add_argument("--lr", type=float, default=2e-3, help="learning rate (default: 2e-3)")
    p.add_argument("--batch-size", type=int, default=160, help="batch size (default: 160)")
    p.add_argument("--momentum", type=float, default=0.9, help="SGD momentum (default: 0.9)")
    p.add_argument("--weight-decay", type=float, default=5e-4, help="SGD weight decay (default: 5e-4)")
    p.add_argument("--init-mode", choices=["manual", "random"], default="manual",
                   help="forced-prompt initialisation (default: manual, 'a photo of a')")
    p.add_argument("--original-init-mode", choices=["manual", "random"], default="manual",
                   help="original-prompt initialisation (default: manual)")
    p.add_argument("--independent", action="store_true",
                   help="one context per class instead of the shared context (default: shared)")
    p.add_argument("--objective", choices=["fce_k", "ce"], default="fce_k",
                   help="training loss (default: fce_k)")


def _add_score_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--score", choices=sorted(SCORES), default="mcm", help="score function (default: mcm)")
    p.add_argument("--tau0", type=float, default=1.0, help="inference temperature (default: 1)")
    p.add_argument("--numerator-k-weighting", action="store_true",
                   help="weight original-prompt candidates by K in the MCM numerator (default: off)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fa-ood",
        description="Few-shot forced-prompt OOD detection: train, evaluate, score, sweep K, ablate.",
        epilog="exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric abort",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a forced prompt and write a bank + run manifest")
    _add_common(p)
    _add_train_flags(p)

    p = sub.add_parser("eval", help="evaluate a trained bank: FPR95 / AUROC / ID accuracy reports")
    _add_common(p)
    _add_score_flags(p)
    p.add_argument("--bank", required=True, help="bank file written by train")
    p.add_argument("--plots", action="store_true", help="write ID-vs-OOD score histograms")

    p = sub.add_parser("score", help="write per-sample scores and predictions for every dataset")
    _add_common(p)
    _add_score_flags(p)
    p.add_argument("--bank", required=True, help="bank file written by train")

    p = sub.add_parser("sweep-k", help="train and evaluate one bank per K value")
    _add_common(p)
    _add_train_flags(p, with_k=False)
    _add_score_flags(p)
    p.add_argument("--k-list", default="0..6", help="K values, e.g. 0,1,3,6 or 0..6 (default: 0..6)")

    p = sub.add_parser("ablate", help="run an ablation suite and write its table")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--suite", choices=SUITES, required=True)
    p.add_argument("--seeds", default=None, help="comma-separated seeds (default: --seed)")
    p.add_argument("--k-list", default="0..6", help="K values for the k_sweep suite (default: 0..6)")
    p.add_argument("--tau0", type=float, default=1.0, help="inference temperature (default: 1)")
    return parser


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _text_backend(args, bench: BenchmarkSpec):
    if args.backend == "clip-adapter" or (args.backend == "cache" and bench.synthetic is None):
        from .clip_adapter import ClipAdapter

        return ClipAdapter()
    if bench.synthetic is None:
        raise ConfigError(f"the toy backend only serves synthetic benchmarks; {bench.name!r} needs --backend clip-adapter")
    return toy_backend_for(bench.synthetic)


def _cache_dir(args, bench: BenchmarkSpec) -> Path:
    return Path(args.cache_dir) if args.cache_dir else bench.root / "cache" / bench.name


def load_inputs(args):
    """Resolve the benchmark, build the backend and encode every dataset."""
    bench = resolve_benchmark(args.benchmark, args.registry, args.data_root)
    text = _text_backend(args, bench)
    if args.backend != "cache":
        return bench, text, encode_benchmark(bench, lambda m: text)
    cache_dir = _cache_dir(args, bench)

    def image_backend(manifest):
        path = cache_dir / f"{manifest.name}.faemb"
        if not path.exists():
            cache_embeddings(manifest, text, path)
        return CacheBackend(path, text)

    return bench, text, encode_benchmark(bench, image_backend)


def _train_config(args, K) -> TrainConfig:
    epochs = args.epochs
    return TrainConfig(
        shots=args.shots, epochs=epochs, lr=args.lr, batch_size=args.batch_size,
        momentum=args.momentum, weight_decay=args.weight_decay, K=K, tau=args.tau,
        seed=args.seed, objective=args.objective,
    )


def _resolve_epochs(args, data) -> None:
    if args.epochs is None:
        args.epochs = default_epochs(args.shots, len(data.class_names))


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _write(path: Path, text: str, files: list) -> None:
    path.write_text(text)
    files.append(str(path))


def _score_cfg(args, K) -> ScoreConfig:
    return ScoreConfig(tau0=args.tau0, K=K, score_kind=SCORES[args.score],
                       numerator_k_weighting=args.numerator_k_weighting)


def _savefig(fig, path: Path, files: list) -> None:
    fig.savefig(path, dpi=100, metadata={"Software": None})
    files.append(str(path))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def train_bank(args, K, data, backend):
    cfg = _train_config(args, K)
    bank = build_dual_prompts(
        data.class_names, backend.spec, init_mode=args.init_mode, shared=not args.independent,
        K=K, seed=args.seed, original_init_mode=args.original_init_mode,
    )
    Z, y = few_shot_arrays(data, cfg.shots, cfg.seed)
    bank, tlog = train(cfg, bank, backend, Z, y)
    return cfg, bank, tlog


def cmd_train(args) -> RunArtifact:
    K = _k_value(args.k, args.fractional_k)
    bench, backend, data = load_inputs(args)
    _resolve_epochs(args, data)
    cfg = _train_config(args, K)
    identity = {
        "config": cfg.to_dict(), "benchmark": bench.name, "backend": args.backend,
        "init_mode": args.init_mode, "original_init_mode": args.original_init_mode,
        "shared": not args.independent,
    }
    run_id = _digest(identity)[:16]
    out = Path(args.out) / run_id
    out.mkdir(parents=True, exist_ok=True)

    cfg, bank, tlog = train_bank(args, K, data, backend)
    art = RunArtifact(run_id, identity, out / "bank.fab")
    bank_sha = save_bank(bank, art.bank_path)
    art.files.append(str(art.bank_path))
    _write(out / "trainlog.csv", tlog.to_csv(), art.files)
    manifest = {
        "run_id": run_id,
        **identity,
        "config_hash": cfg.digest(),
        "seeds": {"train": cfg.seed, "few_shot": cfg.seed, "init": cfg.seed},
        "dataset_hashes": bench.digests(),
        "backend_details": backend.describe(),
        "bank_sha256": bank_sha,
        "trainable_parameters": num_trainable_parameters(bank),
        "steps": tlog.steps,
        "similarity_gap": tlog.similarity_gap,
        "notes": [INDEPENDENT_INIT_NOTE] if args.independent else [],
        "files": sorted([*(Path(f).name for f in art.files), "run.json"]),
    }
    _write(out / "run.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n", art.files)
    log.info("trained %s in %.2fs", run_id, sum(tlog.epoch_seconds))
    print(out)
    return art


def _load_bank_for(args, data):
    path = Path(args.bank)
    if not path.exists():
        raise ConfigError(f"bank file not found: {path}")
    bank = load_bank(path)
    if list(bank.class_names) != list(data.class_names):
        raise ConfigError(f"bank classes do not match benchmark {args.benchmark!r}")
    return bank


def _plot_histograms(path, id_scores, ood_scores: dict, title: str, files: list) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    lo = min(id_scores.min(), *(s.min() for s in ood_scores.values()))
    hi = max(id_scores.max(), *(s.max() for s in ood_scores.values()))
    bins = np.linspace(lo, hi, 50)
    ax.hist(id_scores, bins=bins, alpha=0.6, density=True, label="ID")
    for name, s in ood_scores.items():
        ax.hist(s, bins=bins, alpha=0.5, density=True, label=name)
    ax.set_xlabel("score")
    ax.set_ylabel("density")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    _savefig(fig, path, files)
    plt.close(fig)


def cmd_eval(args) -> RunArtifact:
    bench, backend, data = load_inputs(args)
    bank = _load_bank_for(args, data)
    cfg = _score_cfg(args, bank.K)
    report = evaluate_bank(bank, backend, data, cfg.score_kind, cfg.tau0,
                           numerator_k_weighting=cfg.numerator_k_weighting)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    art = RunArtifact(_digest({"bank": str(args.bank), "score": args.score})[:16], vars(args).copy())
    art.reports[args.score] = report
    _write(out / f"report_{args.score}.csv", report.to_csv(), art.files)
    _write(out / f"report_{args.score}.json", report.to_json(), art.files)
    if args.plots:
        text = (backend.encode_text(bank.forced), backend.encode_text(bank.original))
        id_s = score_dataset(bank, backend, data.id_test, cfg, text)[0]
        ood_s = {n: score_dataset(bank, backend, ds, cfg, text)[0] for n, ds in data.ood.items()}
        _plot_histograms(out / f"hist_{args.score}.png", id_s, ood_s, f"{SCORES[args.score]} scores", art.files)
    print(report.to_csv(), end="")
    return art


def cmd_score(args) -> RunArtifact:
    bench, backend, data = load_inputs(args)
    bank = _load_bank_for(args, data)
    cfg = _score_cfg(args, bank.K)
    if cfg.score_kind == "GL_MCM" and data.num_locals == 0:
        raise ConfigError("GL-MCM needs local features but this backend provides N = 0; use --score mcm")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    art = RunArtifact(_digest({"bank": str(args.bank), "score": args.score})[:16], vars(args).copy())
    text = (backend.encode_text(bank.forced), backend.encode_text(bank.original))
    for ds in [data.id_test, *data.ood.values()]:
        scores, preds = score_dataset(bank, backend, ds, cfg, text)
        lines = ["index,score,predicted_class,truth"]
        lines += [f"{i},{float(s)!r},{int(p)},{int(t)}" for i, (s, p, t) in enumerate(zip(scores, preds, ds.labels))]
        _write(out / f"scores_{ds.name}_{args.score}.csv", "\n".join(lines) + "\n", art.files)
    return art


def _plot_sweep(path, ks, fpr, auc, files) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax1 = plt.subplots(figsize=(6, 4))
    ax1.plot(ks, fpr, "o-", color="tab:blue", label="FPR95")
    ax1.set_xlabel("K")
    ax1.set_ylabel("average FPR95", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(ks, auc, "s-", color="tab:orange", label="AUROC")
    ax2.set_ylabel("average AUROC", color="tab:orange")
    ax1.set_title("sensitivity to the forced coefficient K")
    fig.tight_layout()
    _savefig(fig, path, files)
    plt.close(fig)


def cmd_sweep_k(args) -> RunArtifact:
    ks = parse_k_list(args.k_list, args.fractional_k)
    bench, backend, data = load_inputs(args)
    _resolve_epochs(args, data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    art = RunArtifact(_digest({"k_list": ks, "args": _train_config(args, 0).to_dict()})[:16], {"k_list": ks})
    lines = ["K,label,fpr95,auroc,id_top1,similarity_gap"]
    fprs, aucs = [], []
    for K in ks:
        _, bank, tlog = train_bank(args, K, data, backend)
        cfg = _score_cfg(args, K)
        rep = evaluate_bank(bank, backend, data, cfg.score_kind, cfg.tau0,
                            numerator_k_weighting=cfg.numerator_k_weighting)
        art.reports[K] = rep
        label = "CoOp (K=0)" if K == 0 else f"K={K:g}"
        lines.append(f"{K:g},{label},{rep.fpr95:.6f},{rep.auroc:.6f},{rep.id_top1:.6f},{tlog.similarity_gap:.6f}")
        fprs.append(rep.fpr95)
        aucs.append(rep.auroc)
    _write(out / f"sweep_k_{args.score}.csv", "\n".join(lines) + "\n", art.files)
    _plot_sweep(out / f"sweep_k_{args.score}.png", ks, fprs, aucs, art.files)
    print("\n".join(lines))
    return art


def cmd_ablate(args) -> RunArtifact:
    K = _k_value(args.k, args.fractional_k)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [args.seed]
    bench, backend, data = load_inputs(args)
    _resolve_epochs(args, data)
    k_list = parse_k_list(args.k_list, args.fractional_k)
    base = _train_config(args, K)
    rows = run_ablation(args.suite, base, data, backend, seeds=seeds, k_list=k_list, tau0=args.tau0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    art = RunArtifact(_digest({"suite": args.suite, "base": base.to_dict(), "seeds": seeds})[:16], base.to_dict())
    table = ablation_csv(rows)
    _write(out / f"ablation_{args.suite}.csv", table, art.files)
    print(table, end="")
    return art


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "score": cmd_score,
    "sweep-k": cmd_sweep_k,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
