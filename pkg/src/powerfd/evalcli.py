"""End-to-end experiment driver and command-line interface.

``run_experiment`` chains the pipeline stages (grid, simulate, attack-gen,
windows, train, evaluate) from one experiment configuration, writing every
artifact into an output directory: the dataset container, the training log,
the best checkpoint, a JSON metrics report, and a plain-text results table.
Reruns with the same configuration produce byte-identical artifacts.

The metrics report slices the held-out test set by attack type (A, B, C) and
attacked variable (Vm, Va); each slice shares all clean windows and the
positive slices partition the attacked windows. Alongside the detector the
report carries a logistic-regression baseline trained on the same windows and
a label-shuffled control whose chance-level score guards against leakage.

``main`` exposes the stages as subcommands (``grid validate``, ``simulate``,
``attack-gen``, ``train``, ``eval``, ``detect``, ``gradcheck``) with exit
code 0 on success, 1 on usage errors, and 2 on stage failures.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import scipy.optimize

from . import nncore as nn
from .attack import AttackError
from .dataset import (
    Dataset,
    DatasetConfig,
    DatasetError,
    MeasurementWindow,
    NoiseConfig,
    STEPS_PER_DAY,
    WINDOW_HISTORY,
    build_dataset,
    generate_attacked_frames,
    grid_digest,
    load_dataset,
    save_dataset,
    simulate_timeseries,
    split_train_test,
    synth_profiles,
)
from .detector import (
    DetectorError,
    PowerFdConfig,
    PowerFdModel,
    WindowBatch,
    load_checkpoint,
    train_model,
    windows_to_batch,
)
from .estimation import EstimationError
from .grid import GridError, GridModel, fixture_path, load_grid, validate_grid
from .metrics import DEFAULT_THRESHOLD, confusion, prf
from .powerflow import PowerFlowError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_STAGE = 2

DATASET_FILE = "dataset.bin"
CHECKPOINT_FILE = "checkpoint.bin"
LOG_FILE = "training_log.jsonl"
REPORT_FILE = "report.json"
TABLE_FILE = "tables.txt"

TYPE_SLICES = ("type_a", "type_b", "type_c")
VARIABLE_SLICES = ("vm", "va")
SLICE_NAMES = ("overall",) + TYPE_SLICES + VARIABLE_SLICES

_STAGE_ERRORS = (
    GridError,
    PowerFlowError,
    EstimationError,
    AttackError,
    DatasetError,
    DetectorError,
    ValueError,
    OSError,
)


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names the failing stage."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment run depends on, with desk-scale defaults.

    ``grid`` is a bundled fixture name (``grid4``, ``grid14``) or a path to a
    grid JSON file. Day budgets follow the chronological split convention:
    ``train_days``/``test_days`` default to the 312:54 proportion of ``days``
    and ``val_days`` are carved off the end of the training span.
    """

    grid: str = "grid14"
    days: int = 20
    steps_per_day: int = STEPS_PER_DAY
    window_history: int = WINDOW_HISTORY
    alpha: float = 0.05
    profile_jitter: float = 0.1
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    seed_profiles: int = 7
    seed_simulate: int = 11
    seed_attack: int = 13
    seed_train: int = 17
    seed_balance: int = 19
    seed_control: int = 23
    train_days: int | None = None
    val_days: int = 2
    test_days: int | None = None
    epochs: int = 12
    control_epochs: int = 4
    batch_size: int = 64
    learning_rate: float = 1e-3
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self) -> None:
        if self.days < 3:
            raise ValueError(f"need at least 3 days for a train/val/test split, got {self.days}")
        if self.val_days < 1:
            raise ValueError(f"val_days must be at least 1, got {self.val_days}")
        if self.epochs < 1 or self.control_epochs < 1:
            raise ValueError("epochs and control_epochs must be at least 1")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.learning_rate <= 0.0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")

    def to_dict(self) -> dict:
        doc = {f.name: getattr(self, f.name) for f in fields(self)}
        doc["noise"] = self.noise.to_dict()
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValueError(f"unknown configuration keys: {', '.join(unknown)}")
        doc = dict(doc)
        if "noise" in doc:
            doc["noise"] = NoiseConfig.from_dict(doc["noise"])
        return cls(**doc)

    def reseeded(self, master: int) -> "ExperimentConfig":
        """Rederive all stage seeds deterministically from one master seed."""
        children = np.random.SeedSequence(master).generate_state(6)
        names = (
            "seed_profiles", "seed_simulate", "seed_attack",
            "seed_train", "seed_balance", "seed_control",
        )
        return replace(self, **{n: int(v) for n, v in zip(names, children)})

    def dataset_config(self) -> DatasetConfig:
        return DatasetConfig(
            days=self.days,
            seed_simulate=self.seed_simulate,
            seed_attack=self.seed_attack,
            alpha=self.alpha,
            noise=self.noise,
            window_history=self.window_history,
            steps_per_day=self.steps_per_day,
        )


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Read a JSON experiment configuration; defaults when no path is given."""
    if path is None:
        return ExperimentConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"configuration file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ValueError(f"configuration file {path} must hold a JSON object")
    return ExperimentConfig.from_dict(doc)


def resolve_grid(name_or_path: str) -> GridModel:
    """Load a grid from a bundled fixture name or an explicit JSON path."""
    candidate = Path(name_or_path)
    if candidate.suffix == ".json" or candidate.exists():
        return load_grid(candidate)
    return load_grid(fixture_path(f"{name_or_path}.json"))


@dataclass(frozen=True)
class SplitBatches:
    """Window batches for each split plus the raw test windows."""

    train: WindowBatch
    val: WindowBatch
    test: WindowBatch
    test_windows: list[MeasurementWindow]
    train_count: int
    val_count: int


def _balance(windows: list[MeasurementWindow], rng: np.random.Generator) -> list[MeasurementWindow]:
    """Subsample attacked windows to the clean count for a 0.5 prevalence."""
    clean = [w for w in windows if w.label == 0]
    attacked = [w for w in windows if w.label == 1]
    keep = min(len(clean), len(attacked))
    if keep == 0:
        raise ValueError("cannot balance a split that lacks both classes")
    idx = np.sort(rng.choice(len(attacked), size=keep, replace=False))
    merged = clean + [attacked[i] for i in idx]
    merged.sort(key=lambda w: (w.final.t, w.label))
    return merged


def split_and_balance(dataset: Dataset, config: ExperimentConfig) -> SplitBatches:
    """Chronological train/val/test split with class-balanced train and val."""
    windows = dataset.windows()
    trainval, test = split_train_test(
        windows,
        train_days=config.train_days,
        test_days=config.test_days,
        steps_per_day=config.steps_per_day,
    )
    train, val = split_train_test(
        trainval, test_days=config.val_days, steps_per_day=config.steps_per_day
    )
    rng = np.random.default_rng(config.seed_balance)
    train_bal = _balance(train, rng)
    val_bal = _balance(val, rng)
    return SplitBatches(
        train=windows_to_batch(train_bal),
        val=windows_to_batch(val_bal),
        test=windows_to_batch(test),
        test_windows=test,
        train_count=len(train_bal),
        val_count=len(val_bal),
    )


def _flatten_features(batch: WindowBatch) -> np.ndarray:
    n = batch.bus.shape[0]
    return np.concatenate(
        [
            batch.bus.reshape(n, -1).astype(np.float64),
            batch.line.reshape(n, -1).astype(np.float64),
        ],
        axis=1,
    )


@dataclass(frozen=True)
class BaselineResult:
    """A fitted logistic-regression baseline and its test probabilities."""

    probabilities: np.ndarray
    converged: bool
    iterations: int


def baseline_train_eval(
    train: WindowBatch,
    test: WindowBatch,
    l2: float = 1e-3,
    max_iter: int = 200,
) -> BaselineResult:
    """Fit logistic regression on flattened window features, score the test set.

    Features are standardized with training statistics; the weights are
    ridge-penalized and optimized with L-BFGS from a zero start, so the fit
    is deterministic for fixed inputs.
    """
    x = _flatten_features(train)
    y = np.asarray(train.labels, dtype=np.float64)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std < 1e-8, 1.0, std)
    xs = (x - mean) / std
    n, d = xs.shape

    def objective(params: np.ndarray) -> tuple[float, np.ndarray]:
        w, b = params[:d], params[d]
        logits = xs @ w + b
        loss = float(
            np.mean(np.maximum(logits, 0.0) - logits * y + np.log1p(np.exp(-np.abs(logits))))
        )
        loss += 0.5 * l2 * float(w @ w)
        probs = 1.0 / (1.0 + np.exp(-logits))
        grad_logits = (probs - y) / n
        grad = np.concatenate([xs.T @ grad_logits + l2 * w, [grad_logits.sum()]])
        return loss, grad

    result = scipy.optimize.minimize(
        objective,
        np.zeros(d + 1),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": max_iter},
    )
    w, b = result.x[:d], result.x[d]
    logits = (_flatten_features(test) - mean) / std @ w + b
    return BaselineResult(
        probabilities=1.0 / (1.0 + np.exp(-logits)),
        converged=bool(result.success),
        iterations=int(result.nit),
    )


def _slice_masks(test_windows: list[MeasurementWindow]) -> dict[str, np.ndarray]:
    """Boolean masks per report slice; negatives are shared by every slice."""
    labels = np.array([w.label for w in test_windows])
    negatives = labels == 0
    masks = {"overall": np.ones(len(test_windows), dtype=bool)}
    for name, attack_type in zip(TYPE_SLICES, "ABC"):
        positive = np.array(
            [w.label == 1 and w.final.attack.spec.attack_type == attack_type for w in test_windows]
        )
        masks[name] = negatives | positive
    for name, variable in zip(VARIABLE_SLICES, ("Vm", "Va")):
        positive = np.array(
            [w.label == 1 and w.final.attack.spec.variable == variable for w in test_windows]
        )
        masks[name] = negatives | positive
    return masks


def _percent(value: float) -> float:
    return round(100.0 * value, 3)


def _slice_metrics(
    probabilities: np.ndarray,
    labels: np.ndarray,
    masks: dict[str, np.ndarray],
    threshold: float,
) -> dict[str, dict]:
    out = {}
    for name in SLICE_NAMES:
        mask = masks[name]
        counts = confusion(probabilities[mask], labels[mask], threshold=threshold)
        values = prf(counts)
        out[name] = {
            "counts": counts.to_dict(),
            "positives": counts.positives,
            "precision": _percent(values.precision),
            "recall": _percent(values.recall),
            "f1": _percent(values.f1),
            "undefined": list(values.undefined),
        }
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _train_control(
    model_config: PowerFdConfig, batches: SplitBatches, config: ExperimentConfig
) -> float:
    """Train on permuted labels; return the F1 against the true val labels.

    Label shuffling severs the feature-label relationship, so a leak-free
    pipeline scores at chance here. Checkpoint selection during the control
    run sees only shuffled labels; the returned score is the single
    evaluation against the true ones.
    """
    rng = np.random.default_rng(config.seed_control)
    shuffled_train = batches.train._replace(labels=rng.permutation(batches.train.labels))
    shuffled_val = batches.val._replace(labels=rng.permutation(batches.val.labels))
    control = PowerFdModel(model_config, seed=config.seed_control)
    train_model(
        control,
        shuffled_train,
        shuffled_val,
        epochs=config.control_epochs,
        batch_size=config.batch_size,
        lr=config.learning_rate,
        seed=config.seed_control,
    )
    probs = control.predict(batches.val.bus, batches.val.line)
    return prf(confusion(probs, batches.val.labels, threshold=config.threshold)).f1


def _render_table(report: dict) -> str:
    """Fixed-width results table mirroring the JSON report."""
    header = f"{'slice':<9} {'tp':>6} {'fp':>6} {'fn':>6} {'tn':>6} {'precision':>9} {'recall':>9} {'f1':>9}"

    def rows(slices: dict) -> list[str]:
        out = []
        for name in SLICE_NAMES:
            s = slices[name]
            c = s["counts"]
            out.append(
                f"{name:<9} {c['tp']:>6} {c['fp']:>6} {c['fn']:>6} {c['tn']:>6}"
                f" {s['precision']:>9.3f} {s['recall']:>9.3f} {s['f1']:>9.3f}"
            )
        return out

    lines = [
        "detector (percent)",
        header,
        *rows(report["slices"]),
        "",
        "logistic-regression baseline (percent)",
        header,
        *rows(report["baseline"]["slices"]),
        "",
        f"control (label-shuffled) val F1: {report['control']['val_f1']:.3f} percent",
        f"threshold: {report['threshold']}",
        f"dataset sha256: {report['dataset']['sha256']}",
        f"checkpoint sha256: {report['checkpoint']['sha256']}",
    ]
    return "\n".join(lines) + "\n"


def evaluate(
    model: PowerFdModel,
    batches: SplitBatches,
    config: ExperimentConfig,
    out_dir: Path,
) -> dict:
    """Score the test set, fit the baseline, run the control, write the report."""
    probs = model.predict(batches.test.bus, batches.test.line)
    masks = _slice_masks(batches.test_windows)
    labels = batches.test.labels
    baseline = baseline_train_eval(batches.train, batches.test)
    control_f1 = _train_control(model.config, batches, config)
    dataset_path = out_dir / DATASET_FILE
    checkpoint_path = out_dir / CHECKPOINT_FILE
    report = {
        "config": config.to_dict(),
        "dataset": {
            "file": DATASET_FILE,
            "sha256": _sha256(dataset_path),
            "windows": {
                "train": batches.train_count,
                "val": batches.val_count,
                "test": len(batches.test_windows),
                "test_positives": int(labels.sum()),
                "test_negatives": int((labels == 0).sum()),
            },
        },
        "checkpoint": {"file": CHECKPOINT_FILE, "sha256": _sha256(checkpoint_path)},
        "threshold": config.threshold,
        "slices": _slice_metrics(probs, labels, masks, config.threshold),
        "baseline": {
            "converged": baseline.converged,
            "iterations": baseline.iterations,
            "slices": _slice_metrics(baseline.probabilities, labels, masks, config.threshold),
        },
        "control": {"epochs": config.control_epochs, "val_f1": _percent(control_f1)},
    }
    (out_dir / REPORT_FILE).write_text(
        json.dumps(report, sort_keys=True, indent=2) + "\n"
    )
    (out_dir / TABLE_FILE).write_text(_render_table(report))
    return report


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except _STAGE_ERRORS as exc:
        raise StageError(name, str(exc)) from exc


def _checked_grid(config: ExperimentConfig) -> GridModel:
    grid = resolve_grid(config.grid)
    issues = validate_grid(grid)
    if issues:
        raise ValueError("; ".join(issues))
    return grid


def _build_full_dataset(grid: GridModel, config: ExperimentConfig) -> Dataset:
    profiles = synth_profiles(
        grid,
        config.days,
        seed=config.seed_profiles,
        steps_per_day=config.steps_per_day,
        jitter=config.profile_jitter,
    )
    return build_dataset(grid, profiles, config=config.dataset_config())


def run_experiment(config: ExperimentConfig, out_dir: str | Path) -> dict:
    """Run every stage from one configuration and return the metrics report.

    Artifacts land in ``out_dir``: the dataset container, training log, best
    checkpoint, JSON report, and results table. Any failure surfaces as a
    ``StageError`` naming the stage.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = _stage("grid", _checked_grid, config)
    dataset = _stage("attack-gen", _build_full_dataset, grid, config)
    _stage("attack-gen", save_dataset, dataset, out / DATASET_FILE)
    batches = _stage("windows", split_and_balance, dataset, config)
    model_config = PowerFdConfig(
        m_b=len(grid.buses), m_l=len(grid.branches), history=config.window_history
    )
    model = PowerFdModel(model_config, seed=config.seed_train)

    def train_stage():
        return train_model(
            model,
            batches.train,
            batches.val,
            epochs=config.epochs,
            batch_size=config.batch_size,
            lr=config.learning_rate,
            seed=config.seed_train,
            log_path=out / LOG_FILE,
            checkpoint_path=out / CHECKPOINT_FILE,
        )

    _stage("train", train_stage)
    return _stage("evaluate", evaluate, model, batches, config, out)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="PATH", help="experiment configuration JSON file")
    parser.add_argument(
        "--seed", type=int, metavar="U64", help="rederive all stage seeds from one master seed"
    )
    parser.add_argument(
        "--out", default=".", metavar="DIR", help="artifact directory (default: current)"
    )
    parser.add_argument(
        "--threads", type=int, metavar="N", help="cap numerical library thread pools"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="powerfd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    grid = sub.add_parser("grid", help="grid file utilities")
    grid_sub = grid.add_subparsers(dest="grid_command", required=True, metavar="ACTION")
    grid_validate = grid_sub.add_parser("validate", help="check a grid JSON file")
    grid_validate.add_argument("path", help="grid JSON file or bundled fixture name")

    for name, text in (
        ("simulate", "generate the clean measurement time series"),
        ("attack-gen", "generate the full dataset including attacked frames"),
        ("train", "train the detector on an existing dataset"),
        ("eval", "evaluate a trained checkpoint and write the report"),
    ):
        stage = sub.add_parser(name, help=text)
        _common_flags(stage)

    detect = sub.add_parser("detect", help="score one window from a dataset file")
    detect.add_argument("--checkpoint", required=True, metavar="PATH")
    detect.add_argument("--window", required=True, metavar="PATH", help="dataset file holding the window frames")
    detect.add_argument("--index", type=int, default=0, help="window index within the file (default: 0)")
    detect.add_argument("--threads", type=int, metavar="N")

    gradcheck = sub.add_parser("gradcheck", help="finite-difference checks for every layer type")
    gradcheck.add_argument("--cases", type=int, default=2, help="random draws per layer (default: 2)")
    gradcheck.add_argument("--threads", type=int, metavar="N")
    return parser


def _cmd_grid_validate(args) -> int:
    grid = resolve_grid(args.path)
    issues = validate_grid(grid)
    if issues:
        for issue in issues:
            print(f"invalid: {issue}", file=sys.stderr)
        return EXIT_STAGE
    print(
        f"ok: {len(grid.buses)} buses, {len(grid.branches)} branches,"
        f" {len(grid.measurement_plan.entries)} measurements"
    )
    return EXIT_OK


def _cmd_simulate(config: ExperimentConfig, out: Path) -> int:
    grid = _stage("grid", _checked_grid, config)

    def build():
        profiles = synth_profiles(
            grid,
            config.days,
            seed=config.seed_profiles,
            steps_per_day=config.steps_per_day,
            jitter=config.profile_jitter,
        )
        steps = simulate_timeseries(
            grid, profiles, noise=config.noise, seed=config.seed_simulate
        )
        return Dataset(
            grid_digest=grid_digest(grid),
            config=config.dataset_config(),
            frames=[s.frame for s in steps],
        )

    dataset = _stage("simulate", build)
    out.mkdir(parents=True, exist_ok=True)
    _stage("simulate", save_dataset, dataset, out / DATASET_FILE)
    print(f"wrote {out / DATASET_FILE}: {len(dataset.frames)} clean frames")
    return EXIT_OK


def _cmd_attack_gen(config: ExperimentConfig, out: Path) -> int:
    grid = _stage("grid", _checked_grid, config)
    dataset = _stage("attack-gen", _build_full_dataset, grid, config)
    out.mkdir(parents=True, exist_ok=True)
    _stage("attack-gen", save_dataset, dataset, out / DATASET_FILE)
    attacked = len(dataset.attacked_frames())
    print(
        f"wrote {out / DATASET_FILE}: {len(dataset.clean_frames())} clean"
        f" + {attacked} attacked frames ({len(dataset.skips)} skips)"
    )
    return EXIT_OK


def _load_matching_dataset(config: ExperimentConfig, out: Path) -> tuple[GridModel, Dataset]:
    grid = _stage("grid", _checked_grid, config)
    path = out / DATASET_FILE
    if not path.exists():
        raise StageError("windows", f"{path} not found; run `powerfd attack-gen` first")
    dataset = _stage("windows", load_dataset, path)
    if dataset.grid_digest != grid_digest(grid):
        raise StageError("windows", f"{path} was generated from a different grid")
    if dataset.config != config.dataset_config():
        raise StageError(
            "windows", f"{path} was generated with different settings; regenerate it"
        )
    return grid, dataset


def _cmd_train(config: ExperimentConfig, out: Path) -> int:
    grid, dataset = _load_matching_dataset(config, out)
    batches = _stage("windows", split_and_balance, dataset, config)
    model_config = PowerFdConfig(
        m_b=len(grid.buses), m_l=len(grid.branches), history=config.window_history
    )
    model = PowerFdModel(model_config, seed=config.seed_train)

    def train_stage():
        return train_model(
            model,
            batches.train,
            batches.val,
            epochs=config.epochs,
            batch_size=config.batch_size,
            lr=config.learning_rate,
            seed=config.seed_train,
            log_path=out / LOG_FILE,
            checkpoint_path=out / CHECKPOINT_FILE,
        )

    result = _stage("train", train_stage)
    print(
        f"wrote {out / CHECKPOINT_FILE}: best val F1 {result.best_val_f1:.4f}"
        f" at epoch {result.best_epoch} of {config.epochs}"
    )
    return EXIT_OK


def _cmd_eval(config: ExperimentConfig, out: Path) -> int:
    _, dataset = _load_matching_dataset(config, out)
    ckpt = out / CHECKPOINT_FILE
    if not ckpt.exists():
        raise StageError("evaluate", f"{ckpt} not found; run `powerfd train` first")
    batches = _stage("windows", split_and_balance, dataset, config)
    model = _stage("evaluate", load_checkpoint, ckpt)
    report = _stage("evaluate", evaluate, model, batches, config, out)
    overall = report["slices"]["overall"]
    print(f"wrote {out / REPORT_FILE}: overall F1 {overall['f1']:.3f} percent")
    return EXIT_OK


def _cmd_detect(args) -> int:
    model = _stage("detect", load_checkpoint, args.checkpoint)

    def score():
        dataset = load_dataset(args.window)
        windows = dataset.windows(history=model.config.history)
        if not windows:
            raise ValueError(f"{args.window} holds no complete window")
        if not 0 <= args.index < len(windows):
            raise ValueError(
                f"window index {args.index} out of range; file holds {len(windows)}"
            )
        return model.predict_window(windows[args.index])

    probability = _stage("detect", score)
    print(f"{probability:.6f}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    checks = _layer_gradchecks(cases=args.cases)
    failed = False
    for name, report in checks:
        status = "ok" if report.passed else "FAIL"
        print(f"{name:<14} {status}  max rel err {report.max_rel_error:.3e} ({report.checks} checks)")
        failed = failed or not report.passed
    return EXIT_STAGE if failed else EXIT_OK


def _elu_case(rng):
    data = rng.normal(size=(3, 4))
    data += 0.25 * np.sign(data)
    return (nn.Tensor(data, requires_grad=True),)


def _layer_gradchecks(cases: int = 2, tolerance: float = 1e-5) -> list[tuple[str, object]]:
    """64-bit finite-difference checks covering every layer type."""

    def t(rng, *shape):
        return nn.Tensor(rng.normal(size=shape), requires_grad=True)

    def conv_case(rng):
        return (t(rng, 2, 4, 5, 6), t(rng, 6, 2, 2, 3), t(rng, 6))

    def conv_fn(x, w, b):
        return nn.tensor_sum(
            nn.conv2d_grouped(x, w, b, stride=2, padding=((1, 0), (1, 2)), groups=2)
        )

    def bn_case(rng):
        return (t(rng, 4, 3, 2, 2), t(rng, 3), t(rng, 3))

    def bn_fn(x, gamma, beta):
        running_mean = np.zeros(3)
        running_var = np.ones(3)
        out = nn.batch_norm(x, gamma, beta, running_mean, running_var, training=True)
        return nn.tensor_sum(nn.tanh(out))

    def lstm_case(rng):
        params = nn.LstmParams.init(3, 4, rng, dtype=np.float64)
        return (t(rng, 2, 3), t(rng, 2, 4), t(rng, 2, 4), *params.parameters())

    def lstm_fn(x, h, c, *params):
        h_t, c_t = nn.lstm_cell(x, h, c, nn.LstmParams(*params))
        return nn.tensor_sum(h_t) + nn.tensor_sum(c_t)

    bce_labels = np.array([[1.0], [0.0], [1.0], [0.0], [1.0]])

    def bce_fn(logits):
        return nn.bce_loss(nn.sigmoid(logits), bce_labels)

    specs = [
        ("conv2d", conv_fn, conv_case),
        ("batch_norm", bn_fn, bn_case),
        ("elu", lambda x: nn.tensor_sum(nn.elu(x)), _elu_case),
        ("sigmoid", lambda x: nn.tensor_sum(nn.sigmoid(x)), lambda rng: (t(rng, 3, 4),)),
        ("tanh", lambda x: nn.tensor_sum(nn.tanh(x)), lambda rng: (t(rng, 3, 4),)),
        ("linear", lambda x, w, b: nn.tensor_sum(nn.linear(x, w, b)), lambda rng: (t(rng, 4, 3), t(rng, 3, 2), t(rng, 2))),
        ("lstm_cell", lstm_fn, lstm_case),
        ("bce", bce_fn, lambda rng: (t(rng, 5, 1),)),
    ]
    out = []
    for name, fn, sampler in specs:
        out.append((name, nn.grad_check(fn, sampler, tolerance=tolerance, cases=cases)))
    return out


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE

    threads = getattr(args, "threads", None)
    if threads is not None and threads < 1:
        print("powerfd: --threads must be at least 1", file=sys.stderr)
        return EXIT_USAGE

    def dispatch() -> int:
        if args.command == "grid":
            return _cmd_grid_validate(args)
        if args.command == "detect":
            return _cmd_detect(args)
        if args.command == "gradcheck":
            return _cmd_gradcheck(args)
        try:
            config = load_config(args.config)
        except (OSError, ValueError, TypeError) as exc:
            print(f"powerfd: {exc}", file=sys.stderr)
            return EXIT_USAGE
        if args.seed is not None:
            config = config.reseeded(args.seed)
        out = Path(args.out)
        handler = {
            "simulate": _cmd_simulate,
            "attack-gen": _cmd_attack_gen,
            "train": _cmd_train,
            "eval": _cmd_eval,
        }[args.command]
        return handler(config, out)

    try:
        if threads is not None:
            import threadpoolctl

            with threadpoolctl.threadpool_limits(limits=threads):
                return dispatch()
        return dispatch()
    except StageError as exc:
        print(f"powerfd: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except _STAGE_ERRORS as exc:
        print(f"powerfd: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main(argv=sys.argv[1:]))
