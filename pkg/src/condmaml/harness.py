"""Training driver, episodic evaluation, condition-number traces, checkpoints
and the quadratic descent demo."""

from __future__ import annotations

import csv
import dataclasses
import datetime as _dt
import hashlib
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metalearn import (
    MetaConfig,
    MetaOptimizer,
    adapted_accuracies,
    meta_step,
    step_condition_losses,
    step_kappas,
)
from .models import MLPConfig, ParamSet, init
from .tasks import (
    GaussianTaskGen,
    Task,
    load_csv_dataset,
    quadratic_descent,
    quadratic_loss,
    quadratic_problem,
    sample_csv_episode,
    sample_gaussian_episode,
)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "condmaml-checkpoint"
CHECKPOINT_VERSION = 1
THREADS_ENV = "COND_MAML_THREADS"

_SPLIT_CODES = {"train": 0, "val": 1, "test": 2, "trace": 3}


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class TrainingDiverged(ArithmeticError):
    pass


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class TrainConfig:
    # meta-learning
    K: int = 5
    alpha: float = 0.01
    beta: float = 0.001
    gamma: float = 1.0
    meta_batch: int = 4
    subset_groups: tuple[str, ...] = ("cls",)
    conditioning_enabled: bool = True
    first_order: bool = False
    optimizer: str = "sgd"
    grad_clip: float | None = None
    # model
    hidden_dims: tuple[int, ...] = (32, 32)
    # task source
    source: str = "gaussian"
    dim: int = 16
    n_way: int = 5
    k_shot: int = 1
    q_queries: int = 16
    mean_scale: float = 3.0
    noise_sigma: float = 0.5
    csv_path: str = ""
    csv_split_path: str = ""
    # schedule and reporting
    episodes: int = 2000
    eval_every: int = 250
    eval_episodes: int = 600
    eval_steps: tuple[int, ...] = (0, 1, 2, 3, 4, 5)
    trace_episodes: int = 8
    trace_full_kappa: bool = False
    seed: int = 0
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.eval_episodes < 1:
            raise ConfigError("eval_episodes must be >= 1")
        steps = list(self.eval_steps)
        if not steps or steps != sorted(set(steps)) or steps[0] < 0:
            raise ConfigError("eval_steps must be non-empty, ascending and non-negative")
        if self.episodes < 0 or self.eval_every < 1 or self.trace_episodes < 1:
            raise ConfigError("episodes >= 0, eval_every >= 1 and trace_episodes >= 1 required")
        if self.source not in ("gaussian", "csv"):
            raise ConfigError(f"unknown task source {self.source!r}")
        if self.source == "csv" and not (self.csv_path and self.csv_split_path):
            raise ConfigError("csv source needs csv_path and csv_split_path")
        try:
            self.meta_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def meta_config(self) -> MetaConfig:
        names = {f.name for f in dataclasses.fields(MetaConfig)}
        return MetaConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def task_source_spec(self) -> dict:
        keys = ["source", "dim", "n_way", "k_shot", "q_queries", "mean_scale", "noise_sigma"]
        keys += ["csv_path", "csv_split_path"]
        return {k: getattr(self, k) for k in keys}

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _parse_value(raw: str, current):
    raw = raw.strip()
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(current, tuple):
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if current and isinstance(current[0], str):
            return tuple(parts)
        return tuple(int(p) for p in parts)
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if current is None:
        return None if raw.lower() in ("", "none") else float(raw)
    return raw


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment; lists are comma-separated."""
    base = base or TrainConfig()
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    updates = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            updates[key] = _parse_value(raw, getattr(base, key))
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {key}: {exc}") from None
    return dataclasses.replace(base, **updates)


def load_config(path) -> TrainConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------- tasks


class TaskSource:
    """Deterministic episode stream: ``episode(split, i)`` depends only on
    (source spec, seed, split, i)."""

    def __init__(self, spec: dict, seed: int):
        self.spec = dict(spec)
        self.seed = int(seed)
        self.kind = spec["source"]
        if self.kind == "gaussian":
            self.gen = GaussianTaskGen(
                dim=spec["dim"],
                n_way=spec["n_way"],
                k_shot=spec["k_shot"],
                q_queries=spec["q_queries"],
                mean_scale=spec["mean_scale"],
                noise_sigma=spec["noise_sigma"],
                seed=seed,
            )
            self.dim = spec["dim"]
        elif self.kind == "csv":
            self.dataset = load_csv_dataset(spec["csv_path"], spec["csv_split_path"])
            self.dim = self.dataset.dim
        else:
            raise ConfigError(f"unknown task source {self.kind!r}")

    def with_shape(self, n_way: int, k_shot: int, q_queries: int) -> "TaskSource":
        spec = dict(self.spec, n_way=n_way, k_shot=k_shot, q_queries=q_queries)
        return TaskSource(spec, self.seed)

    def rng(self, split: str, index: int) -> np.random.Generator:
        seq = np.random.SeedSequence([self.seed, _SPLIT_CODES[split], int(index)])
        return np.random.default_rng(seq)

    def episode(self, split: str, index: int) -> Task:
        rng = self.rng(split, index)
        if self.kind == "gaussian":
            return sample_gaussian_episode(self.gen, rng)
        csv_split = "val" if split == "trace" else split
        s = self.spec
        return sample_csv_episode(
            self.dataset, csv_split, s["n_way"], s["k_shot"], s["q_queries"], rng
        )


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    mlp: MLPConfig
    arrays: dict[str, np.ndarray]
    iteration: int = 0
    rng_state: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def params(self) -> ParamSet:
        return ParamSet.from_arrays(self.mlp, self.arrays)

    @classmethod
    def from_params(cls, params: ParamSet, **kw) -> "Checkpoint":
        return cls(params.config, params.arrays(), **kw)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    groups = {name: group for name, group, _ in ckpt.mlp.entry_layout()}
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "mlp_config": {
            "input_dim": ckpt.mlp.input_dim,
            "hidden_dims": list(ckpt.mlp.hidden_dims),
            "n_classes": ckpt.mlp.n_classes,
            "activation": ckpt.mlp.activation,
            "seed": ckpt.mlp.seed,
        },
        "iteration": ckpt.iteration,
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
        # float.hex keeps every bit
        "entries": [
            {
                "name": name,
                "group": groups[name],
                "shape": list(arr.shape),
                "data": [float(v).hex() for v in np.asarray(arr).ravel()],
            }
            for name, arr in ckpt.arrays.items()
        ],
    }
    return (json.dumps(doc, sort_keys=True, indent=1) + "\n").encode("utf-8")


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    os.replace(tmp, path)
    return path


def load_checkpoint(path, expected: MLPConfig | None = None) -> Checkpoint:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {doc.get('version')} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    try:
        mc = doc["mlp_config"]
        mlp = MLPConfig(mc["input_dim"], tuple(mc["hidden_dims"]), mc["n_classes"], mc["seed"])
        layout = mlp.entry_layout()
        entries = doc["entries"]
        if [e["name"] for e in entries] != [n for n, _, _ in layout]:
            raise CheckpointError(f"{path}: entry table does not match its model config")
        arrays = {}
        for entry, (name, group, shape) in zip(entries, layout):
            if tuple(entry["shape"]) != shape or entry["group"] != group:
                raise CheckpointError(f"{path}: entry {name} has shape/group mismatch")
            data = np.array([float.fromhex(v) for v in entry["data"]], dtype=np.float64)
            if data.size != int(np.prod(shape)):
                raise CheckpointError(f"{path}: entry {name} holds {data.size} values")
            arrays[name] = data.reshape(shape)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc!r})") from None
    if expected is not None:
        _check_layout(expected, mlp)
    return Checkpoint(mlp, arrays, int(doc["iteration"]), doc.get("rng_state", {}), doc.get("meta", {}))


def _check_layout(expected: MLPConfig, found: MLPConfig) -> None:
    want = expected.entry_layout()
    have = found.entry_layout()
    for (wn, wg, ws), (hn, hg, hs) in zip(want, have):
        if (wn, wg, ws) != (hn, hg, hs):
            raise CheckpointError(
                f"checkpoint entry {hn} {hs} does not match expected {wn} {ws}"
            )
    if len(want) != len(have):
        name = (want if len(want) > len(have) else have)[min(len(want), len(have))][0]
        raise CheckpointError(f"checkpoint entry count differs, first unmatched entry {name}")


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    steps: list[int]
    mean: list[float]
    ci95: list[float]
    episodes: int

    def at(self, step: int) -> tuple[float, float]:
        i = self.steps.index(step)
        return self.mean[i], self.ci95[i]

    def rows(self) -> list[dict]:
        return [
            {"step": s, "mean_acc": m, "ci95": c, "episodes": self.episodes}
            for s, m, c in zip(self.steps, self.mean, self.ci95)
        ]


def ci_halfwidth(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return 0.0
    return float(1.96 * values.std(ddof=1) / np.sqrt(values.size))


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def evaluate_params(
    params: ParamSet,
    source: TaskSource,
    episodes: int,
    eval_steps,
    alpha: float,
    split: str = "test",
) -> EvalReport:
    steps = sorted(set(int(s) for s in eval_steps))
    if episodes < 1:
        raise ValueError("episodes must be >= 1")

    def one(i: int) -> dict[int, float]:
        return adapted_accuracies(params, source.episode(split, i), steps, alpha)

    n_workers = worker_count()
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(one, range(episodes)))
    else:
        results = [one(i) for i in range(episodes)]
    table = np.array([[r[s] for s in steps] for r in results])
    return EvalReport(
        steps=steps,
        mean=[float(v) for v in table.mean(axis=0)],
        ci95=[ci_halfwidth(table[:, j]) for j in range(len(steps))],
        episodes=episodes,
    )


def evaluate(
    ckpt: Checkpoint,
    source: TaskSource,
    n_way: int,
    k_shot: int,
    q_queries: int,
    episodes: int,
    eval_steps,
    alpha: float,
    split: str = "test",
) -> EvalReport:
    if n_way != ckpt.mlp.n_classes:
        raise ValueError(f"model has {ckpt.mlp.n_classes} outputs, asked for {n_way}-way")
    src = source.with_shape(n_way, k_shot, q_queries)
    return evaluate_params(ckpt.params(), src, episodes, eval_steps, alpha, split)


# ---------------------------------------------------------------- traces


@dataclass
class ConditionTraceRow:
    iteration: int
    kappa_subset: list[float]
    kappa_full: list[float] | None
    cond_loss: float


def trace_condition(
    params: ParamSet,
    task: Task,
    K: int,
    alpha: float,
    subset_groups,
    include_full: bool = False,
    iteration: int = 0,
) -> ConditionTraceRow:
    subset, full = step_kappas(params, task, K, alpha, subset_groups, include_full)
    cfg = MetaConfig(K=K, alpha=max(alpha, 0.0), subset_groups=tuple(subset_groups))
    return ConditionTraceRow(iteration, subset, full, step_condition_losses(params, task, cfg))


def trace_mean(params: ParamSet, tasks: list[Task], cfg: MetaConfig, include_full: bool, iteration: int):
    rows = [
        trace_condition(params, t, cfg.K, cfg.alpha, cfg.subset_groups, include_full, iteration)
        for t in tasks
    ]
    subset = np.mean([r.kappa_subset for r in rows], axis=0).tolist()
    full = np.mean([r.kappa_full for r in rows], axis=0).tolist() if include_full else None
    return ConditionTraceRow(iteration, subset, full, float(np.mean([r.cond_loss for r in rows])))


# ---------------------------------------------------------------- metric files


def _timestamp_header() -> str:
    return f"# created {_dt.datetime.now(_dt.timezone.utc).isoformat(timespec='seconds')}\n"


class CsvLog:
    """CSV with a single timestamp comment line followed by a header row."""

    def __init__(self, path, columns: list[str]):
        self.path = Path(path)
        self.columns = columns
        with self.path.open("w", newline="", encoding="utf-8") as fh:
            fh.write(_timestamp_header())
            csv.writer(fh, lineterminator="\n").writerow(columns)

    def write(self, row: dict) -> None:
        with self.path.open("a", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerow([_fmt(row.get(c)) for c in self.columns])


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_metric_csv(path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    body = [ln for ln in lines if not ln.startswith("#")]
    return list(csv.DictReader(io.StringIO("\n".join(body))))


def run_id(cfg: TrainConfig) -> str:
    """Short hash of everything that determines the run's numbers; where the
    results are written is not part of it."""
    settings = {k: v for k, v in cfg.to_dict().items() if k != "output_dir"}
    text = json.dumps(settings, sort_keys=True)
    return hashlib.sha1(text.encode("utf-8")).hexdigest()[:12]


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint
    best_accuracy: float
    output_dir: Path
    diverged: bool = False


def _eval_columns():
    return ["iteration", "split", "step", "mean_acc", "ci95", "episodes"]


def _trace_columns(K: int, full: bool):
    cols = ["iteration"] + [f"kappa_subset_{k}" for k in range(K)]
    if full:
        cols += [f"kappa_full_{k}" for k in range(K)]
    return cols + ["cond_loss", "train_query_loss", "train_cond_loss"]


def train(cfg: TrainConfig) -> TrainResult:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    mcfg = cfg.meta_config()
    source = TaskSource(cfg.task_source_spec(), cfg.seed)
    mlp = MLPConfig(source.dim, cfg.hidden_dims, cfg.n_way, cfg.seed)
    params = init(mlp)
    optimizer = MetaOptimizer(mcfg)
    meta = {"run_id": run_id(cfg), "task_source": cfg.task_source_spec(), "alpha": cfg.alpha, "K": cfg.K}

    manifest = {"run_id": meta["run_id"], "config": cfg.to_dict(), "files": {}}
    eval_log = CsvLog(out / "eval.csv", _eval_columns())
    trace_log = CsvLog(out / "trace.csv", _trace_columns(cfg.K, cfg.trace_full_kappa))
    manifest["files"] = {"eval": "eval.csv", "trace": "trace.csv", "best": "best.ckpt", "final": "final.ckpt"}
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")

    trace_tasks = [source.episode("trace", i) for i in range(cfg.trace_episodes)]
    top_step = max(cfg.eval_steps)

    def ckpt(p: ParamSet, iteration: int) -> Checkpoint:
        state = {"seed": cfg.seed, "next_episode": iteration, "optimizer": optimizer.state_dict()}
        return Checkpoint.from_params(p, iteration=iteration, rng_state=state, meta=meta)

    best = ckpt(params, 0)
    best_acc = -1.0
    last_metrics = None

    def probe(p: ParamSet, iteration: int):
        nonlocal best, best_acc
        report = evaluate_params(p, source, cfg.eval_episodes, cfg.eval_steps, cfg.alpha, "val")
        for row in report.rows():
            eval_log.write({"iteration": iteration, "split": "val", **row})
        tr = trace_mean(p, trace_tasks, mcfg, cfg.trace_full_kappa, iteration)
        row = {"iteration": iteration, "cond_loss": tr.cond_loss}
        row.update({f"kappa_subset_{k}": v for k, v in enumerate(tr.kappa_subset)})
        if tr.kappa_full is not None:
            row.update({f"kappa_full_{k}": v for k, v in enumerate(tr.kappa_full)})
        if last_metrics is not None:
            row["train_query_loss"] = last_metrics.query_loss
            row["train_cond_loss"] = last_metrics.cond_loss
        trace_log.write(row)
        acc, _ = report.at(top_step)
        log.info("iter %d val acc@%d %.4f kappa0 %.3g", iteration, top_step, acc, tr.kappa_subset[0])
        if acc > best_acc:
            best_acc = acc
            best = ckpt(p, iteration)

    probe(params, 0)
    diverged = False
    it = 0
    for it in range(1, cfg.episodes + 1):
        tasks = [source.episode("train", (it - 1) * cfg.meta_batch + j) for j in range(cfg.meta_batch)]
        try:
            candidate, last_metrics = meta_step(params, tasks, mcfg, optimizer)
            if it % cfg.eval_every == 0 or it == cfg.episodes:
                probe(candidate, it)
        except ArithmeticError as exc:
            # parameters can be finite yet overflow on the next forward pass
            log.error("diverged at iteration %d: %s", it, exc)
            diverged = True
            it -= 1
            break
        params = candidate

    final = ckpt(params, it)
    save_checkpoint(final, out / "final.ckpt")
    save_checkpoint(best, out / "best.ckpt")
    result = TrainResult(final, best, best_acc, out, diverged)
    if diverged:
        raise TrainingDiverged(f"training diverged after iteration {it}; last good checkpoint kept")
    return result


# ---------------------------------------------------------------- demo


def demo_quadratic(kappa_list, lr: float = 0.5, steps: int = 10) -> list[dict]:
    """Per-step gradient descent rows on the rotated 2-D quadratic for each κ."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rows = []
    for kappa in kappa_list:
        problem = quadratic_problem(float(kappa))
        d0 = float(np.linalg.norm(problem.theta0 - problem.optimum))
        for t, theta in enumerate(quadratic_descent(problem, lr, steps)):
            dist = float(np.linalg.norm(theta - problem.optimum))
            rows.append(
                {
                    "kappa": float(kappa),
                    "step": t,
                    "theta1": float(theta[0]),
                    "theta2": float(theta[1]),
                    "loss": quadratic_loss(problem, theta),
                    "distance": dist,
                    "distance_ratio": dist / d0,
                }
            )
    return rows


def write_rows(rows: list[dict], path=None, columns=None) -> str:
    columns = columns or (list(rows[0]) if rows else [])
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k)) for k in columns})
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text
