"""Experiment harness: config files, runs, ablation grids, report emission."""
from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .checkpoint import save_state
from .data import (SyntheticSpec, embeddings_to_stream, generate_synthetic,
                   load_embeddings)
from .inference import evaluate_row, summarize
from .masking import SparsifierConfig, Strategy
from .model import FrozenBackbone
from .training import ContinualState, TrainConfig, train_task

ENV_PREFIX = "SGDS_"


class ConfigError(ValueError):
    pass


def _to_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes", "on"):
        return True
    if s.lower() in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected boolean, got {s!r}")


def _to_seeds(s: str) -> tuple[int, ...]:
    s = s.strip()
    if not s:
        return ()
    return tuple(int(p) for p in s.split(","))


_SCHEMA: dict[str, tuple] = {
    # key: (converter, default)
    "dataset.kind": (str, "synthetic"),
    "dataset.path": (str, ""),
    "dataset.groups": (int, 4),
    "dataset.classes_per_group": (int, 5),
    "dataset.angle": (float, 0.25),
    "dataset.noise": (float, 0.15),
    "dataset.train_per_class": (int, 100),
    "dataset.test_per_class": (int, 50),
    "dataset.seed": (int, 0),
    "tasks.count": (int, 10),
    "tasks.seed": (int, 1993),
    "model.layers": (int, 4),
    "model.dim": (int, 64),
    "adapter.rank": (int, 16),
    "sgds.enabled": (_to_bool, True),
    "sgds.k": (float, 0.6),
    "sgds.beta": (float, 0.5),
    "sgds.gamma": (float, 1.0),
    "sgds.target_layers": (str, "last"),
    "sgds.se": (_to_bool, True),
    "sgds.ac": (_to_bool, True),
    "train.epochs": (int, 20),
    "train.batch": (int, 48),
    "train.lr": (float, 0.01),
    "train.momentum": (float, 0.9),
    "train.weight_decay": (float, 0.0),
    "baseline.param_reg.mode": (str, "off"),
    "baseline.param_reg.lambda": (float, 0.1),
    "align.samples": (int, 256),
    "run.seeds": (_to_seeds, ()),
    "out.dir": (str, "runs"),
    "out.chart": (_to_bool, False),
}


@dataclass
class Config:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    @property
    def target_layers(self) -> tuple[int, ...]:
        raw = self.values["sgds.target_layers"]
        if raw == "last":
            return (self.values["model.layers"] - 1,)
        try:
            layers = tuple(sorted(int(p) for p in raw.split(",")))
        except ValueError:
            raise ConfigError(f"bad sgds.target_layers value {raw!r}")
        for l in layers:
            if not 0 <= l < self.values["model.layers"]:
                raise ConfigError(f"target layer {l} out of range")
        return layers

    @property
    def seeds(self) -> tuple[int, ...]:
        return self.values["run.seeds"] or (self.values["tasks.seed"],)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.values["train.epochs"],
            batch=self.values["train.batch"],
            lr=self.values["train.lr"],
            momentum=self.values["train.momentum"],
            weight_decay=self.values["train.weight_decay"],
            sgds_enabled=self.values["sgds.enabled"],
            se_enabled=self.values["sgds.se"],
            ac_enabled=self.values["sgds.ac"],
            param_reg_mode=self.values["baseline.param_reg.mode"],
            param_reg_lambda=self.values["baseline.param_reg.lambda"],
            adapter_rank=self.values["adapter.rank"],
            align_samples=self.values["align.samples"],
            sparsifier=SparsifierConfig(
                k=self.values["sgds.k"],
                beta=self.values["sgds.beta"],
                gamma=self.values["sgds.gamma"],
                target_layers=self.target_layers,
            ),
        )


def parse_config(path=None, overrides: dict | None = None) -> Config:
    """Flat key=value file with dotted keys; env vars SGDS_* override keys."""
    values = {k: d for k, (_, d) in _SCHEMA.items()}
    raw: dict[str, str] = {}
    if path is not None:
        with open(path) as f:
            for ln, line in enumerate(f, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{ln}: expected key=value")
                key, _, val = line.partition("=")
                raw[key.strip()] = val.strip()
    env_name = {k: ENV_PREFIX + k.replace(".", "_").upper() for k in _SCHEMA}
    for k, name in env_name.items():
        if name in os.environ:
            raw[k] = os.environ[name]
    if overrides:
        raw.update({k: str(v) for k, v in overrides.items()})
    for key, val in raw.items():
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        conv, _ = _SCHEMA[key]
        try:
            values[key] = conv(val)
        except ConfigError:
            raise
        except ValueError:
            raise ConfigError(f"bad value for {key!r}: {val!r}")
    return Config(values)


def build_stream(cfg: Config, split_seed: int):
    kind = cfg["dataset.kind"]
    if kind == "synthetic":
        spec = SyntheticSpec(
            groups=cfg["dataset.groups"],
            classes_per_group=cfg["dataset.classes_per_group"],
            dim=cfg["model.dim"],
            within_group_angle=cfg["dataset.angle"],
            noise_sigma=cfg["dataset.noise"],
            samples_per_class_train=cfg["dataset.train_per_class"],
            samples_per_class_test=cfg["dataset.test_per_class"],
            seed=cfg["dataset.seed"],
        )
        return generate_synthetic(spec, cfg["tasks.count"], split_seed)
    if kind == "embeddings":
        if not cfg["dataset.path"]:
            raise ConfigError("dataset.path required for embeddings mode")
        x, y, num_classes = load_embeddings(cfg["dataset.path"])
        if x.shape[1] != cfg["model.dim"]:
            raise ConfigError("embedding dim does not match model.dim")
        return embeddings_to_stream(x, y, num_classes, cfg["tasks.count"],
                                    split_seed, cfg["dataset.test_per_class"])
    raise ConfigError(f"unknown dataset.kind {kind!r}")


@dataclass
class RunResult:
    seed: int
    matrix: np.ndarray
    a_bar: float
    a_final: float
    state: ContinualState
    task_seconds: list[float] = field(default_factory=list)


def run_single(cfg: Config, seed: int, stream=None) -> RunResult:
    """Train every task sequentially and evaluate after each one."""
    if stream is None:
        stream = build_stream(cfg, seed)
    tcfg = cfg.train_config()
    backbone = FrozenBackbone.create(cfg["model.layers"], cfg["model.dim"])
    state = ContinualState.create(backbone, tcfg)
    t_total = len(stream.tasks)
    matrix = np.full((t_total, t_total), np.nan)
    seconds = []
    for t, task in enumerate(stream.tasks):
        t0 = time.perf_counter()
        train_task(state, task, tcfg, seed)
        sets = [(tk.test_x, tk.test_y) for tk in stream.tasks[: t + 1]]
        matrix[t, : t + 1] = evaluate_row(state, sets)
        seconds.append(time.perf_counter() - t0)
    a_bar, a_final = summarize(matrix)
    return RunResult(seed, matrix, a_bar, a_final, state, seconds)


def _fmt(x: float) -> str:
    return f"{x:.10f}"


def write_results_csv(path, matrix: np.ndarray, a_bar: float, a_final: float) -> None:
    t_total = matrix.shape[0]
    with open(path, "w") as f:
        cols = ",".join(f"acc_task_{j + 1}" for j in range(t_total))
        f.write(f"task_index,{cols},avg_acc_so_far\n")
        for t in range(t_total):
            cells = [_fmt(matrix[t, j]) if j <= t else "" for j in range(t_total)]
            f.write(f"{t + 1},{','.join(cells)},{_fmt(matrix[t, : t + 1].mean())}\n")
        blanks = "," * t_total
        f.write(f"A_bar{blanks},{_fmt(a_bar)}\n")
        f.write(f"A_T{blanks},{_fmt(a_final)}\n")


def read_results_csv(path):
    """Parse a results.csv back into (matrix, a_bar, a_final)."""
    with open(path) as f:
        lines = [ln.rstrip("\n") for ln in f]
    t_total = len(lines[0].split(",")) - 2
    matrix = np.full((t_total, t_total), np.nan)
    for t in range(t_total):
        cells = lines[1 + t].split(",")
        for j in range(t + 1):
            matrix[t, j] = float(cells[1 + j])
    a_bar = float(lines[1 + t_total].split(",")[-1])
    a_final = float(lines[2 + t_total].split(",")[-1])
    return matrix, a_bar, a_final


def write_strategy_csv(path, state: ContinualState) -> None:
    with open(path, "w") as f:
        f.write("task,class,S_old,S_new,strategy\n")
        for t, log in enumerate(state.task_logs, 1):
            for p in log.profiles:
                f.write(f"{t},{p.class_id},{_fmt(p.s_old)},{_fmt(p.s_new)},"
                        f"{p.strategy.value}\n")


def strategy_counts(state: ContinualState) -> list[dict]:
    rows = []
    for t, log in enumerate(state.task_logs, 1):
        reuse = sum(p.strategy is Strategy.KNOWLEDGE_REUSE for p in log.profiles)
        rows.append({"task": t, "reuse": reuse,
                     "allocate": len(log.profiles) - reuse})
    return rows


def write_chart_svg(path, avg_acc: list[float]) -> None:
    """Minimal static line chart of average accuracy vs task index."""
    w, h, pad = 480, 300, 40
    n = len(avg_acc)
    xs = [pad + (w - 2 * pad) * (i / max(n - 1, 1)) for i in range(n)]
    ys = [h - pad - (h - 2 * pad) * (v / 100.0) for v in avg_acc]
    points = " ".join(f"{x:.1f},{y:.1f}" for x, y in zip(xs, ys))
    with open(path, "w") as f:
        f.write(f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">\n')
        f.write(f'<rect width="{w}" height="{h}" fill="white"/>\n')
        f.write(f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" stroke="black"/>\n')
        f.write(f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h - pad}" stroke="black"/>\n')
        f.write(f'<polyline fill="none" stroke="steelblue" stroke-width="2" points="{points}"/>\n')
        f.write(f'<text x="{w // 2}" y="{h - 8}" text-anchor="middle" font-size="12">task</text>\n')
        f.write(f'<text x="12" y="{h // 2}" font-size="12" transform="rotate(-90 12 {h // 2})">avg acc (%)</text>\n')
        f.write("</svg>\n")


def run_experiment(cfg: Config, out_dir=None) -> list[RunResult]:
    """Run every configured seed; write per-seed reports plus an aggregate."""
    out_dir = cfg["out.dir"] if out_dir is None else out_dir
    os.makedirs(out_dir, exist_ok=True)
    results = []
    for seed in cfg.seeds:
        run_dir = os.path.join(out_dir, f"seed_{seed}")
        os.makedirs(run_dir, exist_ok=True)
        try:
            res = run_single(cfg, seed)
        except Exception:
            with open(os.path.join(out_dir, "FAILED"), "w") as f:
                f.write(f"seed {seed} aborted\n")
            raise
        results.append(res)
        write_results_csv(os.path.join(run_dir, "results.csv"),
                          res.matrix, res.a_bar, res.a_final)
        write_strategy_csv(os.path.join(run_dir, "strategy.csv"), res.state)
        res.state.counters.dump_csv(os.path.join(run_dir, "counters.csv"))
        save_state(os.path.join(run_dir, "checkpoint"), res.state)
        t_total = res.matrix.shape[0]
        report = {
            "seed": seed,
            "config": {k: (list(v) if isinstance(v, tuple) else v)
                       for k, v in cfg.values.items()},
            "a_bar": res.a_bar,
            "a_final": res.a_final,
            "matrix": [[res.matrix[t, j] for j in range(t + 1)]
                       for t in range(t_total)],
            "strategy_counts": strategy_counts(res.state),
            "task_seconds": res.task_seconds,
        }
        with open(os.path.join(run_dir, "report.json"), "w") as f:
            json.dump(report, f, indent=2, sort_keys=True)
        if cfg["out.chart"]:
            avg = [float(res.matrix[t, : t + 1].mean()) for t in range(t_total)]
            write_chart_svg(os.path.join(run_dir, "chart.svg"), avg)
    with open(os.path.join(out_dir, "summary.csv"), "w") as f:
        f.write("seed,A_bar,A_T\n")
        for res in results:
            f.write(f"{res.seed},{_fmt(res.a_bar)},{_fmt(res.a_final)}\n")
        if len(results) > 1:
            bars = np.array([r.a_bar for r in results])
            finals = np.array([r.a_final for r in results])
            f.write(f"mean,{_fmt(bars.mean())},{_fmt(finals.mean())}\n")
            f.write(f"std,{_fmt(bars.std())},{_fmt(finals.std())}\n")
    return results


ABLATION_CELLS = (
    # (name, sgds_enabled, se, ac)
    ("baseline", False, False, False),
    ("se_only", True, True, False),
    ("ac_only", True, False, True),
    ("full", True, True, True),
)


def run_ablation(cfg: Config, out_dir=None, param_reg: bool = False,
                 layer_sweep: bool = False) -> list[dict]:
    """SE/AC grid (optionally plus param-reg modes and a layer sweep)."""
    out_dir = cfg["out.dir"] if out_dir is None else out_dir
    os.makedirs(out_dir, exist_ok=True)
    streams = {seed: build_stream(cfg, seed) for seed in cfg.seeds}

    def run_cell(name, cell_cfg):
        bars, finals = [], []
        for seed in cfg.seeds:
            res = run_single(cell_cfg, seed, stream=streams[seed])
            bars.append(res.a_bar)
            finals.append(res.a_final)
        bars, finals = np.array(bars), np.array(finals)
        return {"cell": name,
                "sgds": cell_cfg["sgds.enabled"],
                "se": cell_cfg["sgds.se"], "ac": cell_cfg["sgds.ac"],
                "param_reg": cell_cfg["baseline.param_reg.mode"],
                "layers": ",".join(map(str, cell_cfg.target_layers)),
                "a_bar_mean": float(bars.mean()), "a_bar_std": float(bars.std()),
                "a_T_mean": float(finals.mean()), "a_T_std": float(finals.std())}

    rows = []
    for name, enabled, se, ac in ABLATION_CELLS:
        cell = Config(dict(cfg.values))
        cell.values.update({"sgds.enabled": enabled, "sgds.se": se,
                            "sgds.ac": ac, "baseline.param_reg.mode": "off"})
        rows.append(run_cell(name, cell))
    if param_reg:
        for mode in ("up", "down", "both"):
            cell = Config(dict(cfg.values))
            cell.values.update({"sgds.enabled": False, "sgds.se": False,
                                "sgds.ac": False,
                                "baseline.param_reg.mode": mode})
            rows.append(run_cell(f"param_reg_{mode}", cell))
    if layer_sweep:
        for l in range(cfg["model.layers"]):
            cell = Config(dict(cfg.values))
            cell.values.update({"sgds.enabled": True, "sgds.se": True,
                                "sgds.ac": True, "sgds.target_layers": str(l),
                                "baseline.param_reg.mode": "off"})
            rows.append(run_cell(f"layer_{l}", cell))
    with open(os.path.join(out_dir, "ablation.csv"), "w") as f:
        f.write("cell,sgds,se,ac,param_reg,layers,"
                "A_bar_mean,A_bar_std,A_T_mean,A_T_std\n")
        for r in rows:
            f.write(f"{r['cell']},{r['sgds']},{r['se']},{r['ac']},"
                    f"{r['param_reg']},\"{r['layers']}\","
                    f"{_fmt(r['a_bar_mean'])},{_fmt(r['a_bar_std'])},"
                    f"{_fmt(r['a_T_mean'])},{_fmt(r['a_T_std'])}\n")
    return rows
