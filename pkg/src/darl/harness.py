"""Experiment plumbing: config files, metric export, sweeps and checkpoints.

Config files are flat ``key = value`` text.  Keys carry a section prefix:
``task.*`` (generator arguments), ``darl.*`` (:class:`DarlConfig` fields),
``experiment.*`` (seeds, variants, output) and ``sweep.*`` (threshold
values).  Lines starting with ``#`` are comments.  List values are
comma-separated.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import nn, qlearn
from .adversarial import AdvNets
from .exceptions import ConfigError, IntegrityError
from .orchestrator import VARIANTS, DarlConfig, DarlTrainer, RunMetrics, evaluate
from .synthdata import DEFAULT_PHASE, ShiftSpec, generate_task, load_task, save_task

logger = logging.getLogger(__name__)

FORMATS = ("csv", "summary", "json")

# Column order of the per-iteration CSV.  ``mu_<k>`` columns follow, one per source class.
CSV_COLUMNS = (
    "iteration", "episode_len", "mean_reward", "n_selected", "n_selected_shared",
    "precision", "target_acc", "test_error", "d_loss", "adv_loss", "cls_loss",
    "td_loss", "epsilon", "adv_skipped", "mu_degenerate",
)

_TASK_KEYS = {
    "k_source": "int",
    "n_shared": "int",
    "d_in": "int",
    "per_class_count_src": "int",
    "per_class_count_tgt": "int",
    "class_separation": "float",
    "cluster_std": "float",
    "phase": "float",
    "shift.rotation_angle": "float",
    "shift.translation": "floats",
    "shift.scale": "floats",
    "shift.noise_sigma": "float",
}
_EXPERIMENT_KEYS = {
    "seeds": "ints",
    "variants": "strs",
    "output_dir": "str",
    "formats": "strs",
    "checkpoint_every": "int",
}
_SWEEP_KEYS = {"taus": "floats"}


def _darl_keys():
    kinds = {int: "int", float: "float", str: "str", tuple: "ints"}
    defaults = DarlConfig()
    return {
        name: kinds[type(getattr(defaults, name))]
        for name in DarlConfig.field_names()
        if name != "seed"
    }


def valid_keys():
    """Every accepted config key, fully qualified."""
    out = [f"task.{k}" for k in _TASK_KEYS]
    out += [f"darl.{k}" for k in _darl_keys()]
    out += [f"experiment.{k}" for k in _EXPERIMENT_KEYS]
    out += [f"sweep.{k}" for k in _SWEEP_KEYS]
    return out


def _key_kind(key):
    section, _, name = key.partition(".")
    table = {
        "task": _TASK_KEYS,
        "darl": _darl_keys(),
        "experiment": _EXPERIMENT_KEYS,
        "sweep": _SWEEP_KEYS,
    }.get(section, {})
    if name not in table:
        raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(valid_keys())}")
    return table[name]


def _convert(key, kind, raw):
    scalar = {"int": int, "float": float, "str": str}
    try:
        if kind in scalar:
            if isinstance(raw, str):
                raw = raw.strip()
            if kind == "int" and isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            return scalar[kind](raw)
        if isinstance(raw, str):
            raw = [p for p in (s.strip() for s in raw.split(",")) if p]
        return tuple(scalar[kind[:-1]](p) for p in raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{key} = {raw!r}: expected {kind}") from None


@dataclass
class ExperimentSpec:
    """Everything needed to reproduce a batch of runs.

    Attributes
    ----------
    task : dict
        Keyword arguments for :func:`generate_task` other than ``seed`` and
        ``shift``; the shift lives in ``shift``.
    shift : ShiftSpec
    darl : DarlConfig
        Run hyperparameters; its ``seed`` is replaced per run.
    seeds : tuple of int
    variants : tuple of str
    output_dir : Path
    formats : tuple of str
        Subset of ``("csv", "summary", "json")``.
    checkpoint_every : int
        Save a resumable checkpoint every this many outer iterations; 0
        saves only at the end of a run.
    sweep_taus : tuple of float
    """

    task: dict = field(default_factory=dict)
    shift: ShiftSpec = field(default_factory=ShiftSpec)
    darl: DarlConfig = field(default_factory=DarlConfig)
    seeds: tuple = (0, 1, 2)
    variants: tuple = ("full_darl",)
    output_dir: Path = Path("darl-out")
    formats: tuple = ("csv", "summary")
    checkpoint_every: int = 0
    sweep_taus: tuple = (0.0, 0.3, 0.9)

    def __post_init__(self):
        self.output_dir = Path(self.output_dir)
        self.validate()

    def validate(self):
        t = {**_task_defaults(), **self.task}
        if t["k_source"] < 2:
            raise ConfigError(f"task.k_source = {t['k_source']}: must be >= 2")
        if not 1 <= t["n_shared"] < t["k_source"]:
            raise ConfigError(f"task.n_shared = {t['n_shared']}: must lie in [1, task.k_source)")
        for name in ("d_in", "per_class_count_src", "per_class_count_tgt"):
            if t[name] < 1:
                raise ConfigError(f"task.{name} = {t[name]}: must be >= 1")
        if t["class_separation"] <= 0:
            raise ConfigError(f"task.class_separation = {t['class_separation']}: must be > 0")
        if t["cluster_std"] < 0:
            raise ConfigError(f"task.cluster_std = {t['cluster_std']}: must be >= 0")
        if self.shift.noise_sigma < 0:
            raise ConfigError(f"task.shift.noise_sigma = {self.shift.noise_sigma}: must be >= 0")
        if any(s <= 0 for s in self.shift.scale):
            raise ConfigError(f"task.shift.scale = {self.shift.scale}: factors must be > 0")
        if not self.seeds:
            raise ConfigError("experiment.seeds: need at least one seed")
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad or not self.variants:
            raise ConfigError(f"experiment.variants = {self.variants}: choose from {VARIANTS}")
        bad = [f for f in self.formats if f not in FORMATS]
        if bad:
            raise ConfigError(f"experiment.formats = {self.formats}: choose from {FORMATS}")
        if self.checkpoint_every < 0:
            raise ConfigError(f"experiment.checkpoint_every = {self.checkpoint_every}: must be >= 0")
        if any(not 0.0 <= t <= 1.0 for t in self.sweep_taus):
            raise ConfigError(f"sweep.taus = {self.sweep_taus}: every value must lie in [0, 1]")
        probe = self.output_dir
        while not probe.exists() and probe != probe.parent:
            probe = probe.parent
        if not os.access(probe, os.W_OK):
            raise ConfigError(f"experiment.output_dir = {self.output_dir}: not writable")

    def make_task(self, seed):
        return generate_task(seed=seed, shift=self.shift, **self.task)

    def config(self, seed, **overrides):
        return replace(self.darl, seed=seed, **overrides)


def _task_defaults():
    return {
        "k_source": 4, "n_shared": 2, "d_in": 2, "per_class_count_src": 50,
        "per_class_count_tgt": 40, "class_separation": 4.0, "cluster_std": 0.75,
        "phase": DEFAULT_PHASE,
    }


def read_config_file(path):
    """Parse ``key = value`` lines into an ordered dict of raw strings."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def parse_config(path=None, overrides=None):
    """Build an :class:`ExperimentSpec` from a config file plus overrides.

    Parameters
    ----------
    path : str or Path, optional
        Config file.  Omitted means all defaults.
    overrides : dict, optional
        Fully qualified key to value (string or already typed).  These win
        over file values.

    Raises
    ------
    ConfigError
        Unknown key (the message lists the valid ones), unparsable value
        or out-of-range value.  The message names the offending key.
    """
    raw = read_config_file(path) if path is not None else {}
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    values = {key: _convert(key, _key_kind(key), v) for key, v in raw.items()}

    task, shift_kw, darl_kw, exp_kw = {}, {}, {}, {}
    for key, v in values.items():
        section, _, name = key.partition(".")
        if section == "task" and name.startswith("shift."):
            shift_kw[name[len("shift."):]] = v
        elif section == "task":
            task[name] = v
        elif section == "darl":
            darl_kw[name] = v
        elif section == "experiment":
            exp_kw[name] = v
        else:
            exp_kw["sweep_taus"] = v
    try:
        shift = ShiftSpec(**shift_kw)
    except ValueError as exc:
        named = [k for k in shift_kw if k in str(exc)]
        key = f"task.shift.{named[0]}" if named else "task.shift"
        raise ConfigError(f"{key}: {exc}") from exc
    return ExperimentSpec(task=task, shift=shift, darl=DarlConfig(**darl_kw), **exp_kw)


def spec_to_config_text(spec):
    """Render ``spec`` back to config-file text that :func:`parse_config` reads."""
    def fmt(v):
        if isinstance(v, (tuple, list)):
            return ", ".join(fmt(x) for x in v)
        if isinstance(v, float):
            return format(v, ".17g")
        return str(v)

    lines = [f"task.{k} = {fmt(v)}" for k, v in spec.task.items()]
    lines += [f"task.shift.{f.name} = {fmt(getattr(spec.shift, f.name))}" for f in fields(ShiftSpec)]
    lines += [f"darl.{k} = {fmt(getattr(spec.darl, k))}" for k in _darl_keys()]
    lines += [
        f"experiment.seeds = {fmt(spec.seeds)}",
        f"experiment.variants = {fmt(spec.variants)}",
        f"experiment.output_dir = {spec.output_dir}",
        f"experiment.formats = {fmt(spec.formats)}",
        f"experiment.checkpoint_every = {spec.checkpoint_every}",
        f"sweep.taus = {fmt(spec.sweep_taus)}",
    ]
    return "\n".join(lines) + "\n"


# -- metric export -----------------------------------------------------------

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def csv_columns(k_source):
    return CSV_COLUMNS + tuple(f"mu_{k}" for k in range(k_source))


def metrics_csv_text(metrics):
    """The per-iteration CSV as a string with ``\\n`` line endings."""
    rows = [",".join(csv_columns(metrics.k_source))]
    for rec in metrics.records:
        cells = [_fmt(getattr(rec, c)) for c in CSV_COLUMNS] + [_fmt(m) for m in rec.mu]
        rows.append(",".join(cells))
    return "\n".join(rows) + "\n"


def read_metrics_csv(path):
    """Parse an exported CSV into ``{column: numpy array}``."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty metrics file")
    header = lines[0].split(",")
    table = np.array([[float(c) for c in line.split(",")] for line in lines[1:]], dtype=np.float64)
    table = table.reshape(-1, len(header))
    return {name: table[:, j] for j, name in enumerate(header)}


def trend_slope(values):
    """Least-squares slope of ``values`` against their position (finite entries only)."""
    values = np.asarray(values, dtype=np.float64)
    x = np.arange(1, values.size + 1, dtype=np.float64)
    ok = np.isfinite(values)
    if ok.sum() < 2:
        return math.nan
    return float(np.polyfit(x[ok], values[ok], 1)[0])


def summarize_columns(cols):
    """Final numbers of a run, computed only from CSV columns."""
    n_sel = cols["n_selected"].sum()
    return {
        "iterations": int(cols["iteration"].size),
        "first_test_error": float(cols["test_error"][0]),
        "final_test_error": float(cols["test_error"][-1]),
        "min_test_error": float(np.nanmin(cols["test_error"])),
        "test_error_slope": trend_slope(cols["test_error"]),
        "final_target_acc": float(cols["target_acc"][-1]),
        "final_precision": float(cols["precision"][-1]),
        "pooled_precision": 1.0 if n_sel == 0 else float(cols["n_selected_shared"].sum() / n_sel),
        "mean_episode_len": float(cols["episode_len"].mean()),
        "total_selected": int(n_sel),
    }


def summary_text(summary, variant):
    lines = [f"variant {variant}"] + [f"{k} {_fmt(v)}" for k, v in summary.items()]
    return "\n".join(lines) + "\n"


def export_metrics(metrics, directory, formats=("csv", "summary"), stem="metrics"):
    """Write ``metrics`` into ``directory``.  Returns the written paths.

    ``csv`` gives ``<stem>.csv``: a header plus one row per outer iteration,
    columns in :data:`CSV_COLUMNS` order followed by ``mu_0..mu_{K-1}``.
    Floats use 17 significant digits, booleans are 0/1.  ``summary`` gives
    ``<stem>.summary.txt`` with ``key value`` lines derived from the CSV
    rows alone.  ``json`` gives ``<stem>.json`` with the full records.
    """
    if not metrics.records:
        raise ValueError("no iteration records to export")
    bad = [f for f in formats if f not in FORMATS]
    if bad:
        raise ValueError(f"unknown export formats {bad}; choose from {FORMATS}")
    directory = Path(directory)
    written = []
    try:
        directory.mkdir(parents=True, exist_ok=True)
        csv_text = metrics_csv_text(metrics)
        if "csv" in formats:
            path = directory / f"{stem}.csv"
            path.write_text(csv_text, newline="")
            written.append(path)
        if "summary" in formats:
            header, *body = csv_text.splitlines()
            names = header.split(",")
            table = np.array([[float(c) for c in row.split(",")] for row in body])
            summary = summarize_columns({n: table[:, j] for j, n in enumerate(names)})
            path = directory / f"{stem}.summary.txt"
            path.write_text(summary_text(summary, metrics.variant), newline="")
            written.append(path)
        if "json" in formats:
            path = directory / f"{stem}.json"
            path.write_text(json.dumps(metrics.to_dict(), indent=1) + "\n", newline="")
            written.append(path)
    except OSError as exc:
        raise OSError(f"{exc.filename or directory}: {exc.strerror}") from exc
    return written


# -- drivers -----------------------------------------------------------------

def run_single(spec, seed, variant="full_darl", out_dir=None, **cfg_overrides):
    """One run; exports metrics and a final checkpoint when ``out_dir`` is set."""
    trainer = DarlTrainer(spec.make_task(seed), spec.config(seed, **cfg_overrides), variant)
    trainer.pretrain()
    while not trainer.done and variant != "source_only":
        trainer.step()
        if out_dir is not None and spec.checkpoint_every and trainer.iteration % spec.checkpoint_every == 0:
            save_checkpoint(trainer, Path(out_dir) / "checkpoint")
    if out_dir is not None:
        if trainer.metrics.records:
            export_metrics(trainer.metrics, out_dir, spec.formats)
        save_checkpoint(trainer, Path(out_dir) / "checkpoint")
    return trainer


def _write_table(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)] + [",".join(_fmt(v) if not isinstance(v, str) else v for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n", newline="")
    return path


def run_threshold_sweep(spec, tau_values=None, variant="full_darl", export=True):
    """Median final target accuracy over ``spec.seeds`` for each threshold.

    Returns a list of ``(tau, median_accuracy, per_seed_accuracies)`` rows.
    With ``export`` the table goes to ``<output_dir>/sweep.csv``.
    """
    taus = tuple(spec.sweep_taus if tau_values is None else tau_values)
    if len(taus) < 3:
        raise ConfigError(f"sweep.taus = {taus}: need at least 3 values")
    rows = []
    for tau in taus:
        accs = [
            run_single(spec, seed, variant, tau=float(tau)).metrics.final_target_accuracy
            for seed in spec.seeds
        ]
        rows.append((float(tau), float(np.median(accs)), tuple(accs)))
        logger.info("tau=%g median accuracy %.4f", tau, rows[-1][1])
    if export:
        _write_table(
            spec.output_dir / "sweep.csv",
            ["tau", "median_target_acc"] + [f"seed_{s}" for s in spec.seeds],
            [(t, m, *a) for t, m, a in rows],
        )
    return rows


def run_ablation_grid(spec, variants=None, export=True):
    """Every variant on every seed.  Returns ``{variant: [RunMetrics, ...]}``.

    With ``export`` each run's metrics go to ``<output_dir>/<variant>/seed_<s>``
    and a median table to ``<output_dir>/ablation.csv``.
    """
    variants = tuple(spec.variants if variants is None else variants)
    out = {}
    for variant in variants:
        out[variant] = []
        for seed in spec.seeds:
            run_dir = spec.output_dir / variant / f"seed_{seed}" if export else None
            out[variant].append(run_single(spec, seed, variant, run_dir).metrics)
    if export:
        rows = []
        for variant, runs in out.items():
            accs = [m.final_target_accuracy for m in runs]
            rows.append((variant, float(np.median(accs)), *accs))
        _write_table(
            spec.output_dir / "ablation.csv",
            ["variant", "median_target_acc"] + [f"seed_{s}" for s in spec.seeds],
            rows,
        )
    return out


# -- checkpoints -------------------------------------------------------------

_NETS = ("f", "c", "d")
_RNG_NAMES = ("data", "agent", "adversarial")
CHECKPOINT_VERSION = 1


def save_checkpoint(trainer, directory):
    """Write every piece of resumable state of ``trainer`` into ``directory``.

    Networks use :func:`darl.nn.save_params`; the replay buffer goes to
    ``replay.npz``; generator states, config, metrics and the iteration
    counter go to ``state.json``; the task to ``task.txt``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    nets = trainer.nets
    for name in _NETS:
        nn.save_params(getattr(nets, f"{name}_params"), getattr(nets, f"{name}_spec"), directory, name)
    dqn = trainer.agent.dqn
    nn.save_params(dqn.params, dqn.spec, directory, "dqn")
    buf = trainer.agent.buffer
    replay = directory / "replay.npz"
    if len(buf):
        with open(replay, "wb") as fh:
            np.savez(fh, **buf.to_arrays())
    elif replay.exists():
        replay.unlink()
    save_task(trainer.task, directory / "task.txt")
    state = {
        "version": CHECKPOINT_VERSION,
        "variant": trainer.variant,
        "iteration": trainer.iteration,
        "config": asdict(trainer.cfg),
        "rng": {name: trainer.rngs[name].bit_generator.state for name in _RNG_NAMES},
        "replay_rng": buf.rng.bit_generator.state,
        "replay_capacity": buf.capacity,
        "replay_size": len(buf),
        "pretrain_curve": list(trainer.pretrain_curve),
        "metrics": None if trainer.metrics is None else trainer.metrics.to_dict(),
    }
    (directory / "state.json").write_text(json.dumps(state) + "\n")
    return directory


def load_checkpoint(directory):
    """Rebuild a :class:`DarlTrainer` from :func:`save_checkpoint` output.

    Everything is read and checked before the trainer is assembled, so a
    failure never yields a half-restored object.

    Raises
    ------
    IntegrityError
        Missing or malformed files, or network shapes that disagree with
        the stored config.
    """
    directory = Path(directory)
    try:
        state = json.loads((directory / "state.json").read_text())
        cfg_dict = state["config"]
        cfg = DarlConfig(**cfg_dict)
        task = load_task(directory / "task.txt")
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise IntegrityError(f"{directory}: unreadable checkpoint state ({exc})") from exc
    if state.get("version") != CHECKPOINT_VERSION:
        raise IntegrityError(f"{directory}: checkpoint version {state.get('version')!r} not supported")

    loaded = {}
    for name in _NETS + ("dqn",):
        try:
            loaded[name] = nn.load_params(directory, name)
        except IntegrityError:
            raise
        except OSError as exc:
            raise IntegrityError(f"{directory}: missing network files for {name!r} ({exc})") from exc

    # shapes the stored config implies, built from a throwaway trainer
    fresh = DarlTrainer(task, cfg, state["variant"])
    expect = {name: getattr(fresh.nets, f"{name}_spec") for name in _NETS}
    expect["dqn"] = fresh.agent.dqn.spec
    for name, (_, spec) in loaded.items():
        if spec != expect[name]:
            raise IntegrityError(
                f"{directory}: network {name!r} has widths {spec.layer_widths}, "
                f"config implies {expect[name].layer_widths}"
            )

    size = state.get("replay_size", 0)
    if size:
        try:
            with np.load(directory / "replay.npz") as z:
                arrays = {k: z[k] for k in z.files}
            buf = qlearn.ReplayBuffer.from_arrays(arrays, state["replay_rng"])
        except (OSError, ValueError, KeyError, EOFError) as exc:
            raise IntegrityError(f"{directory / 'replay.npz'}: {exc}") from exc
        want = (cfg.feature_dim, cfg.n_candidates)
        if arrays["state_features"].shape[1:] != want or len(buf) != size:
            raise IntegrityError(
                f"{directory / 'replay.npz'}: states {arrays['state_features'].shape[1:]} x {len(buf)}, "
                f"expected {want} x {size}"
            )
    else:
        buf = qlearn.ReplayBuffer(state["replay_capacity"])
        buf.rng.bit_generator.state = state["replay_rng"]

    trainer = fresh
    f, c, d = (loaded[n][0] for n in _NETS)
    trainer.nets = AdvNets(f, c, d, expect["f"], expect["c"], expect["d"], task.k_source)
    for name in _RNG_NAMES:
        trainer.rngs[name].bit_generator.state = state["rng"][name]
    trainer.agent.dqn = qlearn.DQN(loaded["dqn"][0], expect["dqn"])
    trainer.agent.buffer = buf
    trainer.agent.rng = trainer.rngs["agent"]
    trainer.iteration = int(state["iteration"])
    trainer.pretrain_curve = list(state["pretrain_curve"])
    trainer.metrics = None if state["metrics"] is None else RunMetrics.from_dict(state["metrics"])
    return trainer


def evaluate_checkpoint(directory):
    """Target accuracy of the networks stored in a checkpoint."""
    trainer = load_checkpoint(directory)
    return evaluate(trainer.nets, trainer.task)
