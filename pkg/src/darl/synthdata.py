"""Seeded partial-domain-adaptation tasks built from Gaussian blobs.

The source domain has ``k_source`` classes whose means sit on a circle in
the first two coordinates.  The target domain samples only the first
``n_shared`` classes and then passes them through an affine shift plus
Gaussian noise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ParameterError

DEFAULT_PHASE = math.radians(110.0)


@dataclass(frozen=True)
class ShiftSpec:
    """Affine domain shift ``x' = R(angle) diag(scale) x + translation + noise``."""

    rotation_angle: float = math.radians(30.0)
    translation: tuple = (2.0, 1.0)
    scale: tuple = (1.2, 0.8)
    noise_sigma: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))
        object.__setattr__(self, "scale", tuple(float(s) for s in self.scale))
        if any(s <= 0 for s in self.scale):
            raise ParameterError(f"scale factors must be > 0, got {self.scale}")
        if self.noise_sigma < 0:
            raise ParameterError("noise_sigma must be >= 0")

    @classmethod
    def identity(cls, dim=2):
        return cls(0.0, (0.0,) * dim, (1.0,) * dim, 0.0)


@dataclass(frozen=True)
class DaTask:
    """A source/target pair.  Arrays are column-major: one instance per column.

    ``target_y_hidden`` is ground truth kept for evaluation only; training
    code must not read it.
    """

    source_x: np.ndarray
    source_y: np.ndarray
    target_x: np.ndarray
    target_y_hidden: np.ndarray
    shared_classes: frozenset
    k_source: int
    seed: int = 0
    shift: ShiftSpec = field(default_factory=ShiftSpec)

    def __post_init__(self):
        if self.source_x.shape[1] < 1 or self.target_x.shape[1] < 1:
            raise ParameterError("both domains need at least one instance")
        if self.source_x.shape[0] != self.target_x.shape[0]:
            raise ParameterError("source and target dimensions differ")
        if self.source_y.shape != (self.source_x.shape[1],):
            raise ParameterError("source_y length does not match source_x")
        if self.target_y_hidden is not None and self.target_y_hidden.shape != (self.target_x.shape[1],):
            raise ParameterError("target_y_hidden length does not match target_x")
        if self.shared_classes is not None:
            shared = frozenset(int(c) for c in self.shared_classes)
            object.__setattr__(self, "shared_classes", shared)
            if not shared or not shared < frozenset(range(self.k_source)):
                raise ParameterError("shared classes must be a nonempty strict subset of the source classes")
            if self.target_y_hidden is not None and not set(self.target_y_hidden.tolist()) <= shared:
                raise ParameterError("target labels outside the shared classes")

    @property
    def d_in(self):
        return self.source_x.shape[0]

    @property
    def n_source(self):
        return self.source_x.shape[1]

    @property
    def n_target(self):
        return self.target_x.shape[1]

    @property
    def outlier_classes(self):
        # unknown when the shared label set was never recorded
        if self.shared_classes is None:
            return None
        return frozenset(range(self.k_source)) - self.shared_classes


def rotation_matrix(angle, dim):
    """Identity except for a planar rotation of the first two coordinates."""
    r = np.eye(dim)
    if dim >= 2:
        c, s = math.cos(angle), math.sin(angle)
        r[:2, :2] = [[c, -s], [s, c]]
    return r


def _broadcast(values, dim, fill):
    values = tuple(values)
    if len(values) == dim:
        return np.array(values, dtype=np.float64)
    if len(values) < dim:
        return np.array(values + (fill,) * (dim - len(values)), dtype=np.float64)
    raise ParameterError(f"shift has {len(values)} components but points have {dim} dimensions")


def apply_domain_shift(points, shift, seed):
    """Apply ``shift`` to column points ``(dim, n)``.

    Translation and scale shorter than ``dim`` are padded with 0 and 1.
    """
    points = np.asarray(points, dtype=np.float64)
    dim = points.shape[0]
    scale = _broadcast(shift.scale, dim, 1.0)
    translation = _broadcast(shift.translation, dim, 0.0)
    out = rotation_matrix(shift.rotation_angle, dim) @ (scale[:, None] * points) + translation[:, None]
    if shift.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        out = out + rng.normal(0.0, shift.noise_sigma, size=out.shape)
    return out


def class_means(k_source, d_in, class_separation, phase=0.0):
    """Blob centres, evenly spaced on a circle of radius ``class_separation``.

    Class 0 sits at angle ``phase``; the others follow counter-clockwise.
    """
    angles = phase + 2.0 * np.pi * np.arange(k_source) / k_source
    means = np.zeros((d_in, k_source))
    means[0] = class_separation * np.cos(angles)
    if d_in > 1:
        means[1] = class_separation * np.sin(angles)
    return means


def generate_task(
    seed=0,
    k_source=4,
    n_shared=2,
    d_in=2,
    per_class_count_src=50,
    per_class_count_tgt=40,
    class_separation=4.0,
    shift=None,
    cluster_std=0.75,
    phase=DEFAULT_PHASE,
):
    """Draw a partial-domain-adaptation task.

    Parameters
    ----------
    seed : int
        Seeds every random draw; identical arguments give a bit-identical task.
    k_source : int
        Number of source classes.
    n_shared : int
        Classes ``0 .. n_shared-1`` also occur in the target.
    d_in : int
        Input dimension.
    per_class_count_src, per_class_count_tgt : int
        Instances drawn per source class and per shared target class.
    class_separation : float
        Radius of the circle holding the class means.
    shift : ShiftSpec, optional
        Target domain shift; defaults to :class:`ShiftSpec()`.
    cluster_std : float
        Isotropic standard deviation of every class blob.
    phase : float
        Angle (radians) of class 0's mean on the circle.

    Returns
    -------
    DaTask
    """
    if not 1 <= n_shared < k_source:
        raise ParameterError(f"need 1 <= n_shared < k_source, got n_shared={n_shared}, k_source={k_source}")
    if d_in < 1 or per_class_count_src < 1 or per_class_count_tgt < 1:
        raise ParameterError("d_in and per-class counts must be >= 1")
    if class_separation <= 0:
        raise ParameterError("class_separation must be > 0")
    if cluster_std < 0:
        raise ParameterError("cluster_std must be >= 0")
    shift = ShiftSpec() if shift is None else shift

    src_seq, tgt_seq, noise_seq = np.random.SeedSequence(seed).spawn(3)
    means = class_means(k_source, d_in, class_separation, phase)

    source_y = np.repeat(np.arange(k_source), per_class_count_src)
    rng = np.random.default_rng(src_seq)
    source_x = means[:, source_y] + rng.normal(0.0, cluster_std, size=(d_in, source_y.size))

    target_y = np.repeat(np.arange(n_shared), per_class_count_tgt)
    rng = np.random.default_rng(tgt_seq)
    clean = means[:, target_y] + rng.normal(0.0, cluster_std, size=(d_in, target_y.size))
    target_x = apply_domain_shift(clean, shift, noise_seq)

    return DaTask(
        source_x=source_x,
        source_y=source_y,
        target_x=target_x,
        target_y_hidden=target_y,
        shared_classes=frozenset(range(n_shared)),
        k_source=k_source,
        seed=seed,
        shift=shift,
    )


def dataset_summary(task):
    """Per-class instance counts in each domain plus the class partition."""
    source_counts = np.bincount(task.source_y, minlength=task.k_source)
    summary = {
        "k_source": task.k_source,
        "n_source": task.n_source,
        "n_target": task.n_target,
        "source_counts": {c: int(n) for c, n in enumerate(source_counts)},
    }
    if task.shared_classes is not None:
        summary["shared_classes"] = sorted(task.shared_classes)
        summary["outlier_classes"] = sorted(task.outlier_classes)
    if task.target_y_hidden is not None:
        target_counts = np.bincount(task.target_y_hidden, minlength=task.k_source)
        summary["target_counts"] = {c: int(n) for c, n in enumerate(target_counts)}
    return summary


# -- task files --------------------------------------------------------------

def _fmt(x):
    return format(float(x), ".17g")


def save_task(task, path):
    """Write ``task`` as a ``#``-prefixed header and a whitespace-separated body.

    Body rows are ``S <label> <x_1> ... <x_d>`` for source instances and
    ``T <hidden label> <x_1> ... <x_d>`` for target instances.
    """
    s = task.shift
    header = [
        "# darl-task 1",
        f"# d_in {task.d_in}",
        f"# k_source {task.k_source}",
        f"# n_source {task.n_source}",
        f"# n_target {task.n_target}",
        "# shared " + " ".join(str(c) for c in sorted(task.shared_classes or ())),
        f"# target_labels {int(task.target_y_hidden is not None)}",
        f"# seed {task.seed}",
        f"# shift.rotation_angle {_fmt(s.rotation_angle)}",
        "# shift.translation " + " ".join(_fmt(t) for t in s.translation),
        "# shift.scale " + " ".join(_fmt(v) for v in s.scale),
        f"# shift.noise_sigma {_fmt(s.noise_sigma)}",
    ]
    rows = []
    hidden = task.target_y_hidden
    if hidden is None:
        hidden = np.full(task.n_target, -1)
    for tag, x, y in (("S", task.source_x, task.source_y), ("T", task.target_x, hidden)):
        for j in range(x.shape[1]):
            rows.append(f"{tag} {int(y[j])} " + " ".join(_fmt(v) for v in x[:, j]))
    Path(path).write_text("\n".join(header + rows) + "\n")


def load_task(path):
    """Read a file written by :func:`save_task`."""
    head, src, tgt = {}, [], []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            head[parts[0]] = parts[1:]
            continue
        tag, label, *coords = line.split()
        (src if tag == "S" else tgt).append((int(label), [float(c) for c in coords]))
    if "d_in" not in head or "k_source" not in head:
        raise ParameterError(f"{path}: not a task file")
    if len(src) != int(head["n_source"][0]) or len(tgt) != int(head["n_target"][0]):
        raise ParameterError(f"{path}: instance counts disagree with the header")
    shift = ShiftSpec(
        float(head["shift.rotation_angle"][0]),
        tuple(float(t) for t in head["shift.translation"]),
        tuple(float(v) for v in head["shift.scale"]),
        float(head["shift.noise_sigma"][0]),
    )
    labelled = head.get("target_labels", ["1"])[0] == "1"
    return DaTask(
        source_x=np.array([c for _, c in src]).T.reshape(int(head["d_in"][0]), -1),
        source_y=np.array([y for y, _ in src], dtype=np.int64),
        target_x=np.array([c for _, c in tgt]).T.reshape(int(head["d_in"][0]), -1),
        target_y_hidden=np.array([y for y, _ in tgt], dtype=np.int64) if labelled else None,
        shared_classes=frozenset(int(c) for c in head["shared"]) or None,
        k_source=int(head["k_source"][0]),
        seed=int(head["seed"][0]),
        shift=shift,
    )
