"""Synthetic paired condition/target volumes with group-graded heterogeneity.

Every subject is a jittered ellipsoidal "anatomy". The condition volume
renders that anatomy as a bright outer shell plus an inner blob (a crude
structural contrast); the target volume is a fixed smooth radial transform
of the same geometry, so the cross-modality mapping is learnable from the
condition alone. On top of that, each target receives a subject-specific
low-frequency random field scaled by a per-group amplitude: group A targets
are nearly deterministic given the condition, group C targets deviate the
most. That graded unpredictability is the property the evaluation pipeline
is meant to detect.

Anatomy depends only on the subject seed, never on the group, so groups can
be compared on identical anatomy sets.
"""

from __future__ import annotations

import csv
import enum
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .volume import Volume3D, load_volume, save_volume

TRAIN_FRACTION = 670 / 838  # published split ratio reused for the phantoms
COSINE_COMPONENTS = 10


class GroupLabel(enum.Enum):
    GroupA = 0
    GroupB = 1
    GroupC = 2

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class PairedSample:
    condition: Volume3D
    target: Volume3D
    group: GroupLabel
    subject_seed: int


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (16, 16, 16)
    counts: tuple[int, int, int] = (40, 40, 40)          # per group A, B, C
    sigmas: tuple[float, float, float] = (0.02, 0.10, 0.25)  # heterogeneity scales
    axes_range: tuple[float, float] = (0.55, 0.80)       # ellipsoid semi-axes
    center_jitter: float = 0.05
    shell_thickness: float = 0.22
    noise_floor: float = 0.01

    def validate(self):
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise ConfigError(f"bad dims {self.dims}")
        if any(d % 16 for d in self.dims):
            raise ConfigError(f"dims {self.dims} must be divisible by 16")
        if len(self.counts) != 3 or any(c < 2 for c in self.counts):
            raise ConfigError("need at least 2 subjects per group")
        if not (0.0 <= self.sigmas[0] < self.sigmas[1] < self.sigmas[2]):
            raise ConfigError(
                f"heterogeneity scales must strictly increase A->C, got {self.sigmas}"
            )
        lo, hi = self.axes_range
        if not (0.1 <= lo <= hi <= 0.95):
            raise ConfigError(f"axes_range {self.axes_range} outside (0.1, 0.95)")
        if self.shell_thickness <= 0 or self.noise_floor < 0:
            raise ConfigError("shell_thickness must be > 0 and noise_floor >= 0")


def paper_ratio_counts(total: int) -> tuple[int, int, int]:
    """Split `total` subjects across groups in the published cohort
    proportions (largest-remainder rounding, sums exactly to total)."""
    if total < 6:
        raise ConfigError(f"total {total} too small for three groups")
    weights = np.array([108.0, 163.0, 80.0])
    quotas = total * weights / weights.sum()
    counts = np.floor(quotas).astype(int)
    remainder = total - counts.sum()
    for idx in np.argsort(-(quotas - counts))[:remainder]:
        counts[idx] += 1
    return tuple(int(c) for c in counts)


def _normalized_grid(dims):
    """Cell-center coordinates spanning [-1, 1] per axis, as three
    broadcastable arrays."""
    axes = [(-1.0 + 2.0 * (np.arange(n) + 0.5) / n) for n in dims]
    return np.meshgrid(*axes, indexing="ij", sparse=True)


def _radial_field(dims, axes, center):
    gx, gy, gz = _normalized_grid(dims)
    return np.sqrt(
        ((gx - center[0]) / axes[0]) ** 2
        + ((gy - center[1]) / axes[1]) ** 2
        + ((gz - center[2]) / axes[2]) ** 2
    )


def _low_frequency_field(dims, rng: np.random.Generator) -> np.ndarray:
    """Sum of random-phase 3D cosines, normalized to zero mean / unit std.

    Low spatial frequencies (under ~1.5 cycles per span) give structured,
    spatially coherent deviations rather than white noise.
    """
    gx, gy, gz = _normalized_grid(dims)
    field = np.zeros(dims, dtype=np.float64)
    for _ in range(COSINE_COMPONENTS):
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        cycles = rng.uniform(0.5, 1.5)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        wave = np.pi * cycles
        field += np.cos(
            wave * (direction[0] * gx + direction[1] * gy + direction[2] * gz) + phase
        )
    field -= field.mean()
    std = field.std()
    if std > 0:
        field /= std
    return field


def generate_pair(group: GroupLabel, subject_seed: int, cfg: PhantomConfig) -> PairedSample:
    """Deterministically render one (condition, target) pair."""
    cfg.validate()
    anatomy_rng = np.random.default_rng(np.random.SeedSequence([subject_seed, 0]))
    perturb_rng = np.random.default_rng(
        np.random.SeedSequence([subject_seed, 1 + group.value])
    )

    lo, hi = cfg.axes_range
    axes = anatomy_rng.uniform(lo, hi, size=3)
    center = anatomy_rng.uniform(-cfg.center_jitter, cfg.center_jitter, size=3)
    rho = _radial_field(cfg.dims, axes, center)

    th = cfg.shell_thickness
    condition = 0.95 * np.exp(-(((rho - 0.85) / th) ** 2)) + 0.45 * np.exp(
        -(((rho - 0.35) / (1.4 * th)) ** 2)
    )
    condition += cfg.noise_floor * anatomy_rng.standard_normal(cfg.dims)
    condition = np.clip(condition, 0.0, 1.0)

    # uptake concentrated in a mid-radius band of the same anatomy
    target = 0.9 * np.exp(-(((rho - 0.55) / 0.28) ** 2)) + 0.1 * np.exp(
        -((rho / 0.5) ** 2)
    )
    sigma = cfg.sigmas[group.value]
    if sigma > 0:
        interior = 1.0 / (1.0 + np.exp((rho - 0.9) / 0.15))
        target = target + sigma * _low_frequency_field(cfg.dims, perturb_rng) * interior
    target = np.clip(target, 0.0, 1.0)

    return PairedSample(
        condition=Volume3D(condition),
        target=Volume3D(target),
        group=group,
        subject_seed=int(subject_seed),
    )


@dataclass(frozen=True)
class ManifestRow:
    pair_id: str
    group: GroupLabel
    split: str
    subject_seed: int


def _split_counts(n: int) -> tuple[int, int, int]:
    n_train = round(n * TRAIN_FRACTION)
    leftover = n - n_train
    n_val = leftover // 2
    n_test = leftover - n_val
    return n_train, n_val, n_test


def generate_dataset(cfg: PhantomConfig, master_seed: int):
    """Produce all pairs plus a stratified train/val/test manifest.

    Split sizes per group follow the published train fraction, with the
    remainder divided evenly between validation and test. Everything is a
    pure function of (cfg, master_seed).
    """
    cfg.validate()
    split_rng = np.random.default_rng(np.random.SeedSequence([master_seed, 0xD5]))
    pairs: dict[str, PairedSample] = {}
    manifest: list[ManifestRow] = []
    for group in GroupLabel:
        n = cfg.counts[group.value]
        n_train, n_val, n_test = _split_counts(n)
        if min(n_train, n_val, n_test) < 1:
            raise ConfigError(
                f"{group}: {n} subjects cannot populate train/val/test "
                f"(got {n_train}/{n_val}/{n_test})"
            )
        splits = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
        order = split_rng.permutation(n)
        assignment = dict(zip(order.tolist(), splits))
        for i in range(n):
            seed_seq = np.random.SeedSequence([master_seed, 1 + group.value, i])
            subject_seed = int(seed_seq.generate_state(1)[0])
            pair_id = f"{group.name}_{i:03d}"
            pairs[pair_id] = generate_pair(group, subject_seed, cfg)
            manifest.append(
                ManifestRow(pair_id, group, assignment[i], subject_seed)
            )
    return pairs, manifest


# ---------------------------------------------------------------------------
# dataset directory layout

def save_dataset(pairs: dict, manifest, root) -> None:
    """Write `<root>/<split>/<pair_id>_{cond,targ}.vvol` plus manifest.csv."""
    os.makedirs(root, exist_ok=True)
    for row in manifest:
        split_dir = os.path.join(root, row.split)
        os.makedirs(split_dir, exist_ok=True)
        pair = pairs[row.pair_id]
        save_volume(pair.condition, os.path.join(split_dir, f"{row.pair_id}_cond.vvol"))
        save_volume(pair.target, os.path.join(split_dir, f"{row.pair_id}_targ.vvol"))
    with open(os.path.join(root, "manifest.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["pair_id", "group", "split", "subject_seed"])
        for row in manifest:
            writer.writerow([row.pair_id, row.group.name, row.split, row.subject_seed])


def load_manifest(root) -> list[ManifestRow]:
    path = os.path.join(root, "manifest.csv")
    if not os.path.exists(path):
        raise ConfigError(f"no manifest.csv under {root}")
    rows = []
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            try:
                rows.append(
                    ManifestRow(
                        pair_id=rec["pair_id"],
                        group=GroupLabel[rec["group"]],
                        split=rec["split"],
                        subject_seed=int(rec["subject_seed"]),
                    )
                )
            except (KeyError, ValueError) as exc:
                raise ConfigError(f"malformed manifest row {rec!r}: {exc}") from exc
    return rows


def load_pair(root, row: ManifestRow) -> PairedSample:
    split_dir = os.path.join(root, row.split)
    return PairedSample(
        condition=load_volume(os.path.join(split_dir, f"{row.pair_id}_cond.vvol")),
        target=load_volume(os.path.join(split_dir, f"{row.pair_id}_targ.vvol")),
        group=row.group,
        subject_seed=row.subject_seed,
    )


def load_split(root, split: str) -> list[tuple[ManifestRow, PairedSample]]:
    rows = [r for r in load_manifest(root) if r.split == split]
    return [(row, load_pair(root, row)) for row in rows]
