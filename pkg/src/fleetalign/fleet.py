"""Fleet protocol: synthetic fleet, pair preparation, all-pairs sweep, MMD selection, tables."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .data import (SplitSpec, UnitDataset, apply_normalization, clean, fit_normalization, read_csv,
                   split, write_csv)
from .errors import ConfigError, DataError, DivergenceError
from .trainer import KINDS, ArchitectureSpec, PairResult, train_pair

log = logging.getLogger(__name__)

REPRESENTATIVE_CHANNELS = ("output_power", "igv_angle")


# ------------------------------------------------------------------ fleet layout
@dataclass(frozen=True)
class UnitInfo:
    unit_id: str
    role: str  # "source" or "target"
    detection_time: int | None = None
    regime: tuple = ()
    path: str = ""

    def __post_init__(self):
        if self.role not in ("source", "target"):
            raise ConfigError(f"{self.unit_id}: role must be source or target, got {self.role!r}")
        if (self.role == "target") != (self.detection_time is not None):
            raise ConfigError(f"{self.unit_id}: targets need a detection time and sources must not have one")


@dataclass
class FleetSpec:
    units: list
    datasets: dict = field(default_factory=dict)
    train_window: int = 1333
    blackout_window: int = 667

    @property
    def targets(self) -> list:
        return [u for u in self.units if u.role == "target"]

    @property
    def sources(self) -> list:
        return [u for u in self.units if u.role == "source"]

    def unit(self, unit_id: str) -> UnitInfo:
        for u in self.units:
            if u.unit_id == unit_id:
                return u
        raise KeyError(unit_id)

    def write_manifest(self, directory) -> Path:
        """One CSV per unit plus ``manifest.csv``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        rows = []
        for u in self.units:
            path = directory / f"{u.unit_id}.csv"
            write_csv(self.datasets[u.unit_id], path)
            rows.append([u.unit_id, path.name, u.role,
                         "" if u.detection_time is None else str(u.detection_time),
                         ";".join(repr(float(r)) for r in u.regime)])
        manifest = directory / "manifest.csv"
        with open(manifest, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["unit_id", "path", "role", "detection_time", "regime"])
            w.writerows(rows)
            w.writerow(["#train_window", str(self.train_window), "#blackout_window", str(self.blackout_window), ""])
        return manifest

    @classmethod
    def read_manifest(cls, manifest) -> "FleetSpec":
        manifest = Path(manifest)
        if not manifest.exists():
            raise DataError(f"{manifest}: manifest not found")
        units, datasets = [], {}
        train_window, blackout = 1333, 667
        with open(manifest, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or header[:3] != ["unit_id", "path", "role"]:
                raise DataError(f"{manifest}: not a fleet manifest")
            for row in reader:
                if not row:
                    continue
                if row[0] == "#train_window":
                    train_window, blackout = int(row[1]), int(row[3])
                    continue
                uid, path, role, det = row[:4]
                regime = tuple(float(v) for v in row[4].split(";")) if len(row) > 4 and row[4] else ()
                u = UnitInfo(uid, role, int(det) if det else None, regime, path)
                units.append(u)
                datasets[uid] = read_csv(manifest.parent / path, uid)
        return cls(units, datasets, train_window, blackout)


# -------------------------------------------------------------- synthetic fleet
@dataclass(frozen=True)
class SyntheticFleetConfig:
    """Units share one generative family and differ only in regime parameters.

    Every unit's channels are one fleet-wide smooth nonlinear map of a latent
    operating state: dimension 0 is a fast (daily) load cycle, dimension 1 a
    seasonal sinusoid on a calendar shared by the fleet, the rest slow AR(1)
    modes. Per unit, the state is shifted by a regime center, the seasonal
    amplitude is scaled, and every channel except the representative ones
    carries a fixed calibration offset. ``rows`` spans one seasonal period.
    """

    n_units: int = 20
    n_targets: int = 2
    rows: int = 8000
    n_channels: int = 24
    latent_dim: int = 3
    regime_spread: float = 0.5
    seasonal_amplitude: float = 1.5
    seasonal_amplitude_spread: float = 0.2
    seasonal_phase: float = 0.0
    daily_amplitude: float = 0.5
    days_per_period: float = 365.0
    state_noise: float = 0.15
    noise_scale: float = 0.3
    unit_offset_scale: float = 1.0
    unit_gain_spread: float = 0.0
    fault_channels: int = 6
    fault_magnitude: float = 6.0
    fault_lead: int = 200
    faulty_rows: int = 300
    missing_rate: float = 0.002
    seed: int = 0

    def __post_init__(self):
        if self.noise_scale == 0 and self.state_noise == 0 and self.seasonal_amplitude == 0:
            raise ConfigError("degenerate fleet: zero noise and zero seasonal drift")
        if not 0 < self.n_targets < self.n_units:
            raise ConfigError("need at least one target and one source")
        if self.n_channels < 3 or self.latent_dim < 2:
            raise ConfigError("need at least three channels and a two-dimensional latent state")
        if self.faulty_rows + self.fault_lead + self.train_window + self.blackout_window >= self.rows:
            raise ConfigError("rows too few for the train / test / fault timeline")

    @property
    def train_window(self) -> int:
        return self.rows // 6

    @property
    def blackout_window(self) -> int:
        return self.rows // 12

    @property
    def detection_time(self) -> int:
        return self.rows - self.faulty_rows


def channel_names(n_channels: int) -> tuple:
    return REPRESENTATIVE_CHANNELS + tuple(f"ch{i:02d}" for i in range(2, n_channels))


def _ar1(rng: np.random.Generator, n: int, phi: float, scale: float) -> np.ndarray:
    """Stationary AR(1) with marginal standard deviation ``scale``."""
    eps = rng.normal(0.0, scale * np.sqrt(1 - phi * phi), n)
    out = np.empty(n)
    out[0] = rng.normal(0.0, scale)
    for t in range(1, n):
        out[t] = phi * out[t - 1] + eps[t]
    return out


def _latent_state(cfg: SyntheticFleetConfig, rng, center, amplitude) -> np.ndarray:
    t = np.arange(cfg.rows)
    day = cfg.rows / cfg.days_per_period
    s = np.tile(center, (cfg.rows, 1)).astype(float)
    s[:, 0] += cfg.daily_amplitude * np.sin(2 * np.pi * t / day + rng.uniform(0, 2 * np.pi))
    s[:, 0] += _ar1(rng, cfg.rows, 0.9, cfg.state_noise)
    s[:, 1] += amplitude * np.sin(2 * np.pi * t / cfg.rows + cfg.seasonal_phase)
    s[:, 1] += _ar1(rng, cfg.rows, 0.9, 0.3 * cfg.state_noise)
    for k in range(2, cfg.latent_dim):
        s[:, k] += _ar1(rng, cfg.rows, 0.995, cfg.state_noise)
    return s


def generate_fleet(cfg: SyntheticFleetConfig) -> FleetSpec:
    """Draw a fleet: unit descriptors (regime = latent center) and raw datasets."""
    mix_ss, unit_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    mix = np.random.default_rng(mix_ss)
    d, c = cfg.latent_dim, cfg.n_channels
    lin = mix.normal(0.0, 1.0, (d, c)) / np.sqrt(d)
    nonlin = mix.normal(0.0, 1.0, (d, c)) / np.sqrt(d)
    nonlin_gain = mix.uniform(0.5, 1.5, c)
    baseline = mix.uniform(5.0, 15.0, c)
    # power follows load and ambient; vane angle follows load and the slow mode
    lin[:, :2] = 0.0
    nonlin[:, :2] = 0.0
    lin[0, 0], lin[1, 0] = 1.0, -0.4
    lin[0, 1], lin[d - 1, 1] = 0.6, 0.8
    names = channel_names(c)

    target_ids = set(mix.choice(cfg.n_units, cfg.n_targets, replace=False).tolist())
    units, datasets = [], {}
    for k, ss in enumerate(unit_ss.spawn(cfg.n_units)):
        rng = np.random.default_rng(ss)
        uid = f"U{k:02d}"
        center = rng.normal(0.0, cfg.regime_spread, d)
        amplitude = cfg.seasonal_amplitude * float(np.exp(rng.normal(0.0, cfg.seasonal_amplitude_spread)))
        s = _latent_state(cfg, rng, center, amplitude)
        offset = rng.normal(0.0, cfg.unit_offset_scale, c)
        gain = np.exp(rng.normal(0.0, cfg.unit_gain_spread, c))
        offset[:2], gain[:2] = 0.0, 1.0
        x = baseline + offset + gain * (s @ lin + nonlin_gain * np.tanh(s @ nonlin))
        x += rng.normal(0.0, cfg.noise_scale, x.shape)
        detection = None
        if k in target_ids:
            detection = cfg.detection_time
            onset = detection - cfg.fault_lead
            chans = rng.choice(np.arange(2, c), size=min(cfg.fault_channels, c - 2), replace=False)
            std = x[:cfg.train_window].std(axis=0)
            ramp = np.clip((np.arange(cfg.rows) - onset) / cfg.fault_lead, 0.0, 1.0)
            sign = rng.choice([-1.0, 1.0], size=len(chans))
            x[:, chans] += np.outer(ramp, sign * cfg.fault_magnitude * std[chans])
        if cfg.missing_rate > 0:
            bad = rng.random(cfg.rows) < cfg.missing_rate
            cols = rng.integers(0, c, cfg.rows)
            x[bad, cols[bad]] = np.where(rng.random(bad.sum()) < 0.5, np.nan, 0.0)
        units.append(UnitInfo(uid, "target" if detection is not None else "source", detection,
                              tuple(float(v) for v in center)))
        datasets[uid] = UnitDataset(uid, np.arange(cfg.rows), x, names)
    return FleetSpec(units, datasets, cfg.train_window, cfg.blackout_window)


# ---------------------------------------------------------------- pair prep
@dataclass
class PairData:
    source_id: str
    target_id: str
    source_train: np.ndarray
    source_val: np.ndarray
    target_train: np.ndarray
    target_val: np.ndarray
    healthy_test: np.ndarray
    faulty_test: np.ndarray


def prepare_pair(fleet: FleetSpec, source_id: str, target_id: str, normalization: str = "unit",
                 validation_fraction: float = 0.06) -> PairData:
    """Clean, split and normalize one (source, target) pair.

    ``normalization="unit"`` fits each unit on its own training rows;
    ``"pooled"`` fits once on the union of both training sets.
    """
    if normalization not in ("unit", "pooled"):
        raise ConfigError(f"normalization must be 'unit' or 'pooled', got {normalization!r}")
    src_info, tgt_info = fleet.unit(source_id), fleet.unit(target_id)
    src = clean(fleet.datasets[source_id])
    tgt = clean(fleet.datasets[target_id])
    s_split = split(src, SplitSpec(None, validation_fraction))
    t_split = split(tgt, SplitSpec(fleet.train_window, validation_fraction, fleet.blackout_window,
                                   tgt_info.detection_time))
    if normalization == "pooled":
        p_src = p_tgt = fit_normalization(s_split.train, t_split.train)
    else:
        p_src, p_tgt = fit_normalization(s_split.train), fit_normalization(t_split.train)

    def norm(d, p):
        return apply_normalization(d, p).channels

    del src_info
    return PairData(source_id, target_id,
                    norm(s_split.train, p_src), norm(s_split.validation, p_src),
                    norm(t_split.train, p_tgt), norm(t_split.validation, p_tgt),
                    norm(t_split.healthy_test, p_tgt), norm(t_split.faulty_test, p_tgt))


# ----------------------------------------------------------------------- sweep
@dataclass(frozen=True)
class SweepConfig:
    """``architecture`` holds ``ArchitectureSpec`` fields shared by every kind.

    ``delta_w`` in its loss weights applies to the Wasserstein kinds only.
    """

    kinds: tuple = ("HELM",)
    master_seed: int = 0
    epochs: int = 200
    batch_size: int = 1000
    lr: float = 1e-4
    normalization: str = "unit"
    workers: int = 1
    architecture: dict = field(default_factory=dict)
    skip_stable_targets: bool = False

    def __post_init__(self):
        bad = [k for k in self.kinds if k not in KINDS]
        if bad:
            raise ConfigError(f"unknown architecture kinds {bad}; valid kinds: {', '.join(KINDS)}")


def triple_seed(master_seed: int, target_index: int, source_index: int, kind: str) -> int:
    kind_index = list(KINDS).index(kind)
    ss = np.random.SeedSequence([master_seed, target_index, source_index, kind_index])
    return int(ss.generate_state(1)[0] & 0x7FFFFFFF)


def _run_triple(args) -> PairResult:
    pair, spec = args
    try:
        _, result = train_pair(spec, pair.source_train, pair.target_train, pair.source_val,
                               pair.target_val, pair.healthy_test, pair.faulty_test,
                               pair.source_id, pair.target_id)
    except (DivergenceError, DataError) as exc:
        log.warning("%s %s/%s failed: %s", spec.kind, pair.source_id, pair.target_id, exc)
        result = PairResult(pair.source_id, pair.target_id, spec.kind, 100.0, False, False, False,
                            seed=spec.seed, error=str(exc))
    return result


def _tasks(fleet: FleetSpec, cfg: SweepConfig):
    sources = sorted(fleet.sources, key=lambda u: u.unit_id)
    for ti, tgt in enumerate(sorted(fleet.targets, key=lambda u: u.unit_id)):
        kinds = list(cfg.kinds)
        if cfg.skip_stable_targets and _is_stable(fleet, tgt.unit_id, cfg):
            kinds = [k for k in kinds if KINDS[k] is None]
        for si, src in enumerate(sources):
            pair = prepare_pair(fleet, src.unit_id, tgt.unit_id, cfg.normalization)
            for kind in kinds:
                yield pair, _triple_spec(cfg, kind, triple_seed(cfg.master_seed, ti, si, kind))


def _triple_spec(cfg: SweepConfig, kind: str, seed: int) -> ArchitectureSpec:
    d = dict(cfg.architecture, kind=kind, seed=seed, epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr)
    weights = dict(d.get("weights", {}))
    if KINDS[kind] is None or KINDS[kind][2] != "wasserstein":
        weights["delta_w"] = 1.0
    d["weights"] = weights
    return ArchitectureSpec.from_dict(d)


def _is_stable(fleet: FleetSpec, target_id: str, cfg: SweepConfig) -> bool:
    """A target whose own two months already give an aligned 2mHELM model."""
    src = sorted(fleet.sources, key=lambda u: u.unit_id)[0]
    pair = prepare_pair(fleet, src.unit_id, target_id, cfg.normalization)
    spec = _triple_spec(cfg, "TwoMonthHELM", cfg.master_seed)
    return _run_triple((pair, spec)).aligned_at_5


def sweep(fleet: FleetSpec, cfg: SweepConfig) -> list:
    """Train and evaluate every (target, source, kind) triple.

    Output order is fixed by sorted unit ids and the order of ``cfg.kinds``,
    whatever the worker count.
    """
    tasks = _tasks(fleet, cfg)
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            return list(pool.map(_run_triple, tasks, chunksize=1))
    return [_run_triple(t) for t in tasks]


def results_jsonl(results, include_runtime: bool = False) -> str:
    lines = []
    for r in results:
        d = r.to_dict()
        if not include_runtime:
            d.pop("runtime")
        lines.append(json.dumps(d, sort_keys=True))
    return "\n".join(lines) + ("\n" if lines else "")


def load_results(path) -> list:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(PairResult(**json.loads(line)))
    return out


# ------------------------------------------------------------------------- MMD
def median_bandwidth(x: np.ndarray, max_rows: int = 1000, seed: int = 0) -> float:
    x = np.asarray(x, dtype=np.float64)
    if len(x) > max_rows:
        x = x[np.random.default_rng(seed).choice(len(x), max_rows, replace=False)]
    d = pdist(x)
    d = d[d > 0]
    if len(d) == 0:
        raise DataError("all samples identical; no bandwidth")
    return float(np.median(d))


def mmd(a, b, bandwidth: float, biased: bool = False) -> float:
    """Squared MMD with a Gaussian kernel ``exp(-||x - y||^2 / (2 bandwidth^2))``, clamped at 0.

    The default is the unbiased estimator (diagonal terms excluded).
    """
    if not bandwidth > 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if len(a) == 0 or len(b) == 0:
        raise DataError("MMD needs nonempty samples")
    g = -0.5 / bandwidth ** 2
    kaa = np.exp(g * cdist(a, a, "sqeuclidean"))
    kbb = np.exp(g * cdist(b, b, "sqeuclidean"))
    kab = np.exp(g * cdist(a, b, "sqeuclidean"))
    m, n = len(a), len(b)
    if biased or m < 2 or n < 2:
        est = kaa.mean() + kbb.mean() - 2 * kab.mean()
    else:
        est = ((kaa.sum() - np.trace(kaa)) / (m * (m - 1))
               + (kbb.sum() - np.trace(kbb)) / (n * (n - 1)) - 2 * kab.mean())
    return max(0.0, float(est))


def mmd_permutation_test(a, b, bandwidth: float, n_permutations: int = 200, seed: int = 0) -> float:
    """p-value of the observed unbiased MMD under label permutations."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    rng = np.random.default_rng(seed)
    pooled = np.concatenate([a, b])
    observed = mmd(a, b, bandwidth)
    hits = 0
    for _ in range(n_permutations):
        p = rng.permutation(len(pooled))
        if mmd(pooled[p[:len(a)]], pooled[p[len(a):]], bandwidth) >= observed:
            hits += 1
    return (hits + 1) / (n_permutations + 1)


def _training_window(fleet: FleetSpec, unit_id: str) -> UnitDataset:
    info = fleet.unit(unit_id)
    d = clean(fleet.datasets[unit_id])
    if info.role == "target":
        return d.take(np.arange(np.searchsorted(d.timestamps, d.timestamps[0] + fleet.train_window)))
    return d


def select_source_by_mmd(fleet: FleetSpec, target_id: str, source_ids=None,
                         channels=REPRESENTATIVE_CHANNELS, max_rows: int = 2000, seed: int = 0) -> tuple:
    """Source whose training window is closest in MMD to the target's on two channels.

    Channels are standardized with pooled statistics and one median-heuristic
    bandwidth serves every candidate. Returns ``(source_id, {source_id: mmd})``;
    ties go to the lower unit id.
    """
    if source_ids is None:
        source_ids = [u.unit_id for u in fleet.sources]
    source_ids = sorted(source_ids)
    if not source_ids:
        raise DataError("no candidate sources")
    rng = np.random.default_rng(seed)

    def sample(uid):
        x = _training_window(fleet, uid).select(list(channels)).channels
        if len(x) > max_rows:
            x = x[np.sort(rng.choice(len(x), max_rows, replace=False))]
        return x

    tgt = sample(target_id)
    srcs = {uid: sample(uid) for uid in source_ids}
    pooled = np.concatenate([tgt, *srcs.values()])
    mu, sd = pooled.mean(axis=0), pooled.std(axis=0)
    sd[sd == 0] = 1.0
    tgt = (tgt - mu) / sd
    srcs = {k: (v - mu) / sd for k, v in srcs.items()}
    bw = median_bandwidth(np.concatenate([tgt, *srcs.values()]), seed=seed)
    scores = {uid: mmd(tgt, x, bw) for uid, x in srcs.items()}
    best = min(source_ids, key=lambda uid: (scores[uid], uid))
    return best, scores


# ---------------------------------------------------------------------- report
@dataclass
class Report:
    kinds: list
    targets: list
    aligned_5: dict
    aligned_1: dict
    ratio_5: dict
    ratio_1: dict
    best_fpr: dict
    selected_fpr: dict = field(default_factory=dict)
    selected_count: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def report(results, selected: dict | None = None) -> Report:
    """Aligned-pair tallies, best FPR per unit, and FPR of MMD-selected pairs.

    ``selected`` maps target id to its chosen source id. Missed faults leave the
    FPR cells empty (None).
    """
    results = list(results)
    if not results:
        raise DataError("no results to report")
    kinds = list(dict.fromkeys(r.kind for r in results))
    targets = sorted({r.target_id for r in results})
    n_sources = {t: len({r.source_id for r in results if r.target_id == t}) for t in targets}
    a5 = {t: {k: 0 for k in kinds} for t in targets}
    a1 = {t: {k: 0 for k in kinds} for t in targets}
    best = {t: {k: None for k in kinds} for t in targets}
    for r in results:
        a5[r.target_id][r.kind] += r.aligned_at_5
        a1[r.target_id][r.kind] += r.aligned_at_1
        if r.fault_detected:
            cur = best[r.target_id][r.kind]
            best[r.target_id][r.kind] = r.fpr if cur is None else min(cur, r.fpr)

    def ratio(table):
        return {k: float(np.mean([100.0 * table[t][k] / n_sources[t] for t in targets])) for k in kinds}

    rep = Report(kinds, targets, a5, a1, ratio(a5), ratio(a1), best)
    if selected:
        sel = {t: {k: None for k in kinds} for t in targets}
        for r in results:
            if selected.get(r.target_id) == r.source_id and r.fault_detected:
                sel[r.target_id][r.kind] = r.fpr
        rep.selected_fpr = sel
        rep.selected_count = {k: sum(1 for t in targets if sel[t][k] is not None and sel[t][k] < 5.0)
                              for k in kinds}
    return rep


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.2f}"
    return str(v)


def write_tables(rep: Report, directory) -> list:
    """Render the tables as CSV files plus ``summary.json``; returns the written paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []

    def table(name, body, footer):
        path = directory / name
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["unit", *rep.kinds])
            for t in rep.targets:
                w.writerow([t, *(_fmt(body[t][k]) for k in rep.kinds)])
            for label, row in footer:
                w.writerow([label, *(_fmt(row[k]) for k in rep.kinds)])
        written.append(path)

    table("aligned_pairs.csv", rep.aligned_5, [("R% (5%)", rep.ratio_5), ("R% (1%)", rep.ratio_1)])
    means = {k: (float(np.mean(v)) if (v := [rep.best_fpr[t][k] for t in rep.targets
                                             if rep.best_fpr[t][k] is not None]) else None)
             for k in rep.kinds}
    table("best_fpr.csv", rep.best_fpr, [("Mean", means)])
    if rep.selected_fpr:
        table("mmd_selected_fpr.csv", rep.selected_fpr, [("#AP", rep.selected_count)])
    summary = directory / "summary.json"
    summary.write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")
    written.append(summary)
    return written


def with_overrides(cfg: SweepConfig, **kw) -> SweepConfig:
    return replace(cfg, **kw)
