"""Chronic ingestion and a seeded synthetic generator with Do-Nothing calibration."""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .env import Chronic, EnvError, EnvParams, InvalidChronicError, do_nothing_survival, reset
from .grid import Grid

STEPS_PER_DAY = 288


class ChronicFormatError(EnvError):
    pass


def _read_matrix(path: Path, n_cols: int) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ChronicFormatError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if len(header) != n_cols and n_cols >= 0:
        raise ChronicFormatError(f"{path}: expected {n_cols} columns, header has {len(header)}")
    try:
        data = np.array([[float(v) for v in r] for r in body], dtype=np.float64)
    except ValueError as exc:
        raise ChronicFormatError(f"{path}: {exc}") from exc
    if data.ndim != 2 or data.shape[1] != len(header):
        raise ChronicFormatError(f"{path}: ragged rows")
    if np.isnan(data).any():
        raise ChronicFormatError(f"{path}: NaN entries")
    return data


def load_chronic(folder, grid: Optional[Grid] = None) -> Chronic:
    folder = Path(folder)
    g = grid.n_gen if grid else -1
    d = grid.n_load if grid else -1
    return Chronic(folder.name, _read_matrix(folder / "gen_p.csv", g), _read_matrix(folder / "load_p.csv", d))


def load_chronics(directory, grid: Optional[Grid] = None) -> list[Chronic]:
    """One chronic per sub-folder holding ``gen_p.csv`` and ``load_p.csv``, sorted by name."""
    directory = Path(directory)
    folders = sorted(p for p in directory.iterdir() if p.is_dir() and (p / "gen_p.csv").exists())
    return [load_chronic(f, grid) for f in folders]


def save_chronic(chronic: Chronic, directory, grid: Optional[Grid] = None) -> Path:
    folder = Path(directory) / chronic.id
    folder.mkdir(parents=True, exist_ok=True)
    gen_ids = [g.id for g in grid.generators] if grid else range(chronic.gen_p.shape[1])
    load_ids = [d.id for d in grid.loads] if grid else range(chronic.load_p.shape[1])
    for name, ids, data in (("gen_p.csv", gen_ids, chronic.gen_p), ("load_p.csv", load_ids, chronic.load_p)):
        with open(folder / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"{name[:-6]}_{i}" for i in ids])
            w.writerows([[repr(float(v)) for v in row] for row in data])
    return folder


@dataclass(frozen=True)
class Profile:
    """Shape parameters of a synthetic chronic.

    ``peak_scale`` multiplies the evening bump of the daily load curve and is
    the knob the calibration routine turns.  ``hotspot_gain`` concentrates
    extra evening demand on the loads listed in ``hotspots`` (or, when that is
    empty, on ``hotspot_loads`` loads drawn per chronic) so congestion is local.
    """

    name: str = "easy"
    base_level: float = 0.75
    peak_scale: float = 0.25
    daily_growth: float = 0.0
    noise_std: float = 0.015
    hotspot_loads: int = 3
    hotspot_gain: float = 0.0
    renewable_level: float = 0.5
    hotspots: tuple = ()


PROFILES = {
    "easy": Profile("easy", base_level=0.6, peak_scale=0.15, daily_growth=0.0, hotspot_gain=0.0, renewable_level=0.35),
    "hard": Profile("hard", base_level=0.7, peak_scale=0.3, daily_growth=0.0, hotspot_gain=1.5, hotspots=(0, 2, 6)),
}


def get_profile(profile) -> Profile:
    if isinstance(profile, Profile):
        return profile
    try:
        return PROFILES[profile]
    except KeyError:
        raise ValueError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}") from None


def _ar1(rng, n, phi, std):
    e = rng.normal(0.0, std * np.sqrt(1 - phi * phi), size=n)
    out = np.empty(n)
    x = rng.normal(0.0, std)
    for i in range(n):
        x = phi * x + e[i]
        out[i] = x
    return out


def generate_synthetic(grid: Grid, seed: int, profile="easy", horizon: int = 2016,
                       chronic_id: Optional[str] = None) -> Chronic:
    """Daily-periodic loads with noise and renewable-like generator variability."""
    prof = get_profile(profile)
    rng = np.random.default_rng([seed, sum(map(ord, prof.name))])
    T, D, G = horizon, grid.n_load, grid.n_gen
    t = np.arange(T)
    phase = (t % STEPS_PER_DAY) / STEPS_PER_DAY
    day = t / STEPS_PER_DAY

    nominal = grid.load_nominal.copy()
    if not nominal.any():
        nominal = np.full(D, 1.0 / D)
    load = np.empty((T, D))
    hot = np.zeros(D)
    if prof.hotspot_gain > 0 and prof.hotspots:
        hot[list(prof.hotspots)] = prof.hotspot_gain
    elif prof.hotspot_gain > 0 and prof.hotspot_loads > 0:
        hot[rng.choice(D, size=min(prof.hotspot_loads, D), replace=False)] = prof.hotspot_gain
    for d in range(D):
        shift = rng.normal(0.0, 0.02)
        bump = np.clip(np.sin(2 * np.pi * (phase - 0.45 + shift)), 0.0, None) ** 2
        dip = 0.08 * np.cos(2 * np.pi * (phase - 0.15 + shift))
        level = prof.base_level * (1 + prof.daily_growth * day) + dip
        shape = level + prof.peak_scale * (1 + hot[d]) * bump
        load[:, d] = nominal[d] * shape * (1 + _ar1(rng, T, 0.98, prof.noise_std))
    load = np.clip(load, 0.0, None)
    total = load.sum(axis=1)

    gen = np.zeros((T, G))
    pmax = grid.gen_pmax
    thermal = []
    for k, g in enumerate(grid.generators):
        if k == grid.slack_gen:
            continue
        if g.kind == "solar":
            daylight = np.clip(np.sin(2 * np.pi * (phase - 0.25)), 0.0, None)
            cloud = np.clip(1 + _ar1(rng, T, 0.99, 0.15), 0.2, 1.0)
            gen[:, k] = pmax[k] * prof.renewable_level * daylight * cloud
        elif g.kind == "wind":
            gen[:, k] = pmax[k] * np.clip(prof.renewable_level + _ar1(rng, T, 0.995, 0.2), 0.05, 0.95)
        else:
            thermal.append(k)
    residual = np.clip(total - gen.sum(axis=1), 0.0, None)
    if thermal:
        w = rng.uniform(0.6, 1.0, size=len(thermal))
        share = 0.65 * w / w.sum()
        for s, k in zip(share, thermal):
            drift = 1 + _ar1(rng, T, 0.995, 0.05)
            gen[:, k] = np.clip(s * residual * drift, 0.0, pmax[k])
    # slack column carries the nominal remainder; the solver rebalances it anyway
    gen[:, grid.slack_gen] = np.clip(total - gen.sum(axis=1), 0.0, None)
    return Chronic(chronic_id or f"{prof.name}_{seed:04d}", gen, load)


def calibrate_profile(grid: Grid, profile="hard", seeds=(0, 1, 2), horizon: int = 2016,
                      params: Optional[EnvParams] = None, max_fraction: float = 0.5,
                      survive_all: bool = False, scales=None) -> Profile:
    """Pick the peak scale for a profile from Do-Nothing rollouts.

    With ``survive_all`` the largest candidate scale on which Do-Nothing
    completes every seed is returned (easy profiles); otherwise the smallest
    scale on which Do-Nothing blacks out before ``max_fraction * horizon`` on
    every seed (hard profiles).
    """
    prof = get_profile(profile)
    if scales is None:
        scales = np.round(np.linspace(0.1, 1.5, 29), 3)
    ordered = sorted(scales, reverse=survive_all)
    for s in ordered:
        cand = replace(prof, peak_scale=float(s))
        ok = True
        for seed in seeds:
            ch = generate_synthetic(grid, seed, cand, horizon)
            try:
                st = do_nothing_survival(grid, ch, params)
            except InvalidChronicError:
                ok = False
                break
            if survive_all and st < horizon:
                ok = False
            if not survive_all and st >= max_fraction * horizon:
                ok = False
            if not ok:
                break
        if ok:
            return cand
    raise ValueError(f"no peak scale in {list(ordered)} satisfies the calibration target")
