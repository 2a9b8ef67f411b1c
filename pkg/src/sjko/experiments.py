"""Wiring between run configurations and the trainer, plus the benchmark grid.

This is where tasks become sampler pairs, training runs become CSV artifacts,
and the reference-process benchmark fans out over (method, seed) cells.  The
deterministic outputs of a run are ``trace.csv``, per-phase sample clouds,
``metrics.csv`` and the config echo; wall-clock numbers go to a separate
``timings.csv`` because they can never be byte-reproducible.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import metrics, wgf
from .checkpoint import load_checkpoint, restore_trainer_state, save_checkpoint
from .config import RunConfig, format_toml, run_config_to_sections
from .datasets import (ParticleCloud, format_float, gaussian, gmm25,
                       standard_gaussian, two_circles)
from .nets import MLPSpec
from .rng import StreamRng
from .trainer import Trainer, mix_seed

BENCH_METHODS = ("analytic", "em", "sjko")


def write_csv(path, header: list[str], rows: list[list]) -> None:
    """Deterministic CSV: fixed header, '\\n' newlines, 17-digit floats."""
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(
            format_float(v) if isinstance(v, float) else str(v) for v in row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def build_samplers(cfg: RunConfig):
    """(source_draw, target_draw, reference_process_or_None) for a task."""
    if cfg.task == "two-circles":
        return (lambda n, rng: standard_gaussian(2, n, rng),
                lambda n, rng: two_circles(n, rng), None)
    if cfg.task == "gmm25":
        return (lambda n, rng: standard_gaussian(2, n, rng),
                lambda n, rng: gmm25(n, rng), None)
    process = wgf.random_ou_process(cfg.ou_dim, cfg.ou_process_seed)
    stationary = process.stationary()
    chol_source = np.linalg.cholesky(process.initial.cov)
    chol_target = np.linalg.cholesky(stationary.cov)
    source = lambda n, rng: gaussian(process.initial.mean, chol_source, n, rng)
    target = lambda n, rng: gaussian(stationary.mean, chol_target, n, rng)
    return source, target, process


def build_trainer(cfg: RunConfig, sequential_reference: bool = False,
                  record_batches: bool = False):
    """Trainer plus the reference process (None for the synthetic tasks)."""
    source, target, process = build_samplers(cfg)
    d = cfg.data_dim
    transport_spec = MLPSpec(in_dim=d, hidden_dims=cfg.transport_hidden, out_dim=d,
                             activation=cfg.activation, aux_noise_dim=cfg.jko.aux_noise_dim)
    potential_spec = MLPSpec(in_dim=d, hidden_dims=cfg.potential_hidden, out_dim=1,
                             activation=cfg.activation)
    trainer = Trainer(cfg.jko, source, target, transport_spec, potential_spec,
                      method=cfg.method, sequential_reference=sequential_reference,
                      record_batches=record_batches)
    return trainer, process


def log10_floored(value: float) -> float:
    return math.log10(max(value, 1e-300))


def evaluate_cloud(cfg: RunConfig, cloud: ParticleCloud, phase: int,
                   process=None) -> list[tuple[str, float]]:
    """Task-appropriate (metric, value) rows for one sampled cloud."""
    if cfg.task == "gmm25":
        report = metrics.mode_coverage(cloud)
        return [("captured_modes", float(report.captured_modes)),
                ("high_quality_fraction", report.high_quality_fraction),
                ("capture_radius", report.capture_radius),
                ("capture_min", float(report.capture_min))]
    if cfg.task == "two-circles":
        frac, shares = metrics.ring_fraction(cloud)
        return [("ring_fraction", frac),
                ("inner_share", shares[0]),
                ("outer_share", shares[1])]
    t = phase * cfg.jko.step_size
    fitted = wgf.fit_gaussian(cloud)
    value = wgf.sym_kl(fitted, wgf.ou_analytic(process, t))
    return [(f"sym_kl@t={format_float(t)}", value),
            (f"log10_sym_kl@t={format_float(t)}", log10_floored(value))]


def run_training(cfg: RunConfig, out_dir) -> Path:
    """Train per config; write echo, trace, per-phase clouds, checkpoints, metrics."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config_echo.toml").write_text(
        format_toml(run_config_to_sections(cfg)), encoding="utf-8")

    trainer, process = build_trainer(cfg)
    sections = run_config_to_sections(cfg)
    metric_rows: list[tuple[str, float]] = []
    eval_phases = _eval_phases(cfg)

    def on_phase(t: Trainer, phase: int) -> None:
        cloud = t.sample(cfg.phase_sample_n, seed=phase)
        cloud.save_csv(out / f"samples_phase_{phase:03d}.csv")
        if cfg.checkpoint_every > 0 and phase % cfg.checkpoint_every == 0:
            save_checkpoint(out / f"checkpoint_phase_{phase:03d}.sjko", t, sections)
        if phase in eval_phases:
            metric_rows.extend(evaluate_cloud(cfg, cloud, phase, process))

    with threadpool_limits(1):
        trainer.train(callbacks=[on_phase])

    save_checkpoint(out / "checkpoint_final.sjko", trainer, sections)
    trace = trainer.trace
    write_csv(out / "trace.csv",
              ["phase", "iteration", "loss_potential", "loss_transport", "r1_penalty"],
              [[p, i, lv, lt, r1] for p, i, lv, lt, r1 in zip(
                  trace.phase, trace.iter_in_phase, trace.loss_potential,
                  trace.loss_transport, trace.r1_penalty)])
    write_csv(out / "timings.csv", ["iteration", "seconds"],
              [[i, w] for i, w in enumerate(trace.wall_time)])
    write_csv(out / "metrics.csv", ["metric", "value"],
              [[name, value] for name, value in metric_rows])
    return out


def _eval_phases(cfg: RunConfig) -> set[int]:
    """Phases at which metrics.csv rows are produced."""
    last = cfg.jko.phases if cfg.method == "sjko" else 1
    if cfg.task != "ou":
        return {last}
    phases = {round(t / cfg.jko.step_size) for t in cfg.ou_eval_times}
    return {p for p in phases if 1 <= p <= last} or {last}


def resume_training(checkpoint_path, out_dir, cfg: RunConfig | None = None) -> Path:
    """Continue a checkpointed run; remaining losses match an uninterrupted run."""
    from .config import run_config_from_sections

    data = load_checkpoint(checkpoint_path)
    if cfg is None:
        cfg = run_config_from_sections(data.config_sections)
    cfg = replace(cfg, out_dir=str(out_dir))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer, process = build_trainer(cfg)
    restore_trainer_state(trainer, data)
    sections = run_config_to_sections(cfg)

    with threadpool_limits(1):
        trainer.train()

    save_checkpoint(out / "checkpoint_final.sjko", trainer, sections)
    trace = trainer.trace
    write_csv(out / "trace.csv",
              ["phase", "iteration", "loss_potential", "loss_transport", "r1_penalty"],
              [[p, i, lv, lt, r1] for p, i, lv, lt, r1 in zip(
                  trace.phase, trace.iter_in_phase, trace.loss_potential,
                  trace.loss_transport, trace.r1_penalty)])
    return out


# ---------------------------------------------------------------------------
# reference-process benchmark
# ---------------------------------------------------------------------------

def _bench_cell(args) -> list[tuple]:
    """(method, d, sorted times, seed, process_seed, em_particles, em_dt) -> rows."""
    method, d, times, seed, process_seed, em_particles, em_dt = args
    with threadpool_limits(1):
        process = wgf.random_ou_process(d, process_seed)
        rows = []
        if method == "analytic":
            for t in times:
                dist = wgf.ou_analytic(process, t)
                value = wgf.sym_kl(dist, dist)
                rows.append((method, d, t, value, log10_floored(value), seed))
        elif method == "em":
            rng = StreamRng(mix_seed(seed, 0xE0), stream=17)
            for t in times:
                cloud = wgf.em_simulate(process, em_particles, dt=em_dt, t_end=t, rng=rng)
                value = wgf.sym_kl(wgf.fit_gaussian(cloud), wgf.ou_analytic(process, t))
                rows.append((method, d, t, value, log10_floored(value), seed))
        elif method == "sjko":
            from .config import default_run_config

            cfg = default_run_config("ou")
            phases = max(round(t / cfg.jko.step_size) for t in times)
            cfg = replace(cfg, ou_dim=d, ou_process_seed=process_seed,
                          ou_eval_times=tuple(times),
                          jko=replace(cfg.jko, seed=seed, phases=phases))
            trainer, _ = build_trainer(cfg)
            want = {round(t / cfg.jko.step_size): t for t in times}

            def on_phase(tr, phase):
                if phase in want:
                    cloud = tr.sample(10_000, seed=phase)
                    t = want[phase]
                    value = wgf.sym_kl(wgf.fit_gaussian(cloud), wgf.ou_analytic(process, t))
                    rows.append((method, d, t, value, log10_floored(value), seed))

            trainer.train(callbacks=[on_phase])
        else:
            raise ValueError(f"benchmark method must be one of {BENCH_METHODS}")
    return rows


def bench_workers() -> int:
    raw = os.environ.get("SJKO_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def ou_bench(d: int, times: list[float], methods: list[str], seeds: list[int],
             out_dir, process_seed: int = 0, em_particles: int = 50_000,
             em_dt: float = 1e-3) -> list[tuple]:
    """Run the (method, seed) grid; write results.csv in deterministic order."""
    for m in methods:
        if m not in BENCH_METHODS:
            raise ValueError(f"benchmark method must be one of {BENCH_METHODS}")
    times = sorted(float(t) for t in times)
    cells = [(m, d, tuple(times), s, process_seed, em_particles, em_dt)
             for m in methods for s in seeds]
    workers = min(bench_workers(), len(cells))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cell_rows = list(pool.map(_bench_cell, cells))
    else:
        cell_rows = [_bench_cell(c) for c in cells]
    rows = sorted(
        (row for group in cell_rows for row in group),
        key=lambda r: (r[0], r[1], r[2], r[5]),
    )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "results.csv",
              ["method", "d", "t", "sym_kl", "log10_sym_kl", "seed"],
              [list(r) for r in rows])
    return rows
