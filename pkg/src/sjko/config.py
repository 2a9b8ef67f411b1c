"""Run configuration: task defaults, TOML-style files, CLI overrides.

Config files use a small TOML subset: ``[section]`` headers and
``key = value`` lines where a value is a quoted string, integer, float,
boolean, or a flat array of those.  Unknown sections or keys fail fast.  The
full effective configuration is echoed into the output directory so a run is
reproducible from its artifacts alone.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

from .nets import ACTIVATIONS
from .trainer import METHODS, SJKOConfig

TASKS = ("two-circles", "gmm25", "ou")


class ConfigError(ValueError):
    """Malformed or unknown configuration input."""


# ---------------------------------------------------------------------------
# TOML-subset reader / writer
# ---------------------------------------------------------------------------

_SECTION_RE = re.compile(r"^\[([A-Za-z0-9_-]+)\]$")
_KEY_RE = re.compile(r"^([A-Za-z0-9_-]+)\s*=\s*(.+)$")


def _parse_scalar(raw: str, where: str):
    raw = raw.strip()
    if raw.startswith('"') and raw.endswith('"') and len(raw) >= 2:
        return raw[1:-1]
    if raw == "true":
        return True
    if raw == "false":
        return False
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse value {raw!r}") from None


def _strip_comment(line: str) -> str:
    out = []
    in_string = False
    for ch in line:
        if ch == '"':
            in_string = not in_string
        if ch == "#" and not in_string:
            break
        out.append(ch)
    return "".join(out).strip()


def parse_toml(text: str) -> dict[str, dict]:
    """Parse the supported TOML subset into {section: {key: value}}."""
    sections: dict[str, dict] = {}
    current: dict | None = None
    current_name = ""
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw_line)
        if not line:
            continue
        m = _SECTION_RE.match(line)
        if m:
            current_name = m.group(1)
            if current_name in sections:
                raise ConfigError(f"line {lineno}: duplicate section [{current_name}]")
            current = sections.setdefault(current_name, {})
            continue
        m = _KEY_RE.match(line)
        if not m:
            raise ConfigError(f"line {lineno}: expected [section] or key = value, got {raw_line!r}")
        if current is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        key, raw_value = m.group(1), m.group(2).strip()
        where = f"line {lineno} ({current_name}.{key})"
        if key in current:
            raise ConfigError(f"{where}: duplicate key")
        if raw_value.startswith("["):
            if not raw_value.endswith("]"):
                raise ConfigError(f"{where}: unterminated array")
            inner = raw_value[1:-1].strip()
            current[key] = [] if not inner else [
                _parse_scalar(part, where) for part in inner.split(",")
            ]
        else:
            current[key] = _parse_scalar(raw_value, where)
    return sections


def _format_scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return f'"{value}"'
    if isinstance(value, float):
        out = format(value, ".17g")
        # keep the float-ness visible so a re-parse reads it back as a float
        if not any(ch in out for ch in ".eE"):
            out += ".0"
        return out
    return str(value)


def format_toml(sections: dict[str, dict]) -> str:
    lines: list[str] = []
    for name, body in sections.items():
        lines.append(f"[{name}]")
        for key, value in body.items():
            if isinstance(value, (list, tuple)):
                inner = ", ".join(_format_scalar(v) for v in value)
                lines.append(f"{key} = [{inner}]")
            else:
                lines.append(f"{key} = {_format_scalar(value)}")
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    """Everything one command needs: task, method, phase-loop and net settings,
    the reference-process parameters, and output behavior."""

    task: str = "gmm25"
    method: str = "sjko"
    jko: SJKOConfig = field(default_factory=SJKOConfig)
    transport_hidden: tuple[int, ...] = (256, 256, 256)
    potential_hidden: tuple[int, ...] = (256, 256, 256)
    activation: str = "silu"
    ou_dim: int = 2
    ou_process_seed: int = 0
    ou_eval_times: tuple[float, ...] = (0.5, 0.9)
    ou_em_particles: int = 50_000
    ou_em_dt: float = 1e-3
    out_dir: str = "runs/latest"
    checkpoint_every: int = 0          # phases between checkpoints; 0 = final only
    phase_sample_n: int = 10_000

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        if self.ou_dim < 1 or self.ou_em_particles < 2 or self.ou_em_dt <= 0:
            raise ConfigError("bad reference-process settings")
        if any(t <= 0 for t in self.ou_eval_times):
            raise ConfigError("eval times must be positive")
        if self.checkpoint_every < 0 or self.phase_sample_n < 1:
            raise ConfigError("bad output settings")
        object.__setattr__(self, "transport_hidden", tuple(int(h) for h in self.transport_hidden))
        object.__setattr__(self, "potential_hidden", tuple(int(h) for h in self.potential_hidden))
        object.__setattr__(self, "ou_eval_times", tuple(float(t) for t in self.ou_eval_times))

    @property
    def data_dim(self) -> int:
        return self.ou_dim if self.task == "ou" else 2


# Per-task defaults.  The toy tasks follow the reference recipe (batch 400,
# transport/potential learning rates 1e-4/1e-5, 20 phases of 5000 iterations,
# step size 5 for the grid mixture and 2 for the circles, no regularization).
# The reference-process task uses a short, hotter schedule tuned in-repo.
_TASK_JKO_DEFAULTS = {
    "two-circles": dict(phases=20, iters_per_phase=5000, step_size=2.0, batch_size=400,
                        lr_transport=1e-4, lr_potential=1e-5),
    "gmm25": dict(phases=20, iters_per_phase=5000, step_size=5.0, batch_size=400,
                  lr_transport=1e-4, lr_potential=1e-5),
    "ou": dict(phases=9, iters_per_phase=400, first_phase_iters=1200, step_size=0.1,
               batch_size=400, lr_transport=2e-4, lr_potential=1e-4),
}

_TASK_NET_DEFAULTS = {
    "two-circles": dict(transport_hidden=(256, 256, 256), potential_hidden=(256, 256, 256)),
    "gmm25": dict(transport_hidden=(256, 256, 256), potential_hidden=(256, 256, 256)),
    "ou": dict(transport_hidden=(64, 64), potential_hidden=(64, 64)),
}

_JKO_KEYS = ("phases", "iters_per_phase", "first_phase_iters", "step_size", "batch_size",
             "lr_transport", "lr_potential", "r1_weight", "divergence", "aux_noise_dim",
             "dim_normalized_cost", "seed")
_RUN_KEYS = ("task", "method", "seed")
_NET_KEYS = ("transport_hidden", "potential_hidden", "activation")
_OU_KEYS = ("dim", "process_seed", "eval_times", "em_particles", "em_dt")
_OUTPUT_KEYS = ("out_dir", "checkpoint_every", "phase_sample_n")
_SCHEMA = {"run": _RUN_KEYS, "jko": _JKO_KEYS, "nets": _NET_KEYS, "ou": _OU_KEYS,
           "output": _OUTPUT_KEYS}


def default_run_config(task: str) -> RunConfig:
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}")
    return RunConfig(task=task, jko=SJKOConfig(**_TASK_JKO_DEFAULTS[task]),
                     **_TASK_NET_DEFAULTS[task])


def _validate_sections(sections: dict[str, dict]) -> None:
    for name, body in sections.items():
        if name not in _SCHEMA:
            raise ConfigError(f"unknown section [{name}]")
        for key in body:
            if key not in _SCHEMA[name]:
                raise ConfigError(f"unknown key {name}.{key}")


def run_config_from_sections(sections: dict[str, dict]) -> RunConfig:
    """Build a RunConfig from parsed sections; absent keys keep task defaults."""
    _validate_sections(sections)
    run = dict(sections.get("run", {}))
    task = run.get("task", "gmm25")
    cfg = default_run_config(task)

    jko_kwargs = dict(sections.get("jko", {}))
    if "seed" in run:
        jko_kwargs.setdefault("seed", run["seed"])
    jko = replace(cfg.jko, **jko_kwargs) if jko_kwargs else cfg.jko

    nets = sections.get("nets", {})
    ou = sections.get("ou", {})
    output = sections.get("output", {})
    return replace(
        cfg,
        method=run.get("method", cfg.method),
        jko=jko,
        transport_hidden=tuple(nets.get("transport_hidden", cfg.transport_hidden)),
        potential_hidden=tuple(nets.get("potential_hidden", cfg.potential_hidden)),
        activation=nets.get("activation", cfg.activation),
        ou_dim=ou.get("dim", cfg.ou_dim),
        ou_process_seed=ou.get("process_seed", cfg.ou_process_seed),
        ou_eval_times=tuple(ou.get("eval_times", cfg.ou_eval_times)),
        ou_em_particles=ou.get("em_particles", cfg.ou_em_particles),
        ou_em_dt=ou.get("em_dt", cfg.ou_em_dt),
        out_dir=output.get("out_dir", cfg.out_dir),
        checkpoint_every=output.get("checkpoint_every", cfg.checkpoint_every),
        phase_sample_n=output.get("phase_sample_n", cfg.phase_sample_n),
    )


def run_config_to_sections(cfg: RunConfig) -> dict[str, dict]:
    """Full effective configuration, suitable for the echo file or a checkpoint."""
    jko = cfg.jko
    return {
        "run": {"task": cfg.task, "method": cfg.method, "seed": jko.seed},
        "jko": {
            "phases": jko.phases,
            "iters_per_phase": jko.iters_per_phase,
            "first_phase_iters": jko.first_phase_iters if jko.first_phase_iters is not None
                                 else jko.iters_per_phase,
            "step_size": jko.step_size,
            "batch_size": jko.batch_size,
            "lr_transport": jko.lr_transport,
            "lr_potential": jko.lr_potential,
            "r1_weight": jko.r1_weight,
            "divergence": jko.divergence,
            "aux_noise_dim": jko.aux_noise_dim,
            "dim_normalized_cost": jko.dim_normalized_cost,
            "seed": jko.seed,
        },
        "nets": {
            "transport_hidden": list(cfg.transport_hidden),
            "potential_hidden": list(cfg.potential_hidden),
            "activation": cfg.activation,
        },
        "ou": {
            "dim": cfg.ou_dim,
            "process_seed": cfg.ou_process_seed,
            "eval_times": list(cfg.ou_eval_times),
            "em_particles": cfg.ou_em_particles,
            "em_dt": cfg.ou_em_dt,
        },
        "output": {
            "out_dir": cfg.out_dir,
            "checkpoint_every": cfg.checkpoint_every,
            "phase_sample_n": cfg.phase_sample_n,
        },
    }


def load_run_config(path=None, *, task: str | None = None, seed: int | None = None,
                    method: str | None = None, out_dir: str | None = None) -> RunConfig:
    """Config file plus CLI overrides (flags win over file values)."""
    sections: dict[str, dict] = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            sections = parse_toml(fh.read())
        _validate_sections(sections)
    if task is not None:
        sections.setdefault("run", {})["task"] = task
    if method is not None:
        sections.setdefault("run", {})["method"] = method
    if seed is not None:
        sections.setdefault("run", {})["seed"] = seed
        sections.setdefault("jko", {})["seed"] = seed
    cfg = run_config_from_sections(sections)
    if out_dir is not None:
        cfg = replace(cfg, out_dir=out_dir)
    return cfg
