"""Run configuration: ``key = value`` files with ``#`` comments plus ``--key value`` overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

SYSTEM_PROMPT = (
    "You are a visual reasoning assistant. Before answering, think in latent "
    "visual tokens about where to look in the image, then give a short answer."
)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    # corpus
    n_train: int = 5000
    n_val: int = 500
    n_test: int = 500
    grid_rows: int = 5
    grid_cols: int = 5
    min_objects: int = 3
    max_objects: int = 6
    noise: float = 0.05
    # teacher
    teacher_d_model: int = 128
    teacher_layers: int = 4
    teacher_heads: int = 4
    teacher_lr: float = 2e-3
    teacher_batch_size: int = 16
    teacher_max_steps: int = 3000
    teacher_target: float = 0.95
    teacher_eval_every: int = 250
    # text-only baseline (stage 2 of the filter)
    text_only_steps: int = 600
    # student
    student_d_model: int = 64
    student_layers: int = 2
    student_heads: int = 2
    k_latent: int = 4
    total_steps: int = 1000
    warmup_steps: int = 400
    gate_epsilon: float = 1e-6
    lam: float = 0.3
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 16
    use_concept: bool = True
    use_traj: bool = True
    single_stage: bool = False
    mask_latents: bool = False
    gate_latent_path: bool = False
    # supervision / filtering / analysis
    topk: int = 8
    eps_norm: float = 1e-8
    focus_threshold: float = 0.20
    k_salient: int = 8
    system_prompt: str = SYSTEM_PROMPT

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.warmup_steps > self.total_steps:
            raise ConfigError(f"warmup_steps ({self.warmup_steps}) exceeds total_steps ({self.total_steps})")
        if self.lam < 0:
            raise ConfigError("lam must be non-negative")
        if self.k_latent < 0:
            raise ConfigError("k_latent must be non-negative")
        if not 0.0 <= self.focus_threshold <= 1.0:
            raise ConfigError("focus_threshold must lie in [0, 1]")
        if not 0.0 < self.gate_epsilon <= 1.0:
            raise ConfigError("gate_epsilon must lie in (0, 1]")
        return self

    @property
    def n_patches(self):
        return self.grid_rows * self.grid_cols

    @property
    def effective_topk(self):
        """Top-K clamped to half the patch count."""
        return max(1, min(self.topk, self.n_patches // 2))

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_text(self):
        lines = ["# run configuration snapshot"]
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _convert(key, raw):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key} ({kind}): {raw!r}") from None
    return raw


def parse_config_text(text):
    """``{key: value}`` from ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        if not line.startswith("system_prompt"):
            line = line.split("#", 1)[0]
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = _convert(key, value)
    return out


def parse_overrides(args):
    """``["--key", "value", ...]`` (or ``--key=value``) into a dict."""
    out = {}
    it = iter(args)
    for tok in it:
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        name = tok[2:]
        if "=" in name:
            name, value = name.split("=", 1)
        else:
            try:
                value = next(it)
            except StopIteration:
                raise ConfigError(f"--{name} needs a value") from None
        key = name.replace("-", "_")
        out[key] = _convert(key, value)
    return out


def load_config(path=None, overrides=()):
    values = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            values.update(parse_config_text(fh.read()))
    values.update(parse_overrides(list(overrides)))
    return RunConfig(**values)
