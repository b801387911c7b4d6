"""Experiment configuration: a commented key = value document.

Unknown keys are rejected, every invalid field reports its name, the
given value, and the legal range, and a parsed config serializes back to
text that re-parses to an identical config. Grids are the cartesian
product of (strategy, kappa, alpha, seed); sparsity may be given instead
of kappa (kappa = 1 - sparsity).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, fields

from .errors import ConfigError
from .federation import STRATEGIES
from .model import ModelSpec, cnn_spec, mlp_spec


@dataclass(frozen=True)
class ExperimentConfig:
    strategies: tuple[str, ...]
    rounds: int
    num_clients: int
    clients_per_round: float
    local_epochs: int
    batch_size: int
    lr: float
    lr_decay_round: int
    lr_decay_factor: float
    kappas: tuple[float, ...]
    alphas: tuple[float | None, ...]  # None = IID
    seeds: tuple[int, ...]
    dataset_classes: int
    dataset_samples_per_class: int
    dataset_input_dim: int
    dataset_radius: float
    dataset_mean_dim: int | None  # informative subspace; None = all dims
    dataset_path: str | None
    model: str
    model_hidden: tuple[int, ...]
    model_channels: tuple[int, ...]
    model_kernel: int
    grasp_batch_size: int
    ebt_window: int
    ebt_epsilon: float
    iterative_prune_rounds: int
    aggregate_by_support: bool
    output_dir: str
    workers: int


@dataclass(frozen=True)
class Cell:
    strategy: str
    kappa: float
    alpha: float | None
    seed: int

    @property
    def name(self) -> str:
        alpha = "iid" if self.alpha is None else f"{self.alpha:g}"
        return f"{self.strategy}__k{self.kappa:g}__a{alpha}__s{self.seed}"


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(text)


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(tok.strip()) for tok in text.split(",") if tok.strip())


def _parse_float_list(text: str) -> tuple[float, ...]:
    return tuple(float(tok.strip()) for tok in text.split(",") if tok.strip())


def _parse_alpha_list(text: str) -> tuple[float | None, ...]:
    out: list[float | None] = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        out.append(None if tok.lower() == "iid" else float(tok))
    return tuple(out)


def _parse_str_list(text: str) -> tuple[str, ...]:
    return tuple(tok.strip() for tok in text.split(",") if tok.strip())


def _parse_optional_str(text: str) -> str | None:
    return text or None


def _parse_optional_int(text: str) -> int | None:
    return int(text) if text else None


# key -> (attribute, parser, default text or None if required, legal-range text, check)
_SCHEMA: dict[str, tuple] = {
    "strategy": ("strategies", _parse_str_list, None, f"a comma list from {STRATEGIES}",
                 lambda v: len(v) > 0 and all(s in STRATEGIES for s in v)),
    "rounds": ("rounds", int, None, ">= 1", lambda v: v >= 1),
    "num_clients": ("num_clients", int, "100", ">= 1", lambda v: v >= 1),
    "clients_per_round": ("clients_per_round", float, "0.1", "in (0,1]", lambda v: 0 < v <= 1),
    "local_epochs": ("local_epochs", int, "10", ">= 0", lambda v: v >= 0),
    "batch_size": ("batch_size", int, "32", ">= 1", lambda v: v >= 1),
    "lr": ("lr", float, "0.1", "> 0", lambda v: v > 0),
    "lr_decay_round": ("lr_decay_round", int, "100", ">= 0", lambda v: v >= 0),
    "lr_decay_factor": ("lr_decay_factor", float, "0.1", "in (0,1]", lambda v: 0 < v <= 1),
    "kappa": ("kappas", _parse_float_list, "0.3", "in (0,1]",
              lambda v: len(v) > 0 and all(0 < k <= 1 for k in v)),
    "alpha": ("alphas", _parse_alpha_list, "iid", "positive floats and/or 'iid'",
              lambda v: len(v) > 0 and all(a is None or a > 0 for a in v)),
    "seeds": ("seeds", _parse_int_list, "0", "a non-empty comma list of ints",
              lambda v: len(v) > 0),
    "dataset_classes": ("dataset_classes", int, "10", ">= 2", lambda v: v >= 2),
    "dataset_samples_per_class": ("dataset_samples_per_class", int, "500", ">= 10",
                                  lambda v: v >= 10),
    "dataset_input_dim": ("dataset_input_dim", int, "16", ">= 1", lambda v: v >= 1),
    "dataset_radius": ("dataset_radius", float, "4.0", "> 0", lambda v: v > 0),
    "dataset_mean_dim": ("dataset_mean_dim", _parse_optional_int, "", ">= 1 or empty",
                         lambda v: v is None or v >= 1),
    "dataset_path": ("dataset_path", _parse_optional_str, "", "a readable file path or empty",
                     lambda v: True),
    "model": ("model", str, "mlp", "mlp or cnn", lambda v: v in ("mlp", "cnn")),
    "model_hidden": ("model_hidden", _parse_int_list, "128,64", "positive ints",
                     lambda v: all(h >= 1 for h in v)),
    "model_channels": ("model_channels", _parse_int_list, "8,8", "positive ints",
                       lambda v: len(v) > 0 and all(c >= 1 for c in v)),
    "model_kernel": ("model_kernel", int, "3", "a positive odd int",
                     lambda v: v >= 1 and v % 2 == 1),
    "grasp_batch_size": ("grasp_batch_size", int, "128", ">= 1", lambda v: v >= 1),
    "ebt_window": ("ebt_window", int, "5", ">= 1", lambda v: v >= 1),
    "ebt_epsilon": ("ebt_epsilon", float, "0.1", "in (0,1]", lambda v: 0 < v <= 1),
    "iterative_prune_rounds": ("iterative_prune_rounds", int, "100", ">= 1", lambda v: v >= 1),
    "aggregate_by_support": ("aggregate_by_support", _parse_bool, "false", "true or false",
                             lambda v: True),
    "output_dir": ("output_dir", str, "results", "a directory path", lambda v: len(v) > 0),
    "workers": ("workers", int, "1", ">= 1", lambda v: v >= 1),
}


def parse_config(text: str) -> ExperimentConfig:
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key != "sparsity" and key not in _SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value

    if "sparsity" in pairs:
        if "kappa" in pairs:
            raise ConfigError("give either kappa or sparsity, not both")
        sparsities = _parse_float_list(pairs.pop("sparsity"))
        if not all(0 <= s < 1 for s in sparsities):
            raise ConfigError(field="sparsity", value=sparsities, allowed="in [0,1)")
        pairs["kappa"] = ",".join(repr(1.0 - s) for s in sparsities)

    values = {}
    for key, (attr, parse, default, allowed, check) in _SCHEMA.items():
        if key in pairs:
            raw = pairs[key]
        elif default is None:
            raise ConfigError(field=key, value=None, allowed=f"required ({allowed})")
        else:
            raw = default
        try:
            value = parse(raw)
        except (ValueError, ConfigError):
            raise ConfigError(field=key, value=raw, allowed=allowed) from None
        if not check(value):
            raise ConfigError(field=key, value=value, allowed=allowed)
        values[attr] = value
    return ExperimentConfig(**values)


def config_to_text(config: ExperimentConfig) -> str:
    """Serialize so that parse_config(config_to_text(c)) == c."""

    def fmt(value) -> str:
        if isinstance(value, tuple):
            return ", ".join("iid" if v is None else fmt(v) for v in value)
        if isinstance(value, bool):
            return "true" if value else "false"
        if isinstance(value, float):
            return repr(value)
        if value is None:
            return ""
        return str(value)

    by_attr = {attr: key for key, (attr, *_rest) in _SCHEMA.items()}
    lines = ["# experiment configuration"]
    for f in fields(config):
        lines.append(f"{by_attr[f.name]} = {fmt(getattr(config, f.name))}")
    return "\n".join(lines) + "\n"


def expand_cells(config: ExperimentConfig) -> list[Cell]:
    """Cartesian product in (strategy, kappa, alpha, seed) order."""
    return [
        Cell(s, k, a, seed)
        for s, k, a, seed in itertools.product(
            config.strategies, config.kappas, config.alphas, config.seeds
        )
    ]


def build_spec(config: ExperimentConfig) -> ModelSpec:
    if config.model == "mlp":
        return mlp_spec(config.dataset_input_dim, config.model_hidden, config.dataset_classes)
    side = round(config.dataset_input_dim**0.5)
    if side * side != config.dataset_input_dim:
        raise ConfigError(
            field="dataset_input_dim",
            value=config.dataset_input_dim,
            allowed="a perfect square when model = cnn",
        )
    return cnn_spec((1, side, side), config.model_channels, config.model_kernel,
                    config.dataset_classes)


def build_dataset(config: ExperimentConfig, seed: int):
    from .data import load_dataset, make_synthetic

    if config.dataset_path:
        return load_dataset(config.dataset_path)
    return make_synthetic(
        config.dataset_classes,
        config.dataset_samples_per_class,
        config.dataset_input_dim,
        seed,
        radius=config.dataset_radius,
        mean_dim=config.dataset_mean_dim,
    )
