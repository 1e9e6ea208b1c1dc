"""Run configuration: one file (TOML or JSON) describes a whole experiment."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .bilevel import BilevelConfig
from .model import ALL_TARGETS, ToyTransformerConfig
from .seeding import derive_seed
from .tasks import TaskSpec

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

__all__ = ["ConfigError", "RunConfig", "FinetuneConfig", "AllocationSettings",
           "load_run_config", "run_config_from_dict"]


class ConfigError(ValueError):
    """A run configuration file is malformed or inconsistent."""


@dataclass
class FinetuneConfig:
    epochs: int = 15
    lr: float = 3e-4
    batch_size: int = 32
    schedule: str = "cosine"

    def __post_init__(self):
        if self.epochs < 0 or self.lr < 0 or self.batch_size < 1:
            raise ConfigError("finetune: epochs/lr must be >= 0 and batch_size >= 1")


@dataclass
class AllocationSettings:
    source: str = "guilomo"
    n_experts: int = 2
    rank: int = 4
    group_counts: tuple[int, int, int, int] = (2, 4, 6, 8)
    expert_budget: int | None = None
    rank_budget: int = 40

    def __post_init__(self):
        self.group_counts = tuple(self.group_counts)
        if self.source not in ("guilomo", "uniform", "mola_group", "normal_e_r"):
            raise ConfigError(f"allocation: unknown source {self.source!r}")


@dataclass
class BilevelSettings:
    """Bilevel section of the config file; T resolves against the dataset."""

    T: int | None = None
    xi_theta: float = 3e-4
    xi_g: float = 3e-3
    optimizer_mode: str = "adaptive"
    schedule: str = "cosine"
    batch_size: int = 32
    seed: int | None = None
    model_betas: tuple[float, float] = (0.9, 0.999)
    model_eps: float = 1e-8
    model_weight_decay: float = 0.0
    gsv_betas: tuple[float, float] = (0.5, 0.999)
    gsv_eps: float = 1e-8
    gsv_weight_decay: float = 1e-3

    def __post_init__(self):
        self.model_betas = tuple(self.model_betas)
        self.gsv_betas = tuple(self.gsv_betas)


@dataclass
class RunConfig:
    model: ToyTransformerConfig = field(default_factory=ToyTransformerConfig)
    task: TaskSpec = field(default_factory=lambda: TaskSpec(
        family="modular_sum", difficulty=3, train_size=256, eval_size=256, seed=0))
    bilevel: BilevelSettings = field(default_factory=BilevelSettings)
    allocation: AllocationSettings = field(default_factory=AllocationSettings)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    seed: int = 0
    out_dir: str = "runs"
    e_max: int = 8
    r_max: int = 8
    lora_alpha: float = 16.0
    scale_mode: str = "alpha_over_r"
    routing_k: int = 2
    c_balance: float = 1e-3
    search_epochs: int = 3

    def resolved_bilevel(self, dataset_size: int) -> BilevelConfig:
        """Concrete bilevel config; T defaults to one step per train batch
        per search epoch."""
        s = self.bilevel
        t = s.T
        if t is None:
            t = max(1, -(-dataset_size // s.batch_size) * self.search_epochs)
        seed = s.seed if s.seed is not None else derive_seed(self.seed, "search")
        return BilevelConfig(
            T=t, xi_theta=s.xi_theta, xi_g=s.xi_g,
            optimizer_mode=s.optimizer_mode, schedule=s.schedule,
            e_max=self.e_max, r_max=self.r_max, batch_size=s.batch_size,
            seed=seed, model_betas=s.model_betas, model_eps=s.model_eps,
            model_weight_decay=s.model_weight_decay, gsv_betas=s.gsv_betas,
            gsv_eps=s.gsv_eps, gsv_weight_decay=s.gsv_weight_decay,
        )

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["model"]["lora_targets"] = list(self.model.lora_targets)
        return doc

    def with_seed(self, seed: int) -> "RunConfig":
        """Re-seed the whole run: master, task, and search streams."""
        doc = self.to_dict()
        doc["seed"] = seed
        doc["task"]["seed"] = derive_seed(seed, "task")
        doc["bilevel"]["seed"] = derive_seed(seed, "search")
        return run_config_from_dict(doc)


def _build_section(cls, data: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in [{section}]")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}] section: {exc}") from exc


def run_config_from_dict(doc: dict) -> RunConfig:
    doc = dict(doc)
    master_seed = int(doc.get("seed", 0))
    sections = {
        "model": (ToyTransformerConfig, "model"),
        "task": (TaskSpec, "task"),
        "bilevel": (BilevelSettings, "bilevel"),
        "allocation": (AllocationSettings, "allocation"),
        "finetune": (FinetuneConfig, "finetune"),
    }
    kwargs = {}
    for key, (cls, section) in sections.items():
        if key in doc:
            data = doc.pop(key)
            if not isinstance(data, dict):
                raise ConfigError(f"[{section}] must be a table/object")
            if key == "model" and "lora_targets" in data:
                data = dict(data, lora_targets=tuple(data["lora_targets"]))
            if key == "task" and "seed" not in data:
                data = dict(data, seed=derive_seed(master_seed, "task"))
            kwargs[key] = _build_section(cls, data, section)
    top_known = {f.name for f in fields(RunConfig)}
    unknown = set(doc) - top_known
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {sorted(unknown)}")
    try:
        cfg = RunConfig(**kwargs, **doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    if "task" not in kwargs:
        cfg.task.seed = derive_seed(cfg.seed, "task")
    return cfg


def load_run_config(path) -> RunConfig:
    """Load a TOML or JSON run config; GUILOMO_OUT overrides the output dir."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    if path.suffix.lower() == ".json":
        doc = json.loads(text)
    elif path.suffix.lower() == ".toml":
        doc = tomllib.loads(text)
    else:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError:
            try:
                doc = tomllib.loads(text)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: neither valid JSON nor TOML: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config root must be a table/object")
    cfg = run_config_from_dict(doc)
    env_out = os.environ.get("GUILOMO_OUT")
    if env_out:
        cfg.out_dir = env_out
    return cfg
