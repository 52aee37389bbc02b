"""Run configuration: a plain-text ``key = value`` file with dotted section keys.

Example::

    # toy run
    seed = 0
    model.d_e = 64
    train.stage1.tokens = 614400
    router.budgets = full:1.0, medium:0.75, small:0.5

Unknown keys are rejected, as are values that do not parse as the key's type.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .corpus import CorpusSpec, stage_specs
from .model import ModelConfig
from .router import MODE2, AnnealSchedule, BudgetSpec, default_config_sets
from .training import FROZEN, StageConfig, TrainConfig


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split(",") if x.strip())


def _pairs(s: str) -> tuple[tuple[int, int], ...]:
    out = []
    for item in s.split(","):
        h, c = item.strip().split("x")
        out.append((int(h), int(c)))
    return tuple(out)


def _budgets(s: str) -> tuple[tuple[str, float], ...]:
    out = []
    for item in s.split(","):
        label, frac = item.strip().split(":")
        out.append((label.strip(), float(frac)))
    return tuple(out)


def _bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _optional(parse: Callable[[str], Any]) -> Callable[[str], Any]:
    return lambda s: None if s.lower() in ("none", "") else parse(s)


# key -> (parser, default). ``None`` defaults for router sets mean "derive from the model".
SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "seed": (int, 0),
    "paths.run_dir": (str, "run"),
    "paths.base": (_optional(str), None),
    "model.d_e": (int, 64),
    "model.d_int": (int, 256),
    "model.n_h": (int, 4),
    "model.d_h": (int, 16),
    "model.m_h": (int, 8),
    "model.m_d": (int, 16),
    "model.g": (int, 2),
    "model.d_s": (int, 16),
    "model.pattern": (str, "MMAFMMAF"),
    "model.vocab": (int, 256),
    "pretrain.steps": (int, 0),
    "pretrain.lr": (float, 3e-3),
    "pretrain.long_seq_len": (int, 256),
    "calib.samples": (int, 1024),
    "calib.depth_samples": (int, 64),
    "calib.depth_mode": (str, "iterative"),
    "calib.keep_channels": (_optional(int), None),
    "corpus.seq_len1": (int, 64),
    "corpus.seq_len2": (int, 256),
    "train.stage1.seq_len": (int, 64),
    "train.stage1.tokens": (int, 1_500_000),
    "train.stage1.batch_size": (int, 8),
    "train.stage2.enabled": (_bool, True),
    "train.stage2.seq_len": (int, 256),
    "train.stage2.tokens": (int, 1_000_000),
    "train.stage2.batch_size": (int, 2),
    "train.alpha": (_floats, (0.5, 0.3, 0.2)),
    "train.lr_model": (float, 1e-3),
    "train.lr_router": (float, 1e-2),
    "train.warmup_steps": (int, 60),
    "train.lambda": (float, 1.0),
    "train.kd_temperature": (float, 1.0),
    "train.teacher_mode": (str, FROZEN),
    "train.alpha_ce": (float, 0.1),
    "train.integration": (str, MODE2),
    "train.momentum": (float, 0.9),
    "train.grad_clip": (_optional(float), 1.0),
    "train.anneal_steps": (_optional(int), None),
    "train.log_every": (int, 1),
    "router.d_router": (int, 32),
    "router.min_depth": (_optional(int), None),
    "router.budgets": (_budgets, (("full", 1.0), ("medium", 0.75), ("small", 0.5))),
    "router.sets.emb": (_optional(_ints), None),
    "router.sets.mamba": (_optional(_pairs), None),
    "router.sets.attn": (_optional(_ints), None),
    "router.sets.ffn": (_optional(_ints), None),
    "router.modes.mamba": (str, "homogeneous"),
    "router.modes.attn": (str, "homogeneous"),
    "router.modes.ffn": (str, "homogeneous"),
    "router.tau_start": (float, 1.0),
    "router.tau_end": (float, 0.05),
    "router.scale_start": (float, 1.0),
    "router.scale_end": (float, 10.0),
    "eval.samples": (int, 64),
    "verify.prompts": (int, 50),
}


def parse_text(text: str) -> dict[str, str]:
    raw: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}", f"expected 'key = value', got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if k in raw:
            raise ConfigError(k, f"duplicate key on line {n}")
        raw[k] = v
    return raw


@dataclass
class RunConfig:
    values: dict[str, Any]
    source: Path | None = None

    @classmethod
    def from_mapping(cls, raw: dict[str, str], source: Path | None = None) -> "RunConfig":
        values = {k: d for k, (_p, d) in SCHEMA.items()}
        for k, v in raw.items():
            if k not in SCHEMA:
                raise ConfigError(k, "unknown configuration key")
            try:
                values[k] = SCHEMA[k][0](v)
            except ValueError as e:
                raise ConfigError(k, f"cannot parse {v!r} ({e})") from None
        cfg = cls(values, source)
        cfg._resolve_paths()
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError("--config", f"file {path} does not exist")
        return cls.from_mapping(parse_text(path.read_text()), path)

    def __getitem__(self, key: str):
        return self.values[key]

    def with_overrides(self, **kv) -> "RunConfig":
        vals = dict(self.values)
        vals.update(kv)
        cfg = RunConfig(vals, self.source)
        cfg.validate()
        return cfg

    def _resolve_paths(self) -> None:
        base_dir = self.source.parent if self.source is not None else Path.cwd()
        run_dir = Path(self.values["paths.run_dir"])
        self.values["paths.run_dir"] = str(run_dir if run_dir.is_absolute() else base_dir / run_dir)
        base = self.values["paths.base"]
        if base is not None:
            p = Path(base) if Path(base).is_absolute() else base_dir / base
            if not p.is_file():
                raise ConfigError("paths.base", f"model checkpoint {p} does not exist")
            self.values["paths.base"] = str(p)

    def validate(self) -> None:
        try:
            self.model_config()
            self.train_config()
            self.corpus_specs()
            self.anneal_schedule()
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(_guess_key(str(e)), str(e)) from None
        if self["calib.depth_mode"] not in ("iterative", "single_pass"):
            raise ConfigError("calib.depth_mode", f"must be iterative or single_pass, got {self['calib.depth_mode']!r}")
        if self["calib.samples"] < 1:
            raise ConfigError("calib.samples", "must be positive")
        fracs = [f for _l, f in self["router.budgets"]]
        if not fracs or any(not 0 < f <= 1 for f in fracs):
            raise ConfigError("router.budgets", "fractions must lie in (0, 1]")
        if len(self["train.alpha"]) != len(fracs):
            raise ConfigError("train.alpha", f"needs one weight per budget ({len(fracs)})")

    # typed views

    @property
    def run_dir(self) -> Path:
        return Path(self["paths.run_dir"])

    @property
    def seed(self) -> int:
        return self["seed"]

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            d_e=self["model.d_e"], d_int=self["model.d_int"], n_h=self["model.n_h"], d_h=self["model.d_h"],
            m_h=self["model.m_h"], m_d=self["model.m_d"], g=self["model.g"], d_s=self["model.d_s"],
            pattern=tuple(self["model.pattern"]), vocab=self["model.vocab"],
        )

    def train_config(self) -> TrainConfig:
        s2 = None
        if self["train.stage2.enabled"]:
            s2 = StageConfig(self["train.stage2.seq_len"], self["train.stage2.tokens"], self["train.stage2.batch_size"])
        return TrainConfig(
            stage1=StageConfig(self["train.stage1.seq_len"], self["train.stage1.tokens"], self["train.stage1.batch_size"]),
            stage2=s2, alpha=self["train.alpha"], lr_model=self["train.lr_model"], lr_router=self["train.lr_router"],
            warmup_steps=self["train.warmup_steps"], lam=self["train.lambda"],
            kd_temperature=self["train.kd_temperature"], teacher_mode=self["train.teacher_mode"],
            alpha_ce=self["train.alpha_ce"], integration=self["train.integration"], momentum=self["train.momentum"],
            grad_clip=self["train.grad_clip"], anneal_steps=self["train.anneal_steps"],
            log_every=self["train.log_every"], seed=self.seed,
        )

    def corpus_specs(self) -> tuple[CorpusSpec, CorpusSpec]:
        return stage_specs(self["corpus.seq_len1"], self["corpus.seq_len2"], self.seed)

    def anneal_schedule(self) -> AnnealSchedule:
        return AnnealSchedule(0, self["router.tau_start"], self["router.tau_end"],
                              self["router.scale_start"], self["router.scale_end"])

    def router_sets(self) -> dict[str, tuple]:
        sets = default_config_sets(self.model_config())
        for axis in ("emb", "mamba", "attn", "ffn"):
            if self[f"router.sets.{axis}"] is not None:
                sets[axis] = tuple(self[f"router.sets.{axis}"])
        return sets

    def router_modes(self) -> dict[str, str]:
        return {a: self[f"router.modes.{a}"] for a in ("mamba", "attn", "ffn")}

    def budgets(self, full_params: int) -> list[BudgetSpec]:
        return [BudgetSpec(i, float(round(full_params * f)), label) for i, (label, f) in enumerate(self["router.budgets"])]


def _guess_key(message: str) -> str:
    for key in SCHEMA:
        leaf = key.rsplit(".", 1)[-1]
        if leaf in message:
            return key
    return "config"
