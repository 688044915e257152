"""Flat ``section.key = value`` run configuration shared by every CLI subcommand."""
from __future__ import annotations

import dataclasses
import os
import types
import typing
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Optional

from .adapt import ProbeProtocol, SegProtocol
from .core import ConfigError, ModelConfig, RetmaeError
from .data import PhantomConfig
from .masking import MaskingConfig
from .pretrain import ScheduleConfig

OUTPUT_ENV = "RETMAE_OUTPUT_DIR"


@dataclass(frozen=True)
class DataSection:
    root: str = ""  # empty means <output_dir>/dataset
    kind: str = "phantom"  # phantom | plain | blobs
    n_patients: int = 8
    samples_per_patient: int = 2
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    split: str = "test"  # split scored by evaluate and shown by report

    def __post_init__(self) -> None:
        if self.kind not in ("phantom", "plain", "blobs"):
            raise ConfigError(f"data.kind must be phantom|plain|blobs, got {self.kind!r}")
        if self.n_patients < 1 or self.samples_per_patient < 1:
            raise ConfigError("data.n_patients and data.samples_per_patient must be >= 1")
        if self.split not in ("train", "val", "test"):
            raise ConfigError(f"data.split must be train|val|test, got {self.split!r}")


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    output_dir: str = "runs/default"
    checkpoint: str = ""  # empty means the natural checkpoint in the output dir
    predictions: str = ""  # directory of <sample_id>_pred.png maps for evaluate
    threads: int = 1
    num_classes: int = 2
    head: str = "convnext"
    downstream: tuple[str, ...] = ("OCT",)
    augment: str = "flip"  # full | flip | none
    max_steps: int = 0  # 0 means no cap
    report_samples: int = 2

    def __post_init__(self) -> None:
        if self.augment not in ("full", "flip", "none"):
            raise ConfigError(f"run.augment must be full|flip|none, got {self.augment!r}")
        if self.head not in ("convnext", "linear"):
            raise ConfigError(f"run.head must be convnext|linear, got {self.head!r}")
        if self.threads < 1 or self.num_classes < 2 or self.max_steps < 0:
            raise ConfigError("run.threads >= 1, run.num_classes >= 2 and run.max_steps >= 0 required")


SECTIONS: dict[str, type] = {
    "model": ModelConfig,
    "schedule": ScheduleConfig,
    "masking": MaskingConfig,
    "probe": ProbeProtocol,
    "seg": SegProtocol,
    "phantom": PhantomConfig,
    "data": DataSection,
    "run": RunSection,
}

# desk-scale model default: Tiny encoder at 128 px with 16 px patches
DESK_MODEL = dict(image_size=128, patch=16)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    schedule: ScheduleConfig
    masking: MaskingConfig
    probe: ProbeProtocol
    seg: SegProtocol
    phantom: PhantomConfig
    data: DataSection
    run: RunSection

    @property
    def output_dir(self) -> Path:
        return Path(self.run.output_dir)

    @property
    def data_root(self) -> Path:
        return Path(self.data.root) if self.data.root else self.output_dir / "dataset"

    def to_text(self) -> str:
        lines = []
        for name in SECTIONS:
            obj = getattr(self, name)
            for f in dataclasses.fields(obj):
                lines.append(f"{name}.{f.name} = {format_value(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path


# ---------------------------------------------------------------------------
# value codec


def format_value(v: Any) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    return str(v)


def _is_union(tp: Any) -> bool:
    return typing.get_origin(tp) is typing.Union or isinstance(tp, types.UnionType)


def coerce(tp: Any, text: str, key: str) -> Any:
    text = text.strip()
    try:
        if _is_union(tp):
            args = [a for a in typing.get_args(tp) if a is not type(None)]
            if text.lower() in ("none", ""):
                return None
            return coerce(args[0], text, key)
        if typing.get_origin(tp) is tuple:
            args = typing.get_args(tp)
            items = [t for t in (s.strip() for s in text.split(",")) if t]
            if len(args) == 2 and args[1] is Ellipsis:
                return tuple(coerce(args[0], t, key) for t in items)
            if len(items) != len(args):
                raise ConfigError(f"{key}: expected {len(args)} comma-separated values, got {len(items)}")
            return tuple(coerce(a, t, key) for a, t in zip(args, items))
        if tp is bool:
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
    except ConfigError:
        raise
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot parse {text!r} as {getattr(tp, '__name__', tp)}") from None
    raise ConfigError(f"{key}: unsupported field type {tp}")


def parse_text(text: str, origin: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{origin}:{n}: duplicate key {key}")
        out[key] = value
    return out


def _section(cls: type, defaults: Mapping[str, Any], raw: Mapping[str, str], name: str) -> Any:
    hints = typing.get_type_hints(cls)
    kw = dict(defaults)
    for key, text in raw.items():
        kw[key] = coerce(hints[key], text, f"{name}.{key}")
    try:
        return cls(**kw)
    except RetmaeError as exc:
        raise ConfigError(f"{name}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def build(raw: Mapping[str, str]) -> RunConfig:
    """Resolve raw key/value pairs over the desk defaults; unknown keys are rejected."""
    grouped: dict[str, dict[str, str]] = {name: {} for name in SECTIONS}
    unknown = []
    for key, value in raw.items():
        sec, _, field = key.partition(".")
        if sec not in SECTIONS or field not in {f.name for f in dataclasses.fields(SECTIONS[sec])}:
            unknown.append(key)
            continue
        grouped[sec][field] = value
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")

    variant = grouped["model"].get("variant", "Tiny").strip()
    base = ModelConfig.preset(variant)
    model_defaults = base.to_dict()
    if base.variant == "Tiny":
        model_defaults.update(DESK_MODEL)
    model = _section(ModelConfig, model_defaults, grouped["model"], "model")
    phantom_defaults = dataclasses.asdict(PhantomConfig(image_size=model.image_size,
                                                        num_layer_classes=model.num_layer_classes))
    if grouped["data"].get("kind", "phantom").strip() == "plain":
        phantom_defaults.update(lesion_prob=0.0, control_points=3, boundary_wobble=0.01)
    cfg = RunConfig(
        model=model,
        schedule=_section(ScheduleConfig, dataclasses.asdict(ScheduleConfig.desk()), grouped["schedule"], "schedule"),
        masking=_section(MaskingConfig, dataclasses.asdict(MaskingConfig()), grouped["masking"], "masking"),
        probe=_section(ProbeProtocol, dataclasses.asdict(ProbeProtocol()), grouped["probe"], "probe"),
        seg=_section(SegProtocol, dataclasses.asdict(SegProtocol()), grouped["seg"], "seg"),
        phantom=_section(PhantomConfig, phantom_defaults, grouped["phantom"], "phantom"),
        data=_section(DataSection, dataclasses.asdict(DataSection()), grouped["data"], "data"),
        run=_section(RunSection, dataclasses.asdict(RunSection()), grouped["run"], "run"),
    )
    return cfg


def load(path: Optional[str | Path] = None, overrides: Mapping[str, str] = (), out: Optional[str] = None,
         env: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Config file, then ``overrides``, then the output-dir override (flag beats environment)."""
    raw: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        raw.update(parse_text(p.read_text(), str(p)))
    raw.update(overrides)
    env = os.environ if env is None else env
    if out:
        raw["run.output_dir"] = out
    elif env.get(OUTPUT_ENV):
        raw["run.output_dir"] = env[OUTPUT_ENV]
    return build(raw)
