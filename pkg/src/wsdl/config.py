"""Flat ``key = value`` configuration shared by the CLI and model snapshots.

One RunConfig bundles the generator, training, backbone, anchor, and head
configurations. Keys form the union of their field names; assigning a key
updates every sub-configuration that carries the field, so e.g.
``num_classes`` stays consistent across the generator, the backbone, and
the heads. Unknown keys are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .backbone import BackboneConfig
from .heads import HeadConfig
from .rpn import AnchorConfig
from .synthdata import GenConfig

_EXCLUDED_FIELDS = {"glyphs"}  # structured, not expressible as one line


@dataclass
class TrainConfig:
    """Stage-wise schedule; all randomness hangs off the one seed."""

    seed: int = 7
    epochs_maen: int = 25
    epochs_rpn: int = 10
    epochs_heads: int = 10
    batch_maen: int = 20
    learning_rate: float = 0.02  # from-scratch training; fine-tuning setups use far less
    momentum: float = 0.9
    weight_decay: float = 0.0005
    decay_factor: float = 10.0   # learning rate divides by this once per stage
    decay_epoch_maen: int = 20   # 0-based epoch at which the decay applies
    decay_epoch_rpn: int = 0     # stages 2-3 fine-tune; epoch-0 decay puts them at lr/10
    decay_epoch_heads: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.decay_factor <= 0 or self.batch_maen < 1:
            raise ValueError("rates and batch sizes must be positive")
        if min(self.epochs_maen, self.epochs_rpn, self.epochs_heads) < 1:
            raise ValueError("every stage needs at least one epoch")


def _parse_like(template, raw: str):
    raw = raw.strip()
    if isinstance(template, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(template, int):
        return int(raw)
    if isinstance(template, float):
        return float(raw)
    if isinstance(template, tuple):
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if not parts:
            raise ValueError("expected a comma-separated list")
        elem = template[0] if template else ""
        return tuple(_parse_like(elem, p) for p in parts)
    return raw


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    gen: GenConfig
    train: TrainConfig
    backbone: BackboneConfig
    anchor: AnchorConfig
    head: HeadConfig

    @classmethod
    def default(cls) -> "RunConfig":
        return cls(GenConfig(), TrainConfig(), BackboneConfig(), AnchorConfig(), HeadConfig())

    def subconfigs(self):
        return (self.gen, self.train, self.backbone, self.anchor, self.head)

    def schema(self) -> dict:
        """key -> template value (from the first sub-config carrying the field)."""
        out = {}
        for sub in self.subconfigs():
            for f in fields(sub):
                if f.name in _EXCLUDED_FIELDS or f.name in out:
                    continue
                out[f.name] = getattr(sub, f.name)
        return out

    def set_key(self, key: str, raw: str):
        """Parse and assign one key across every sub-config carrying it."""
        hit = False
        parsed = None
        for sub in self.subconfigs():
            names = {f.name for f in fields(sub)}
            if key in names and key not in _EXCLUDED_FIELDS:
                if not hit:
                    parsed = _parse_like(getattr(sub, key), raw)
                setattr(sub, key, parsed)
                hit = True
        if not hit:
            raise KeyError(f"unknown configuration key: {key!r}")

    def sync_derived(self):
        """Re-derive cross-config facts and re-run dataclass validation."""
        self.backbone.input_size = self.gen.image_size
        self.backbone.num_classes = self.gen.num_classes
        self.head.num_classes = self.gen.num_classes
        self.backbone = replace(self.backbone)
        self.anchor.stride = self.backbone.tap_stride("late")
        self.gen = replace(self.gen)
        self.train = replace(self.train)
        self.anchor = replace(self.anchor)
        self.head = replace(self.head)

    def to_lines(self) -> str:
        schema = self.schema()
        return "".join(f"{key} = {_format_value(schema[key])}\n" for key in sorted(schema))

    def apply_text(self, text: str, source: str = "<config>"):
        for line_no, line in enumerate(text.splitlines(), 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ValueError(f"{source}:{line_no}: expected 'key = value', got {line!r}")
            key, _, raw = stripped.partition("=")
            try:
                self.set_key(key.strip(), raw)
            except KeyError:
                raise
            except ValueError as exc:
                raise ValueError(f"{source}:{line_no}: bad value for {key.strip()!r}: {exc}") from exc


def load_run_config(path) -> RunConfig:
    cfg = RunConfig.default()
    with open(path, encoding="utf-8") as fh:
        cfg.apply_text(fh.read(), source=str(path))
    cfg.sync_derived()
    return cfg
