"""Key-value experiment configuration files.

Format, one entry per line::

    # comment
    include base.cfg
    experiment.id = AttUNet-LP+Man
    experiment.seeds = 0,1,2
    cohort.size = CoA:40,RAA:31,DAA:18

``include`` pulls in another file relative to the current one before the
remaining lines apply, so local values override included ones. Keys are
typed against the schema below; unknown keys are errors. The resolved
configuration hashes to a short digest that artifacts record, letting
reruns detect configuration drift.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from archseg.grid import ANOMALIES


class ConfigError(ValueError):
    """Bad configuration file or value; maps to CLI exit code 2."""


EXPERIMENT_IDS = (
    "LP",
    "AttUNet-LP",
    "AttUNet-Man",
    "AttUNet-LP+Man",
    "Man+Split",
    "Split",
)
CLS_MODES = ("multi", "bin", "image", "img-multi")


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _parse_seeds(s: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(p) for p in s.split(",") if p.strip())
    except ValueError as e:
        raise ConfigError(f"bad seed list {s!r}") from e
    if not seeds:
        raise ConfigError("seed list is empty")
    return seeds


def _parse_sizes(s: str) -> dict[str, int]:
    out: dict[str, int] = {}
    for part in s.split(","):
        if not part.strip():
            continue
        try:
            name, num = part.split(":")
            out[name.strip()] = int(num)
        except ValueError as e:
            raise ConfigError(f"bad class size entry {part!r}") from e
    bad = set(out) - set(ANOMALIES)
    if bad:
        raise ConfigError(f"unknown anomaly classes {sorted(bad)}")
    if set(out) != set(ANOMALIES):
        raise ConfigError(f"class sizes must cover all of {ANOMALIES}")
    if any(v < 3 for v in out.values()):
        raise ConfigError("each class needs at least 3 subjects")
    return out


def _parse_experiment_id(s: str) -> str:
    s = s.strip()
    base = s
    if "+Classifier(" in s:
        base, _, rest = s.partition("+Classifier(")
        if not rest.endswith(")"):
            raise ConfigError(f"malformed classifier suffix in {s!r}")
        mode = rest[:-1]
        if mode not in CLS_MODES:
            raise ConfigError(f"unknown classifier mode {mode!r}")
    if base not in EXPERIMENT_IDS:
        raise ConfigError(f"unknown experiment id {base!r}")
    return s


def classifier_mode_of(experiment_id: str) -> str | None:
    """The mode inside a ``+Classifier(mode)`` suffix, if present."""
    if "+Classifier(" not in experiment_id:
        return None
    return experiment_id.partition("+Classifier(")[2][:-1]


def base_id_of(experiment_id: str) -> str:
    return experiment_id.partition("+Classifier(")[0]


@dataclass(frozen=True)
class Option:
    default: object
    parse: Callable[[str], object]
    doc: str


def _fraction(s: str) -> float:
    v = float(s)
    if not 0.0 <= v <= 1.0:
        raise ConfigError(f"fraction {v} outside [0, 1]")
    return v


SCHEMA: dict[str, Option] = {
    "experiment.id": Option(
        "AttUNet-LP+Man", _parse_experiment_id,
        "pipeline to run; one of "
        + ", ".join(EXPERIMENT_IDS)
        + ", optionally suffixed +Classifier(multi|bin|image|img-multi)",
    ),
    "experiment.seeds": Option(
        (0, 1, 2), _parse_seeds, "comma-separated repeat seeds"),
    "experiment.weak_fraction": Option(
        1.0, _fraction, "fraction of manual binary labels kept per class"),
    "experiment.out": Option(
        "runs", str, "output directory for artifacts"),
    "cohort.dir": Option(
        "cohort", str, "cohort directory (built there when absent)"),
    "cohort.size": Option(
        {"CoA": 40, "RAA": 31, "DAA": 18}, _parse_sizes,
        "subjects per anomaly class, e.g. CoA:40,RAA:31,DAA:18"),
    "cohort.seed": Option(0, int, "generation seed"),
    "cohort.dims": Option(40, int, "native phantom grid size (voxels)"),
    "cohort.roi": Option(32, int, "prepared crop size (voxels)"),
    "register.iterations": Option(
        60, int, "instance-mode optimization iterations per pair"),
    "seg.epochs": Option(30, int, "segmenter training epochs"),
    "seg.batch_size": Option(2, int, "segmenter batch size"),
    "seg.lr0": Option(3e-3, float, "segmenter initial learning rate"),
    "seg.lambda2_0": Option(
        0.5, float, "initial binary-term weight for lp-man"),
    "seg.lambda2_period": Option(
        10, int, "epochs between binary-weight increments"),
    "seg.patience": Option(30, int, "early-stopping patience (epochs)"),
    "seg.augment": Option(True, _parse_bool, "train-time augmentation"),
    "cls.lambda4": Option(8.0, float, "classifier weight in the joint loss"),
    "cls.epochs": Option(40, int, "frozen classifier pretraining epochs"),
    "cls.joint_epochs": Option(8, int, "joint fine-tuning epochs"),
}


Config = dict[str, object]


def defaults() -> Config:
    return {k: opt.default for k, opt in SCHEMA.items()}


def dump_defaults() -> str:
    """The full schema as a loadable config file with doc comments."""
    lines = []
    for key, opt in SCHEMA.items():
        lines.append(f"# {opt.doc}")
        lines.append(f"{key} = {_format_value(opt.default)}")
        lines.append("")
    return "\n".join(lines)


def _format_value(v: object) -> str:
    if isinstance(v, dict):
        return ",".join(f"{k}:{n}" for k, n in v.items())
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _read_lines(path: Path, seen: set[Path]) -> list[tuple[str, str]]:
    path = path.resolve()
    if path in seen:
        raise ConfigError(f"include cycle through {path}")
    seen.add(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    pairs: list[tuple[str, str]] = []
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("include "):
            inc = line[len("include "):].strip()
            pairs.extend(_read_lines(path.parent / inc, seen))
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected 'key = value'")
        key, _, value = line.partition("=")
        pairs.append((key.strip(), value.strip()))
    return pairs


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> Config:
    """Defaults, then the file (with includes), then explicit overrides."""
    cfg = defaults()
    pairs: list[tuple[str, str]] = []
    if path is not None:
        pairs.extend(_read_lines(Path(path), set()))
    for key, value in (overrides or {}).items():
        pairs.append((key, value))
    for key, value in pairs:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            cfg[key] = SCHEMA[key].parse(value)
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(f"bad value for {key}: {value!r}") from e
    return cfg


def canonical_text(cfg: Config) -> str:
    """Stable one-line-per-key rendering used for hashing and lock files."""
    return "\n".join(f"{k} = {_format_value(cfg[k])}" for k in sorted(cfg)) + "\n"


def config_hash(cfg: Config) -> str:
    return hashlib.sha256(canonical_text(cfg).encode()).hexdigest()[:12]
