import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Mapping, Optional

from src.wasserstein_transport.errors import ConfigError
from src.wasserstein_transport.stochastic_flow import SCHEMES
from src.wasserstein_transport.torus_field import INTERPOLATION_METHODS

logger = logging.getLogger(__name__)

COMMANDS = ("flow", "transport-det", "transport-stoch", "converge", "coupling", "ito-check", "moments",
            "rs-check")
FUNCTIONALS = ("potential", "entropy", "power", "interaction", "polynomial")
SCHEMA_VERSION = 1
# fields that change where or how fast a run happens, never what it computes
NON_SEMANTIC_FIELDS = ("out", "threads")


@dataclass
class ExperimentConfig:
    """
    One experiment. Fourier descriptors list coefficients for k = 1, 2, ...:
    potential phi = sum a_k cos kx + b_k sin kx, density proportional to
    1 + sum a_k cos kx + b_k sin kx, initial field g0 likewise (zero mean).
    """
    command: str = "transport-det"
    n: int = 256
    dt: float = 1e-3
    T: float = 1.0
    seed: int = 42
    q: float = 3.0
    N: int = 4
    levels: List[int] = field(default_factory=lambda: [4, 8, 16])
    ref_level: Optional[int] = None
    paths: int = 64
    p: float = 1.0
    beta: float = 0.25
    interpolation: str = "spectral"
    scheme: str = "strat-heun"
    potential_cos: List[float] = field(default_factory=list)
    potential_sin: List[float] = field(default_factory=lambda: [1.0])
    density_cos: List[float] = field(default_factory=lambda: [0.3])
    density_sin: List[float] = field(default_factory=list)
    g0_cos: List[float] = field(default_factory=list)
    g0_sin: List[float] = field(default_factory=lambda: [1.0])
    noise_channels: Optional[List[int]] = None
    functional: str = "potential"
    power: float = 2.0
    output_every: Optional[int] = None
    trials: int = 50
    threads: Optional[int] = None
    out: str = "output"

    def validate(self) -> None:
        """Collect every range violation and raise them together."""
        errors: List[str] = []
        if self.command not in COMMANDS:
            errors.append(f"command must be one of {COMMANDS}, got '{self.command}'")
        if not (64 <= self.n <= 4096 and (self.n & (self.n - 1)) == 0):
            errors.append(f"n must be a power of two in [64, 4096], got {self.n}")
        if not 1e-5 <= self.dt <= 1e-1:
            errors.append(f"dt must lie in [1e-5, 1e-1], got {self.dt}")
        if self.T <= 0.0:
            errors.append(f"T must be positive, got {self.T}")
        if self.q <= 1.0:
            errors.append(f"q must exceed 1, got {self.q}")
        if self.command == "converge" and self.q <= 2.5:
            errors.append(f"converge needs q > 5/2, got {self.q}")
        if self.command in ("moments", "coupling") and self.q <= 1.5:
            errors.append(f"{self.command} needs q > 3/2, got {self.q}")
        if self.N < 1:
            errors.append(f"N must be >= 1, got {self.N}")
        if not self.levels or any(level < 1 for level in self.levels) \
                or any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            errors.append(f"levels must be positive and strictly increasing, got {self.levels}")
        elif self.ref_level is not None and self.ref_level < self.levels[-1]:
            errors.append(f"ref_level {self.ref_level} is below the largest level {self.levels[-1]}")
        if self.paths < 1:
            errors.append(f"paths must be >= 1, got {self.paths}")
        if self.command == "ito-check" and self.paths < 64:
            errors.append(f"ito-check needs at least 64 paths, got {self.paths}")
        if self.command == "coupling" and self.paths < 32:
            errors.append(f"coupling needs at least 32 paths, got {self.paths}")
        if self.p <= 0.0:
            errors.append(f"p must be positive, got {self.p}")
        elif self.command == "coupling" and self.p != int(self.p):
            errors.append(f"coupling needs an integer p, got {self.p}")
        if self.beta <= 0.0:
            errors.append(f"beta must be positive, got {self.beta}")
        if self.interpolation not in INTERPOLATION_METHODS:
            errors.append(f"interpolation must be one of {INTERPOLATION_METHODS}, got '{self.interpolation}'")
        if self.scheme not in SCHEMES:
            errors.append(f"scheme must be one of {SCHEMES}, got '{self.scheme}'")
        if self.functional not in FUNCTIONALS:
            errors.append(f"functional must be one of {FUNCTIONALS}, got '{self.functional}'")
        if self.power < 1.0:
            errors.append(f"power must be >= 1, got {self.power}")
        if self.noise_channels is not None and (
                not self.noise_channels or any(not 0 <= c < 2 * self.N for c in self.noise_channels)):
            errors.append(f"noise_channels must be a non-empty subset of [0, {2 * self.N}), got {self.noise_channels}")
        if self.output_every is not None and self.output_every < 1:
            errors.append(f"output_every must be >= 1, got {self.output_every}")
        if self.trials < 1:
            errors.append(f"trials must be >= 1, got {self.trials}")
        if self.threads is not None and self.threads < 1:
            errors.append(f"threads must be >= 1, got {self.threads}")
        if errors:
            raise ConfigError("Invalid configuration:\n  " + "\n  ".join(errors))

    def semantic_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        for name in NON_SEMANTIC_FIELDS:
            data.pop(name)
        return data


_INT_FIELDS = {"n", "seed", "N", "paths", "trials"}
_OPTIONAL_INT_FIELDS = {"ref_level", "output_every", "threads"}
_FLOAT_FIELDS = {"dt", "T", "q", "p", "beta", "power"}
_STR_FIELDS = {"command", "interpolation", "scheme", "functional", "out"}
_FLOAT_LIST_FIELDS = {"potential_cos", "potential_sin", "density_cos", "density_sin", "g0_cos", "g0_sin"}
_INT_LIST_FIELDS = {"levels"}
_OPTIONAL_INT_LIST_FIELDS = {"noise_channels"}


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value: Any) -> bool:
    return _is_int(value) or isinstance(value, float)


def _coerce(name: str, value: Any, errors: List[str]) -> Any:
    """Type-check one raw value; ints are accepted where floats are expected."""
    if name in _INT_FIELDS or (name in _OPTIONAL_INT_FIELDS and value is not None):
        if not _is_int(value):
            errors.append(f"{name}: expected an integer, got {value!r}")
        return value
    if name in _FLOAT_FIELDS:
        if not _is_number(value):
            errors.append(f"{name}: expected a number, got {value!r}")
            return value
        return float(value)
    if name in _STR_FIELDS:
        if not isinstance(value, str):
            errors.append(f"{name}: expected a string, got {value!r}")
        return value
    if name in _FLOAT_LIST_FIELDS:
        if not isinstance(value, list) or not all(_is_number(v) for v in value):
            errors.append(f"{name}: expected a list of numbers, got {value!r}")
            return value
        return [float(v) for v in value]
    if name in _INT_LIST_FIELDS or (name in _OPTIONAL_INT_LIST_FIELDS and value is not None):
        if not isinstance(value, list) or not all(_is_int(v) for v in value):
            errors.append(f"{name}: expected a list of integers, got {value!r}")
        return value
    return value


def _parse_file(path: str) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            text = handle.read()
    except OSError as exc:
        raise ConfigError(f"Cannot read configuration {path}: {exc}") from exc
    if not text.strip():
        return {}
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return data


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    """
    Defaults, then the JSON file at ``path``, then ``overrides`` (None values
    ignored). Unknown keys and every type or range error are reported at once.
    """
    raw: Dict[str, Any] = _parse_file(path) if path else {}
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"Unknown configuration fields: {', '.join(unknown)}")
    errors: List[str] = []
    values = {name: _coerce(name, value, errors) for name, value in raw.items()}
    if errors:
        raise ConfigError("Invalid configuration:\n  " + "\n  ".join(errors))
    config = ExperimentConfig(**values)
    config.validate()
    logger.debug("Loaded configuration %s", config)
    return config


def canonical_json(data: Mapping[str, Any]) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def config_hash(config: ExperimentConfig) -> str:
    """Git blob hash of the canonical JSON of the semantic fields."""
    body = canonical_json(config.semantic_dict()).encode("utf-8")
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()
