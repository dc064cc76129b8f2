"""Run configuration: a flat ``key = value`` file plus command-line overrides."""

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ContractError

__all__ = ["RunConfig", "load_config", "parse_overrides", "BAR_WIDTHS", "DEFAULT_LEVELS"]

BAR_WIDTHS = (10, 20, 30, 40, 240)
DEFAULT_LEVELS = tuple(round(0.90 + 0.01 * i, 2) for i in range(10))


@dataclass
class RunConfig:
    """Every knob of a run; :meth:`dump` prints the file format that :func:`load_config` reads."""

    # data
    daily_csv: str = "data/daily.csv"
    intraday_csv: str = "data/intraday.csv"
    output_dir: str = "out"
    bar_minutes: int = 30
    session: str = "09:30-11:30,13:00-15:00"
    # forecasting
    levels: tuple = DEFAULT_LEVELS
    window: int = 1456
    horizon: int = 244
    refit_every: int = 20
    pooled_slots: bool = False
    # preprocessing
    vacation_enabled: bool = True
    vacation_gap_days: int = 3
    vacation_clip: float = 3.0
    vacation_window: int = 250
    seasonal_target: str = "log_abs"
    seasonal_method: str = "moving_average"
    seasonal_in_model: bool = False
    # optimiser
    min_obs: int = 250
    maxiter: int = 5000
    fatol: float = 1e-8
    xatol: float = float("inf")
    restarts: int = 3
    refit_restarts: int = 0
    seed: int = 0
    # evaluation
    dq_lags: int = 4
    lm_lags: int = 4
    mcs_alpha: float = 0.15
    mcs_block: int = 10
    mcs_reps: int = 5000
    extra_forecasts: tuple = ()
    # simulation
    sim_days: int = 1700
    sim_base_minutes: int = 10
    sim_start: str = "2015-01-05"
    sim_truth: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.bar_minutes not in BAR_WIDTHS:
            raise ContractError(f"bar_minutes must be one of {BAR_WIDTHS}, got {self.bar_minutes}")
        if self.window < 250:
            raise ContractError(f"window must be at least 250 days, got {self.window}")
        if self.horizon < 1:
            raise ContractError("horizon must be at least 1")
        if self.refit_every < 1:
            raise ContractError("refit_every must be at least 1")
        if not self.levels or any(not 0.0 < lv < 1.0 for lv in self.levels):
            raise ContractError("levels must lie strictly inside (0, 1)")
        if len(set(self.levels)) != len(self.levels):
            raise ContractError("levels must be distinct")
        if self.seasonal_target not in ("log_abs", "raw", "off"):
            raise ContractError(f"seasonal_target must be log_abs, raw or off, got {self.seasonal_target!r}")
        if self.seasonal_method not in ("moving_average", "direct"):
            raise ContractError(f"seasonal_method must be moving_average or direct, got {self.seasonal_method!r}")
        if not 0.0 < self.mcs_alpha < 1.0:
            raise ContractError("mcs_alpha must lie in (0, 1)")
        if self.sim_base_minutes not in (10, 20, 30, 40, 240):
            raise ContractError("sim_base_minutes must be a supported bar width")

    @property
    def out(self):
        return Path(self.output_dir)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def dump(self):
        lines = []
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            elif isinstance(val, bool):
                val = "true" if val else "false"
            lines.append(f"{f.name} = {val}")
        return "\n".join(lines) + "\n"

    def to_dict(self):
        return json.loads(json.dumps(dataclasses.asdict(self)))


def _coerce(f, raw):
    kind = type(f.default) if f.default is not dataclasses.MISSING else str
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ContractError(f"{f.name}: expected a boolean, got {raw!r}")
    if kind is tuple:
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if f.name == "levels":
            try:
                return tuple(float(p) for p in parts)
            except ValueError:
                raise ContractError(f"levels: expected comma-separated numbers, got {raw!r}") from None
        return tuple(parts)
    try:
        return kind(raw)
    except ValueError:
        raise ContractError(f"{f.name}: cannot read {raw!r} as {kind.__name__}") from None


def parse_overrides(items):
    """Turn ``["key=value", ...]`` into a typed dict."""
    known = {f.name: f for f in fields(RunConfig)}
    out = {}
    for item in items:
        if "=" not in item:
            raise ContractError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in known:
            raise ContractError(f"unknown configuration key {key!r}")
        out[key] = _coerce(known[key], raw)
    return out


def load_config(path=None, overrides=()):
    """Read a config file (if any), then apply ``key=value`` overrides."""
    items = []
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ContractError(f"config file {p} not found")
        for n, line in enumerate(p.read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractError(f"{p}:{n}: expected key = value")
            items.append(line)
    return RunConfig(**parse_overrides(list(items) + list(overrides)))
