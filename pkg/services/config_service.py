"""
Config Service
Parses experiment configs (TOML syntax, .cfg) into validated pydantic
models and computes the config hash stamped on every artifact.
"""

import hashlib
import json
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, Field, ValidationError, model_validator

from services.errors import ConfigError, DimensionError
from services.fd_dpd import TrainingHyper
from services.hypernet import MlpSpec, hn_output_dim
from services.mimo import NoiseConfig, UserGeometry
from services.numerics import is_power_of_two
from services.pa_model import PaSynthSpec
from services.td_dpd import TdDpdSpec
from services.waveform import SignalState, StateGrid, build_subcarrier_mask

HASH_EXCLUDED = {"run": {"out_dir", "threads"}}


class RunSection(BaseModel):
    seed: int = 42
    out_dir: str = "runs/desk"
    threads: int = Field(default=1, ge=1)


class WaveformSection(BaseModel):
    n_fft: int = 2048
    fs_mhz: float = Field(default=200.0, gt=0)
    qam_order: int = 16


class ArraySection(BaseModel):
    users: int = Field(default=1, ge=1)
    antennas: int = Field(default=16, ge=1)
    carrier_ghz: float = 30.0
    median_gain_db_at_1m: float = -61.9
    pathloss_exponent: float = 2.1
    geometry: List[UserGeometry] = Field(default_factory=lambda: [UserGeometry(distance_m=25.0, angle_deg=70.0)])


class NoiseSection(BaseModel):
    enabled: bool = True
    psd_dbm_hz: float = -174.0
    noise_figure_db: float = 7.0


class StatesSection(BaseModel):
    grid: List[SignalState]
    training_ids: List[int]
    baseline_id: int = 3
    showcase_id: int = 1

    def to_grid(self) -> StateGrid:
        return StateGrid(states=self.grid, training_ids=self.training_ids)


class PaSection(PaSynthSpec):
    coeff_file: Optional[str] = None


class TdDpdSection(TdDpdSpec):
    probe_symbols: int = Field(default=4, ge=1)


class NnSection(BaseModel):
    memory: int = Field(default=7, ge=0)
    tap_wrap: Literal["circular", "zero"] = "circular"
    symbols_per_state: int = Field(default=20, ge=1)
    main: MlpSpec = Field(default_factory=lambda: MlpSpec(layer_sizes=[16, 50, 6, 2], hidden_activation="tanh"))
    hn: MlpSpec = Field(default_factory=lambda: MlpSpec(layer_sizes=[2, 40, 24, 14], hidden_activation="relu"))


class EvalSection(BaseModel):
    symbols: int = Field(default=4, ge=1)
    noise_realizations: int = Field(default=4, ge=1)
    equalize: Literal["known-alpha", "ls-scalar"] = "known-alpha"


class PsdSection(BaseModel):
    symbols: int = Field(default=8, ge=1)
    segment: int = 2048
    overlap: float = Field(default=0.5, ge=0, lt=1)
    window: str = "hann"


class ExperimentConfig(BaseModel):
    run: RunSection = Field(default_factory=RunSection)
    waveform: WaveformSection = Field(default_factory=WaveformSection)
    array: ArraySection = Field(default_factory=ArraySection)
    noise: NoiseSection = Field(default_factory=NoiseSection)
    states: StatesSection
    pa: PaSection = Field(default_factory=PaSection)
    tddpd: TdDpdSection = Field(default_factory=TdDpdSection)
    nn: NnSection = Field(default_factory=NnSection)
    training: TrainingHyper = Field(default_factory=TrainingHyper)
    eval: EvalSection = Field(default_factory=EvalSection)
    psd: PsdSection = Field(default_factory=PsdSection)

    @model_validator(mode="after")
    def check_identities(self):
        wf, arr, nn = self.waveform, self.array, self.nn
        if not is_power_of_two(wf.n_fft):
            raise ValueError(f"waveform.n_fft must be a power of two, got {wf.n_fft}")
        if wf.qam_order not in (4, 16, 64):
            raise ValueError(f"waveform.qam_order must be 4, 16 or 64, got {wf.qam_order}")
        if len(arr.geometry) != arr.users:
            raise ValueError(f"array.geometry lists {len(arr.geometry)} users but array.users = {arr.users}")
        if arr.users > arr.antennas:
            raise ValueError(f"array.users ({arr.users}) must not exceed array.antennas ({arr.antennas})")

        d_in = 2 * (nn.memory + 1) * arr.users
        sizes = nn.main.layer_sizes
        if sizes[0] != d_in:
            raise ValueError(
                f"nn.main input is {sizes[0]} but 2(M+1)U = 2*({nn.memory}+1)*{arr.users} = {d_in}"
            )
        if sizes[-1] != 2 * arr.users:
            raise ValueError(f"nn.main output is {sizes[-1]} but 2U = {2 * arr.users}")
        if nn.hn.layer_sizes[0] != 2:
            raise ValueError(f"nn.hn input must be 2 (the state vector), got {nn.hn.layer_sizes[0]}")
        need = hn_output_dim(nn.main)
        if nn.hn.layer_sizes[-1] != need:
            raise ValueError(
                f"nn.hn output is {nn.hn.layer_sizes[-1]} but must be "
                f"{sizes[-1]}*{sizes[-2]}+{sizes[-1]} = {need} for main {nn.main.describe()}"
            )
        if nn.memory >= wf.n_fft:
            raise ValueError(f"nn.memory {nn.memory} must be shorter than n_fft {wf.n_fft}")

        grid = self.states.to_grid()
        ids = [s.id for s in grid.states]
        for name in ("baseline_id", "showcase_id"):
            sid = getattr(self.states, name)
            if sid not in ids:
                raise ValueError(f"states.{name} = {sid} is not in the state grid {ids}")
        for state in grid.states:
            try:
                build_subcarrier_mask(wf.n_fft, wf.fs_mhz, state.bandwidth_mhz)
            except DimensionError as e:
                raise ValueError(f"{state.label}: {e}")

        if not is_power_of_two(self.psd.segment):
            raise ValueError(f"psd.segment must be a power of two, got {self.psd.segment}")
        if self.psd.segment > self.psd.symbols * wf.n_fft:
            raise ValueError(
                f"psd.segment {self.psd.segment} exceeds the {self.psd.symbols * wf.n_fft}-sample PSD stream"
            )
        if self.pa.coeff_file is None and self.pa.order % 2 == 0:
            raise ValueError(f"pa.order must be odd, got {self.pa.order}")
        if self.tddpd.order % 2 == 0:
            raise ValueError(f"tddpd.order must be odd, got {self.tddpd.order}")
        return self

    @property
    def grid(self) -> StateGrid:
        return self.states.to_grid()

    @property
    def out_dir(self) -> Path:
        return Path(self.run.out_dir)

    def noise_config(self) -> NoiseConfig:
        return NoiseConfig(
            psd_dbm_hz=self.noise.psd_dbm_hz,
            noise_figure_db=self.noise.noise_figure_db,
            bandwidth_hz=self.waveform.fs_mhz * 1e6,
            enabled=self.noise.enabled,
        )

    def fit_ids(self) -> List[int]:
        """States needing stored symbols and targets: training plus baseline"""
        ids = list(self.states.training_ids)
        if self.states.baseline_id not in ids:
            ids.append(self.states.baseline_id)
        return ids


def _format_validation(e: ValidationError) -> str:
    lines = []
    for err in e.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "config"
        lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)


def config_from_dict(data: dict, source: str = "<dict>") -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid config {source}: {_format_validation(e)}")


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Cannot parse {path}: {e}")

    coeff = data.get("pa", {}).get("coeff_file")
    if coeff and not Path(coeff).is_absolute():
        data["pa"]["coeff_file"] = str((path.parent / coeff).resolve())
    return config_from_dict(data, source=str(path))


def with_overrides(
    cfg: ExperimentConfig,
    out_dir: Optional[str] = None,
    seed: Optional[int] = None,
    threads: Optional[int] = None,
) -> ExperimentConfig:
    run = cfg.run.model_copy(update={
        k: v for k, v in {"out_dir": out_dir, "seed": seed, "threads": threads}.items() if v is not None
    })
    if run.threads < 1:
        raise ConfigError(f"threads must be >= 1, got {run.threads}")
    return cfg.model_copy(update={"run": run})


def canonical_json(cfg: ExperimentConfig) -> str:
    data = cfg.model_dump(mode="json", exclude=HASH_EXCLUDED)
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()[:16]
