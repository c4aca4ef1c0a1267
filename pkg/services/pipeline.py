"""
Pipeline Service
File-phased experiment: gen -> train-td -> targets -> train-hn ->
train-fdnn -> eval -> psd. Every phase reads its inputs from the output
directory, so phases can be rerun or resumed independently.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel

from services.config_service import ExperimentConfig, config_hash
from services.dataset_store import read_json, read_record, state_file, write_json, write_record
from services.errors import ConfigError, DpdLabError, PrerequisiteError, RankDeficientError
from services.fd_dpd import StateData, TrainingSet, fd_dpd_infer, gen_targets, train_hn_fdnn
from services.hypernet import (
    HnFdnnModel,
    emit_output_layer,
    grad_check,
    init_model,
    load_checkpoint,
    random_grad_sample,
    save_checkpoint,
)
from services.metrics import branch_sum_psd, error_psd, evm, tx_nmse
from services.mimo import ChannelModel, Precoder, apply_precoding, los_channel, normalize_power, receive, zf_precoder
from services.numerics import rng_stream, stream_id
from services.pa_model import MpArrayModel, synth_pa_array
from services.td_dpd import fit_td_dpd
from services.waveform import (
    SignalState,
    build_subcarrier_mask,
    fd_to_td,
    gen_fd_symbols,
    make_state_vector,
    td_to_fd,
)

PHASES = ["gen", "train-td", "targets", "train-hn", "train-fdnn", "eval", "psd"]
METHODS = ["no-dpd", "fd-nn", "hn-fd-nn", "td-dpd"]
CSV_COLUMNS = ["state_id", "bw_mhz", "p_dbm", "method", "evm_pct", "tx_nmse_db", "seed", "config_hash"]

MANIFEST = "manifest.json"
CHANNEL = "channel.json"
PA = "pa.json"
SYMBOLS = "symbols"
TDDPD = "tddpd.json"
TRAINING_SET = "training_set"
HN_CHECKPOINT = "checkpoints/hn_fdnn.json"
FDNN_CHECKPOINT = "checkpoints/fd_nn.json"
REPORT_CSV = "report.csv"
REPORT_JSON = "report.json"
PSD_CSV = "psd.csv"


class ReportRow(BaseModel):
    state_id: int
    bw_mhz: float
    p_dbm: float
    method: str
    evm_pct: float
    tx_nmse_db: float
    seed: int
    config_hash: str
    runtime_s: float = 0.0


@dataclass
class RunReport:
    rows: List[ReportRow]
    config_hash: str
    seed: int
    config: dict = field(default_factory=dict)

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.model_dump() for r in self.rows], columns=CSV_COLUMNS)

    def row(self, state_id: int, method: str) -> ReportRow:
        for r in self.rows:
            if r.state_id == state_id and r.method == method:
                return r
        raise KeyError(f"no report row for state {state_id}, method {method}")

    def matrix_problems(self, state_ids: Sequence[int]) -> List[str]:
        problems = []
        for sid in state_ids:
            for method in METHODS:
                n = sum(1 for r in self.rows if r.state_id == sid and r.method == method)
                if n != 1:
                    problems.append(f"state {sid} / {method}: {n} rows")
        extra = {r.state_id for r in self.rows} - set(state_ids)
        if extra:
            problems.append(f"unexpected states {sorted(extra)}")
        return problems


@dataclass
class PipelineResult:
    out_dir: Path
    phases: List[str]
    report: Optional[RunReport] = None
    psd: Optional[pd.DataFrame] = None


@dataclass
class Lab:
    """Shared view of one run: config, output directory and artifact loaders"""

    cfg: ExperimentConfig
    quiet: bool = False

    def __post_init__(self):
        self.out = self.cfg.out_dir
        self.hash = config_hash(self.cfg)
        self.grid = self.cfg.grid
        self.seed = self.cfg.run.seed

    def log(self, msg: str) -> None:
        if not self.quiet:
            print(msg)

    def path(self, name: str) -> Path:
        return self.out / name

    def rng(self, kind: str, *indices: int):
        return rng_stream(self.seed, stream_id(kind, *indices))

    def mask(self, state: SignalState) -> np.ndarray:
        wf = self.cfg.waveform
        return build_subcarrier_mask(wf.n_fft, wf.fs_mhz, state.bandwidth_mhz)

    def fan_out(self, fn, items):
        with ThreadPoolExecutor(max_workers=self.cfg.run.threads) as pool:
            return list(pool.map(fn, items))

    def symbols(self, state: SignalState, kind: str, count: int) -> np.ndarray:
        """count FD symbol matrices (count x N x U) from the (kind, state) stream"""
        wf, users = self.cfg.waveform, self.cfg.array.users
        rng = self.rng(kind, state.id)
        mask = self.mask(state)
        return np.stack([gen_fd_symbols(users, mask, wf.qam_order, rng, wf.n_fft).entries for _ in range(count)])

    def channel(self) -> ChannelModel:
        return ChannelModel.from_dict(read_json(self.path(CHANNEL)))

    def pa(self) -> MpArrayModel:
        return MpArrayModel.from_dict(read_json(self.path(PA)), kind="pa")

    def tddpd(self) -> MpArrayModel:
        return MpArrayModel.from_dict(read_json(self.path(TDDPD)), kind="td-dpd")

    def hn_model(self) -> HnFdnnModel:
        model, _ = load_checkpoint(self.path(HN_CHECKPOINT), self.cfg.nn.main, self.cfg.nn.hn)
        return model

    def fdnn_model(self) -> HnFdnnModel:
        model, _ = load_checkpoint(self.path(FDNN_CHECKPOINT), self.cfg.nn.main)
        if model.has_hypernetwork:
            raise PrerequisiteError(f"{self.path(FDNN_CHECKPOINT)} holds a hypernetwork model, expected FD-NN")
        return model


def transmit(symbols: np.ndarray, W: np.ndarray, state: SignalState):
    """Precode and normalize one symbol to the state's RMS power: TD frame and Precoder(W, alpha)"""
    x = fd_to_td(symbols @ W.T)
    x, alpha = normalize_power(x, state.rms_power_dbm)
    return x, Precoder(W=W, alpha=alpha)


def fd_dpd_drive(model: HnFdnnModel, symbols: np.ndarray, precoder: Precoder, output_layer=None) -> np.ndarray:
    predistorted = fd_dpd_infer(model, symbols, output_layer=output_layer)
    return fd_to_td(apply_precoding(predistorted, precoder))


def _required(lab: Lab, phase: str) -> List[Path]:
    cfg = lab.cfg
    sym = [state_file(lab.path(SYMBOLS), sid) for sid in cfg.fit_ids()]
    if phase == "gen":
        return []
    if phase == "train-td":
        return [lab.path(CHANNEL), lab.path(PA)]
    if phase == "targets":
        return [lab.path(CHANNEL), lab.path(PA), lab.path(TDDPD)] + sym
    if phase == "train-hn":
        return [state_file(lab.path(TRAINING_SET), sid) for sid in cfg.states.training_ids]
    if phase == "train-fdnn":
        return [state_file(lab.path(TRAINING_SET), cfg.states.baseline_id)]
    return [lab.path(CHANNEL), lab.path(PA), lab.path(TDDPD), lab.path(HN_CHECKPOINT), lab.path(FDNN_CHECKPOINT)]


def check_prerequisites(lab: Lab, phase: str) -> None:
    if phase == "gen":
        return
    manifest_path = lab.path(MANIFEST)
    if not manifest_path.exists():
        raise PrerequisiteError(f"{lab.out} has no {MANIFEST}; run the gen phase first")
    manifest = read_json(manifest_path)
    if manifest.get("config_hash") != lab.hash:
        raise PrerequisiteError(
            f"Artifacts in {lab.out} come from config hash {manifest.get('config_hash')}, "
            f"current config hashes to {lab.hash}; rerun from gen or use another --out"
        )
    missing = [str(p) for p in _required(lab, phase) if not p.exists()]
    if missing:
        raise PrerequisiteError(f"Phase {phase} is missing {', '.join(missing)}")


def _mark_done(lab: Lab, phase: str) -> None:
    manifest = read_json(lab.path(MANIFEST))
    manifest.setdefault("phases", {})[phase] = {"completed": True}
    write_json(lab.path(MANIFEST), manifest)


def phase_gen(lab: Lab) -> None:
    cfg = lab.cfg
    arr = cfg.array
    lab.out.mkdir(parents=True, exist_ok=True)
    write_json(lab.path(MANIFEST), {"config_hash": lab.hash, "seed": lab.seed, "phases": {}})

    try:
        channel = los_channel(
            arr.geometry, arr.carrier_ghz, arr.median_gain_db_at_1m, arr.pathloss_exponent,
            arr.antennas, lab.rng("channel"),
        )
    except RankDeficientError as e:
        raise ConfigError(f"array.geometry: {e}")
    write_json(lab.path(CHANNEL), channel.to_dict())
    lab.log(f"📦 Channel: U={channel.users}, B={channel.antennas}")

    ids = [s.id for s in lab.grid.states]
    if cfg.pa.coeff_file:
        try:
            pa = MpArrayModel.load(Path(cfg.pa.coeff_file), kind="pa")
            pa.check_states(ids)
        except (OSError, ValueError) as e:
            raise ConfigError(f"pa.coeff_file {cfg.pa.coeff_file}: {e}")
        if pa.antennas != arr.antennas:
            raise ConfigError(f"pa.coeff_file has {pa.antennas} branches, array.antennas = {arr.antennas}")
    else:
        pa = synth_pa_array(arr.antennas, cfg.pa, lab.rng("pa"), states=lab.grid.states)
    write_json(lab.path(PA), pa.to_dict())
    lab.log(f"📦 PA array: {pa.antennas} branches")

    def gen_state(sid: int):
        state = lab.grid.get(sid)
        data = lab.symbols(state, "symbols", cfg.nn.symbols_per_state)
        header = {"kind": "symbols", "N": cfg.waveform.n_fft, "U": arr.users, "Q": data.shape[0],
                  "state": state.model_dump()}
        write_record(state_file(lab.path(SYMBOLS), sid), header, data)
        return sid

    for sid in lab.fan_out(gen_state, cfg.fit_ids()):
        lab.log(f"📦 Symbols for state {sid}")


def phase_train_td(lab: Lab) -> None:
    cfg = lab.cfg
    channel, pa = lab.channel(), lab.pa()
    W = zf_precoder(channel.H).W

    def probe(state: SignalState):
        frames = lab.symbols(state, "probe", cfg.tddpd.probe_symbols)
        return state.id, np.stack([transmit(s, W, state)[0] for s in frames])

    probes = dict(lab.fan_out(probe, lab.grid.states))
    schedule = None
    if cfg.tddpd.follow_pa_schedule and cfg.pa.per_state_schedule:
        schedule = {s.id: cfg.pa.schedule_for(s.bandwidth_mhz, s.rms_power_dbm) for s in lab.grid.states}
    lab.log(f"🔄 Fitting TD-DPD for {len(probes)} states x {pa.antennas} branches")
    model = fit_td_dpd(pa, probes, cfg.tddpd, schedule=schedule, threads=cfg.run.threads, quiet=lab.quiet)
    write_json(lab.path(TDDPD), model.to_dict())
    lab.log(f"📦 TD-DPD coefficients written to {lab.path(TDDPD)}")


def phase_targets(lab: Lab) -> None:
    cfg = lab.cfg
    channel, tddpd = lab.channel(), lab.tddpd()
    W = zf_precoder(channel.H).W

    def targets_for(sid: int):
        state = lab.grid.get(sid)
        header, inputs = read_record(state_file(lab.path(SYMBOLS), sid))
        targets = np.empty_like(inputs)
        for q, s in enumerate(inputs):
            x, precoder = transmit(s, W, state)
            targets[q] = gen_targets(tddpd.apply(x, sid), precoder)
        out_header = dict(header, kind="training", c=make_state_vector(state, lab.grid).tolist())
        out_header.pop("shape", None)
        out_header.pop("dtype", None)
        write_record(state_file(lab.path(TRAINING_SET), sid), out_header, np.stack([inputs, targets]))
        return sid

    for sid in lab.fan_out(targets_for, cfg.fit_ids()):
        lab.log(f"📦 Targets for state {sid}")


def load_training_set(lab: Lab, state_ids: Sequence[int]) -> TrainingSet:
    states = []
    for sid in state_ids:
        header, data = read_record(state_file(lab.path(TRAINING_SET), sid))
        states.append(StateData(state=lab.grid.get(sid), c=np.array(header["c"]), inputs=data[0], targets=data[1]))
    return TrainingSet(states)


def input_scale(data: TrainingSet) -> float:
    """1 / TD RMS of the widest-band state's inputs"""
    widest = max(data.states, key=lambda sd: sd.state.bandwidth_mhz)
    td = np.stack([fd_to_td(x) for x in widest.inputs])
    rms = float(np.sqrt(np.mean(np.abs(td) ** 2)))
    return 1.0 / rms if rms > 0 else 1.0


def _train(lab: Lab, data: TrainingSet, with_hn: bool, checkpoint: str, label: str) -> None:
    cfg = lab.cfg
    tag = "hn" if with_hn else "fdnn"
    model = init_model(
        cfg.nn.main,
        cfg.nn.hn if with_hn else None,
        lab.rng("init", 1 if with_hn else 0),
        memory=cfg.nn.memory,
        users=cfg.array.users,
        input_scale=input_scale(data),
        tap_wrap=cfg.nn.tap_wrap,
    )
    result = train_hn_fdnn(data, model, cfg.training, lab.rng("train", 1 if with_hn else 0), quiet=lab.quiet, label=label)
    if not result.audit.balanced:
        raise DpdLabError(f"{label}: minibatches were not balanced across states")
    save_checkpoint(lab.path(checkpoint), result.model, result.opt)
    history = lab.path(checkpoint).with_name(f"{Path(checkpoint).stem}_history.csv")
    result.history_frame().to_csv(history, index=False)
    lab.log(f"📦 {label} checkpoint ({tag}) written to {lab.path(checkpoint)}")


def phase_train_hn(lab: Lab) -> None:
    _train(lab, load_training_set(lab, lab.cfg.states.training_ids), True, HN_CHECKPOINT, "HN FD-NN")


def phase_train_fdnn(lab: Lab) -> None:
    _train(lab, load_training_set(lab, [lab.cfg.states.baseline_id]), False, FDNN_CHECKPOINT, "FD-NN")


@dataclass
class _Chain:
    channel: ChannelModel
    W: np.ndarray
    pa: MpArrayModel
    tddpd: MpArrayModel
    hn: HnFdnnModel
    fdnn: HnFdnnModel


def _load_chain(lab: Lab) -> _Chain:
    channel = lab.channel()
    return _Chain(channel, zf_precoder(channel.H).W, lab.pa(), lab.tddpd(), lab.hn_model(), lab.fdnn_model())


def _drives(chain: _Chain, state: SignalState, symbols: np.ndarray, hn_layer, x: np.ndarray, precoder: Precoder):
    return {
        "no-dpd": x,
        "fd-nn": fd_dpd_drive(chain.fdnn, symbols, precoder),
        "hn-fd-nn": fd_dpd_drive(chain.hn, symbols, precoder, output_layer=hn_layer),
        "td-dpd": chain.tddpd.apply(x, state.id),
    }


def _eval_state(lab: Lab, chain: _Chain, state: SignalState) -> List[ReportRow]:
    cfg = lab.cfg
    noise = cfg.noise_config()
    realizations = cfg.eval.noise_realizations if noise.enabled else 1
    mask = lab.mask(state)
    gain = chain.pa.gain
    hn_layer = emit_output_layer(chain.hn, make_state_vector(state, lab.grid))

    outs = {m: [] for m in METHODS}
    received = {m: [] for m in METHODS}
    ideals, refs = [], []
    runtime = {m: 0.0 for m in METHODS}

    for q, s in enumerate(lab.symbols(state, "eval", cfg.eval.symbols)):
        x, precoder = transmit(s, chain.W, state)
        ideals.append(gain * x)
        for _ in range(realizations):
            refs.append(s[mask])
        for method, drive in _drives(chain, state, s, hn_layer, x, precoder).items():
            t0 = time.perf_counter()
            out = chain.pa.apply(drive, state.id)
            outs[method].append(out)
            X_out = td_to_fd(out)
            for r in range(realizations):
                # same noise draw for every method
                y = receive(X_out, chain.channel, noise, mask, lab.rng("noise", state.id, q, r))
                received[method].append(y[mask] / (precoder.alpha * gain))
            runtime[method] += time.perf_counter() - t0

    ideal = np.concatenate(ideals)
    reference = np.concatenate(refs)
    rows = []
    for method in METHODS:
        report = evm(np.concatenate(received[method]), reference, equalize=cfg.eval.equalize, gain=1.0,
                     state_id=state.id, label=method)
        rows.append(ReportRow(
            state_id=state.id,
            bw_mhz=state.bandwidth_mhz,
            p_dbm=state.rms_power_dbm,
            method=method,
            evm_pct=report.aggregate_pct,
            tx_nmse_db=tx_nmse(np.concatenate(outs[method]), ideal),
            seed=lab.seed,
            config_hash=lab.hash,
            runtime_s=runtime[method],
        ))
    return rows


def phase_eval(lab: Lab) -> RunReport:
    chain = _load_chain(lab)
    per_state = lab.fan_out(lambda st: _eval_state(lab, chain, st), lab.grid.states)
    rows = [row for rows in per_state for row in rows]
    report = RunReport(rows=rows, config_hash=lab.hash, seed=lab.seed, config=lab.cfg.model_dump(mode="json"))
    emit_report(report, lab.out, [s.id for s in lab.grid.states])
    for row in rows:
        lab.log(f"   state {row.state_id:2d} {row.method:9s} EVM {row.evm_pct:7.3f}%  TX-NMSE {row.tx_nmse_db:8.2f} dB")
    return report


def phase_psd(lab: Lab) -> pd.DataFrame:
    cfg = lab.cfg
    chain = _load_chain(lab)
    state = lab.grid.get(cfg.states.showcase_id)
    hn_layer = emit_output_layer(chain.hn, make_state_vector(state, lab.grid))

    outs = {m: [] for m in METHODS}
    ideals = []
    for s in lab.symbols(state, "psd", cfg.psd.symbols):
        x, precoder = transmit(s, chain.W, state)
        ideals.append(chain.pa.gain * x)
        for method, drive in _drives(chain, state, s, hn_layer, x, precoder).items():
            outs[method].append(chain.pa.apply(drive, state.id))

    fs_hz = cfg.waveform.fs_mhz * 1e6
    opts = dict(segment=cfg.psd.segment, overlap=cfg.psd.overlap, window=cfg.psd.window)
    ideal = np.concatenate(ideals)
    ideal_psd = branch_sum_psd(ideal, fs_hz, **opts)
    columns = {"freq_hz": ideal_psd.freqs_hz, "ideal_dbm_hz": ideal_psd.density_dbm_hz}
    for method in METHODS:
        out = np.concatenate(outs[method])
        columns[f"{method}_out_dbm_hz"] = branch_sum_psd(out, fs_hz, **opts).density_dbm_hz
        columns[f"{method}_err_dbm_hz"] = error_psd(out, ideal, fs_hz, **opts).density_dbm_hz
    frame = pd.DataFrame(columns)
    frame.to_csv(lab.path(PSD_CSV), index=False, float_format="%.6f")
    lab.log(f"📦 PSD of {state.label} written to {lab.path(PSD_CSV)}")
    return frame


def emit_report(report: RunReport, out_dir: Path, state_ids: Optional[Sequence[int]] = None) -> None:
    """report.csv (fixed column order) plus report.json with the config embedded"""
    ids = state_ids if state_ids is not None else sorted({r.state_id for r in report.rows})
    problems = report.matrix_problems(ids)
    if problems:
        raise ValueError(f"Report matrix is incomplete: {'; '.join(problems)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frame = report.frame().sort_values(["state_id", "method"], kind="stable")
    frame.to_csv(out_dir / REPORT_CSV, index=False, float_format="%.9g")
    write_json(out_dir / REPORT_JSON, {
        "config_hash": report.config_hash,
        "seed": report.seed,
        "config": report.config,
        "rows": [r.model_dump() for r in report.rows],
    })


def read_report(out_dir: Path) -> RunReport:
    out_dir = Path(out_dir)
    csv_path = out_dir / REPORT_CSV
    if not csv_path.exists():
        raise PrerequisiteError(f"Missing report {csv_path}; run the eval phase first")
    frame = pd.read_csv(csv_path, dtype={"config_hash": str})
    if list(frame.columns) != CSV_COLUMNS:
        raise ValueError(f"{csv_path} has columns {list(frame.columns)}, expected {CSV_COLUMNS}")
    rows = [ReportRow(**rec) for rec in frame.to_dict(orient="records")]
    config = {}
    json_path = out_dir / REPORT_JSON
    if json_path.exists():
        config = read_json(json_path).get("config", {})
    hash_ = rows[0].config_hash if rows else ""
    seed = rows[0].seed if rows else 0
    return RunReport(rows=rows, config_hash=hash_, seed=seed, config=config)


PHASE_RUNNERS = {
    "gen": phase_gen,
    "train-td": phase_train_td,
    "targets": phase_targets,
    "train-hn": phase_train_hn,
    "train-fdnn": phase_train_fdnn,
    "eval": phase_eval,
    "psd": phase_psd,
}


def run_pipeline(cfg: ExperimentConfig, phases: Optional[Sequence[str]] = None, quiet: bool = False) -> PipelineResult:
    requested = list(phases) if phases else list(PHASES)
    unknown = [p for p in requested if p not in PHASES]
    if unknown:
        raise ConfigError(f"Unknown phase(s) {unknown}; choose from {PHASES}")
    ordered = [p for p in PHASES if p in requested]

    lab = Lab(cfg, quiet=quiet)
    result = PipelineResult(out_dir=lab.out, phases=[])
    lab.log(f"🚀 Running {', '.join(ordered)} in {lab.out} (config {lab.hash}, seed {lab.seed})")
    for phase in ordered:
        check_prerequisites(lab, phase)
        lab.log(f"🔄 Phase {phase}")
        t0 = time.perf_counter()
        value = PHASE_RUNNERS[phase](lab)
        if phase == "eval":
            result.report = value
        elif phase == "psd":
            result.psd = value
        _mark_done(lab, phase)
        result.phases.append(phase)
        lab.log(f"✅ Phase {phase} done in {time.perf_counter() - t0:.1f} s")
    return result


def run_gradcheck(
    cfg: ExperimentConfig,
    seeds: int = 10,
    h: float = 1e-6,
    tolerance: float = 1e-5,
    max_params: Optional[int] = None,
    quiet: bool = False,
) -> List[float]:
    """Worst finite-difference error of the configured HN FD-NN topology, one value per seed"""
    errors = []
    for i in range(seeds):
        rng = rng_stream(cfg.run.seed, stream_id("gradcheck", i))
        model = init_model(cfg.nn.main, cfg.nn.hn, rng, memory=cfg.nn.memory, users=cfg.array.users)
        err = grad_check(model, random_grad_sample(model, rng), h=h, tolerance=tolerance,
                         max_params=max_params, rng=rng)
        errors.append(err)
        if not quiet:
            mark = "✅" if err < tolerance else "❌"
            print(f"{mark} seed {i}: max relative error {err:.3e}")
    return errors
