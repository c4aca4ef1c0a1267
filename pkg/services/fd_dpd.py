"""
FD-DPD Module
Frequency-domain predistortion of the user symbols with the HN FD-NN:
memory taps, inference, target generation from TD-DPD outputs and
mixed-state training with balanced minibatches.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from services.errors import DimensionError, TrainingDivergenceError
from services.hypernet import AdamState, HnFdnnModel, adam_step, backward, emit_output_layer, forward
from services.mimo import Precoder, precoder_pinv
from services.numerics import StreamDraws
from services.waveform import FdSymbolMatrix, SignalState, fd_to_td, td_to_fd

TapWrap = Literal["circular", "zero"]


def gather_taps(streams: np.ndarray, q: np.ndarray, n: np.ndarray, memory: int, wrap: TapWrap = "circular"):
    """
    Tap vectors for samples (q[i], n[i]) of a Q x N x U stack of TD streams:
    [Re s[n], Re s[n-1], ..., Re s[n-M], Im s[n], ..., Im s[n-M]], each
    delay contributing its U streams.
    """
    n_fft = streams.shape[1]
    delays = np.arange(memory + 1)
    idx = n[:, None] - delays[None, :]
    taps = streams[q[:, None], idx % n_fft]  # batch x (M+1) x U
    if wrap == "zero":
        taps = np.where((idx >= 0)[:, :, None], taps, 0.0)
    flat = taps.reshape(len(n), -1)
    return np.concatenate([flat.real, flat.imag], axis=1)


def build_taps(s: np.ndarray, memory: int, wrap: TapWrap = "circular") -> np.ndarray:
    """N x 2(M+1)U tap matrix of one TD frame; history wraps within the symbol"""
    s = np.asarray(s, dtype=np.complex128)
    if s.ndim == 1:
        s = s[:, None]
    if memory < 0:
        raise ValueError(f"memory must be >= 0, got {memory}")
    n_fft = s.shape[0]
    if memory >= n_fft:
        raise DimensionError(f"memory {memory} must be shorter than the frame length {n_fft}")
    n = np.arange(n_fft)
    return gather_taps(s[None], np.zeros(n_fft, dtype=int), n, memory, wrap)


def _split_output(z: np.ndarray, users: int) -> np.ndarray:
    return z[:, :users] + 1j * z[:, users:]


def _check_model(model: HnFdnnModel, users: int) -> None:
    sizes = model.main_spec.layer_sizes
    if sizes[0] != 2 * (model.memory + 1) * users:
        raise DimensionError(
            f"main input {sizes[0]} != 2(M+1)U = {2 * (model.memory + 1) * users} for M={model.memory}, U={users}"
        )
    if sizes[-1] != 2 * users:
        raise DimensionError(f"main output {sizes[-1]} != 2U = {2 * users}")


def fd_dpd_infer(model: HnFdnnModel, S, c: Optional[np.ndarray] = None, output_layer=None) -> np.ndarray:
    """
    FD symbols -> TD streams -> taps -> main network with W_G(c), b_G(c)
    emitted once -> TD outputs -> FD. Returns the N x U predistorted symbols.
    """
    entries = S.entries if isinstance(S, FdSymbolMatrix) else np.asarray(S)
    users = entries.shape[1]
    _check_model(model, users)
    s = fd_to_td(entries) * model.input_scale
    taps = build_taps(s, model.memory, model.tap_wrap)
    if output_layer is None and model.has_hypernetwork:
        if c is None:
            raise DimensionError("HN FD-NN inference needs the state vector c")
        output_layer = emit_output_layer(model, c)
    z, _ = forward(model, taps, None, output_layer=output_layer)
    return td_to_fd(_split_output(z, users) / model.input_scale)


def gen_targets(x_dpd: np.ndarray, precoder: Precoder, pinv: Optional[np.ndarray] = None) -> np.ndarray:
    """s_tar[k] = W_pinv x''[k] on every bin, for a TD-DPD output frame x''"""
    pinv = precoder_pinv(precoder) if pinv is None else pinv
    X = td_to_fd(x_dpd)
    if X.shape[1] != pinv.shape[1]:
        raise DimensionError(f"TD-DPD frame has {X.shape[1]} branches, precoder has {pinv.shape[1]}")
    return X @ pinv.T


def fd_frobenius_loss(targets: np.ndarray, outputs: np.ndarray) -> float:
    return float(np.sum(np.abs(np.asarray(targets) - np.asarray(outputs)) ** 2))


def td_squared_loss(targets_td: np.ndarray, outputs_td: np.ndarray) -> float:
    return float(np.sum(np.abs(np.asarray(targets_td) - np.asarray(outputs_td)) ** 2))


@dataclass
class StateData:
    """Q symbols of one training state: FD inputs and targets, Q x N x U"""

    state: SignalState
    c: np.ndarray
    inputs: np.ndarray
    targets: np.ndarray

    @property
    def symbols(self) -> int:
        return self.inputs.shape[0]


@dataclass
class TrainingSet:
    states: List[StateData]

    def __post_init__(self):
        if not self.states:
            raise ValueError("training set needs at least one state")
        shape = self.states[0].inputs.shape[1:]
        for sd in self.states:
            if sd.inputs.shape[1:] != shape or sd.targets.shape != sd.inputs.shape:
                raise DimensionError(f"{sd.state.label}: inputs {sd.inputs.shape} / targets {sd.targets.shape} disagree")

    @property
    def n_fft(self) -> int:
        return self.states[0].inputs.shape[1]

    @property
    def users(self) -> int:
        return self.states[0].inputs.shape[2]

    def only(self, state_id: int) -> "TrainingSet":
        picked = [sd for sd in self.states if sd.state.id == state_id]
        if not picked:
            raise ValueError(f"state {state_id} is not in the training set")
        return TrainingSet(picked)


def dataset_fd_loss(model: HnFdnnModel, data: TrainingSet) -> float:
    """sum over states and symbols of ||S_tar - f(S, c)||_F^2"""
    total = 0.0
    for sd in data.states:
        layer = emit_output_layer(model, sd.c)
        for q in range(sd.symbols):
            total += fd_frobenius_loss(sd.targets[q], fd_dpd_infer(model, sd.inputs[q], output_layer=layer))
    return total


LrSchedule = Literal["constant", "cosine"]


class TrainingHyper(BaseModel):
    lr: float = Field(default=1e-3, gt=0)
    lr_schedule: LrSchedule = "constant"
    lr_min: float = Field(default=0.0, ge=0)
    # step-size factor applied after each loss blow-up
    lr_backoff: float = Field(default=0.5, gt=0, lt=1)
    max_restarts: int = Field(default=5, ge=0)
    epochs: int = Field(default=150, ge=1)
    batch_per_state: int = Field(default=128, ge=1)
    steps_per_epoch: Optional[int] = Field(default=None, ge=1)
    patience: int = Field(default=15, ge=1)
    val_fraction: float = Field(default=0.1, ge=0, lt=1)
    divergence_factor: float = Field(default=10.0, gt=1)
    log_every: int = Field(default=10, ge=1)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class MinibatchAudit:
    """Per-state tap-sample counts of every minibatch drawn"""

    batches: int = 0
    counts: Dict[int, int] = field(default_factory=dict)
    unbalanced: int = 0

    def record(self, per_state: Dict[int, int]) -> None:
        self.batches += 1
        for sid, k in per_state.items():
            self.counts[sid] = self.counts.get(sid, 0) + k
        if len(set(per_state.values())) != 1 or 0 in per_state.values():
            self.unbalanced += 1

    @property
    def balanced(self) -> bool:
        return self.batches > 0 and self.unbalanced == 0 and len(set(self.counts.values())) == 1


@dataclass
class TrainResult:
    model: HnFdnnModel
    history: List[dict]
    best_epoch: int
    stopped_early: bool
    audit: MinibatchAudit
    opt: Optional[AdamState] = None
    initial_score: float = float("nan")
    best_score: float = float("nan")
    restarts: int = 0

    def history_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.history, columns=["epoch", "fd_loss", "val_fd_loss"])


@dataclass
class _StatePool:
    sid: int
    c: np.ndarray
    train_in: np.ndarray   # scaled TD streams, Q_train x N x U
    train_tar: np.ndarray
    val_in: np.ndarray
    val_tar: np.ndarray


def _pools(model: HnFdnnModel, data: TrainingSet, val_fraction: float) -> List[_StatePool]:
    pools = []
    for sd in data.states:
        s_in = np.stack([fd_to_td(x) for x in sd.inputs]) * model.input_scale
        s_tar = np.stack([fd_to_td(x) for x in sd.targets]) * model.input_scale
        n_val = int(np.ceil(sd.symbols * val_fraction)) if sd.symbols > 1 and val_fraction > 0 else 0
        n_val = min(n_val, sd.symbols - 1)
        cut = sd.symbols - n_val
        pools.append(_StatePool(sd.state.id, np.asarray(sd.c, dtype=float),
                                s_in[:cut], s_tar[:cut], s_in[cut:], s_tar[cut:]))
    return pools


def _split_fd_loss(model: HnFdnnModel, pools: List[_StatePool], split: str = "val") -> Optional[float]:
    """FD loss per symbol of one split (val or train) in physical units"""
    total, count = 0.0, 0
    n_fft = pools[0].train_in.shape[1]
    users = pools[0].train_in.shape[2]
    idx = np.arange(n_fft)
    for pool in pools:
        inputs, targets = (pool.val_in, pool.val_tar) if split == "val" else (pool.train_in, pool.train_tar)
        layer = emit_output_layer(model, pool.c)
        for q in range(inputs.shape[0]):
            taps = gather_taps(inputs, np.full(n_fft, q), idx, model.memory, model.tap_wrap)
            z, _ = forward(model, taps, None, output_layer=layer)
            total += n_fft * td_squared_loss(targets[q], _split_output(z, users))
            count += 1
    if count == 0:
        return None
    return total / count / model.input_scale**2


def minibatch_step_loss(model: HnFdnnModel, taps: np.ndarray, C: np.ndarray, targets: np.ndarray):
    """Sum of squared TD errors on one minibatch and its gradients"""
    z, cache = forward(model, taps, C)
    err = z - targets
    grads = backward(model, cache, 2.0 * err)
    return float(np.sum(err * err)), grads


def scheduled_lr(hyper: TrainingHyper, step: int, total_steps: int) -> float:
    """Step size for optimizer step `step` (0-based) out of total_steps"""
    if hyper.lr_schedule == "constant" or total_steps <= 1:
        return hyper.lr
    lr_min = min(hyper.lr_min, hyper.lr)
    frac = min(step, total_steps - 1) / (total_steps - 1)
    return lr_min + 0.5 * (hyper.lr - lr_min) * (1.0 + np.cos(np.pi * frac))


def train_hn_fdnn(
    data: TrainingSet,
    model: HnFdnnModel,
    hyper: TrainingHyper,
    rng: StreamDraws,
    quiet: bool = False,
    label: str = "HN FD-NN",
) -> TrainResult:
    """
    Adam on the TD form of the mixed-state FD loss. Every minibatch takes
    batch_per_state tap samples from each training state.

    The score is the validation FD loss, or the full training-split loss
    when no symbols are held out; the initial parameters are scored as
    epoch 0, so the returned model never scores worse than the one passed in.
    An epoch whose mean loss exceeds divergence_factor x the best epoch so far
    (or a non-finite minibatch loss) rolls back to the best parameters with
    a fresh Adam state and a step size scaled by lr_backoff. Training halts
    after `patience` epochs without a better score, or once max_restarts
    roll-backs are spent; a non-finite loss with no restarts left raises.
    """
    if data.users != model.users:
        raise DimensionError(f"training set has U={data.users}, model was built for U={model.users}")
    _check_model(model, data.users)
    n_fft = data.n_fft
    if model.memory >= n_fft:
        raise DimensionError(f"memory {model.memory} must be shorter than N={n_fft}")

    pools = _pools(model, data, hyper.val_fraction)
    min_symbols = min(p.train_in.shape[0] for p in pools)
    steps = hyper.steps_per_epoch or max(1, int(np.ceil(min_symbols * n_fft / hyper.batch_per_state)))
    total_steps = steps * hyper.epochs

    def new_optimizer() -> AdamState:
        return AdamState.for_model(model, lr=hyper.lr, beta1=hyper.beta1, beta2=hyper.beta2, eps=hyper.eps)

    def score_now() -> float:
        val_fd = _split_fd_loss(model, pools, "val")
        return val_fd if val_fd is not None else _split_fd_loss(model, pools, "train")

    opt = new_optimizer()
    audit = MinibatchAudit()
    # per-sample squared error in scaled units -> FD loss per symbol
    to_fd = n_fft * n_fft / model.input_scale**2
    k = hyper.batch_per_state
    has_val = any(p.val_in.shape[0] for p in pools)

    initial_score = score_now()
    if not np.isfinite(initial_score):
        raise TrainingDivergenceError(f"{label}: non-finite loss at the initial parameters")

    if not quiet:
        print(f"🚀 Training {label}: {len(pools)} state(s), {steps} steps/epoch, {k} samples/state/batch, "
              f"{hyper.lr_schedule} lr {hyper.lr:g}")

    best_params = {name: p.copy() for name, p in model.params.items()}
    best_score, best_epoch, since_best = initial_score, 0, 0
    best_train = np.inf
    lr_scale, restarts = 1.0, 0
    history: List[dict] = []
    stopped_early = False
    global_step = 0

    def roll_back(epoch: int, why: str) -> bool:
        """Restore the best parameters; False once the restart budget is spent"""
        nonlocal opt, lr_scale, restarts
        model.params = {name: p.copy() for name, p in best_params.items()}
        model.version += 1
        if restarts >= hyper.max_restarts:
            return False
        restarts += 1
        lr_scale *= hyper.lr_backoff
        opt = new_optimizer()
        if not quiet:
            print(f"⚠️ {label}: {why} at epoch {epoch}; restored epoch {best_epoch}, lr x{lr_scale:g}")
        return True

    for epoch in range(1, hyper.epochs + 1):
        epoch_loss, blew_up = 0.0, False
        for _ in range(steps):
            taps, cs, tars, counts = [], [], [], {}
            for pool in pools:
                q = rng.integers(0, pool.train_in.shape[0], k)
                n = rng.integers(0, n_fft, k)
                taps.append(gather_taps(pool.train_in, q, n, model.memory, model.tap_wrap))
                t = pool.train_tar[q, n]
                tars.append(np.concatenate([t.real, t.imag], axis=1))
                cs.append(np.broadcast_to(pool.c, (k, 2)))
                counts[pool.sid] = k
            audit.record(counts)

            loss, grads = minibatch_step_loss(model, np.vstack(taps), np.vstack(cs), np.vstack(tars))
            per_sample = loss / (k * len(pools))
            if not np.isfinite(per_sample):
                blew_up = True
                break
            opt.lr = lr_scale * scheduled_lr(hyper, global_step, total_steps)
            adam_step(opt, model, grads)
            global_step += 1
            epoch_loss += per_sample

        if blew_up:
            if not roll_back(epoch, "non-finite minibatch loss"):
                raise TrainingDivergenceError(f"{label}: non-finite loss at epoch {epoch}, {restarts} restart(s) spent")
            continue

        train_fd = epoch_loss / steps * to_fd
        val_fd = _split_fd_loss(model, pools, "val") if has_val else None
        history.append({"epoch": epoch, "fd_loss": train_fd, "val_fd_loss": np.nan if val_fd is None else val_fd})
        if not quiet and (epoch == 1 or epoch % hyper.log_every == 0):
            val_txt = f", val {val_fd:.4e}" if val_fd is not None else ""
            print(f"   epoch {epoch:4d}: FD loss {train_fd:.4e}{val_txt}")

        if train_fd > hyper.divergence_factor * best_train:
            if roll_back(epoch, f"FD loss {train_fd:.4e} above {hyper.divergence_factor:g}x its best {best_train:.4e}"):
                continue
            stopped_early = True
            if not quiet:
                print(f"⚠️ {label}: loss blew up with no restarts left, stopping at epoch {epoch}")
            break
        best_train = min(best_train, train_fd)

        score = val_fd if val_fd is not None else _split_fd_loss(model, pools, "train")
        if score < best_score:
            best_score, best_epoch, since_best = score, epoch, 0
            best_params = {name: p.copy() for name, p in model.params.items()}
        else:
            since_best += 1
            if since_best >= hyper.patience:
                stopped_early = True
                if not quiet:
                    print(f"⚠️ {label}: no improvement for {hyper.patience} epochs, stopping at epoch {epoch}")
                break

    model.params = best_params
    model.version += 1
    if not quiet:
        print(f"✅ {label} trained: best epoch {best_epoch}, loss {best_score:.4e} (initial {initial_score:.4e})")
    return TrainResult(
        model=model, history=history, best_epoch=best_epoch, stopped_early=stopped_early, audit=audit, opt=opt,
        initial_score=initial_score, best_score=best_score, restarts=restarts,
    )
