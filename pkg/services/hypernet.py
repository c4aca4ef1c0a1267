"""
Hypernetwork Module
Dense main network whose output layer W_G(c), b_G(c) is emitted by a
hypernetwork fed with the signal-state vector c.
Forward, exact backward, Adam, finite-difference checks and checkpoints.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, field_validator

from services.errors import CheckpointError, DimensionError
from services.numerics import StreamDraws

RESHAPE_CONVENTION = "row-major-wb"
CHECKPOINT_FORMAT = "dpdlab-checkpoint/1"

Activation = Literal["tanh", "relu", "linear"]


class MlpSpec(BaseModel):
    layer_sizes: List[int]
    hidden_activation: Activation = "tanh"

    @field_validator("layer_sizes")
    @classmethod
    def check_sizes(cls, sizes):
        if len(sizes) < 3:
            raise ValueError(f"need at least 3 layers (G >= 3), got {sizes}")
        if any(d < 1 for d in sizes):
            raise ValueError(f"every layer needs at least one neuron, got {sizes}")
        return sizes

    @property
    def depth(self) -> int:
        return len(self.layer_sizes)

    def describe(self) -> str:
        return "-".join(str(d) for d in self.layer_sizes)


def hn_output_dim(main: MlpSpec) -> int:
    d_out, d_prev = main.layer_sizes[-1], main.layer_sizes[-2]
    return d_out * d_prev + d_out


@dataclass
class HnFdnnModel:
    """
    Trainable parameters live in `params`:
    main.W2..main.W{G-1} (+ main.W{G} when there is no hypernetwork)
    and hn.W2..hn.W{G_hn} with matching biases.
    """

    main_spec: MlpSpec
    hn_spec: Optional[MlpSpec]
    params: Dict[str, np.ndarray]
    memory: int = 7
    users: int = 1
    input_scale: float = 1.0
    tap_wrap: str = "circular"
    version: int = 0

    def __post_init__(self):
        check_specs(self.main_spec, self.hn_spec)

    @property
    def has_hypernetwork(self) -> bool:
        return self.hn_spec is not None

    @property
    def output_dims(self) -> Tuple[int, int]:
        return self.main_spec.layer_sizes[-1], self.main_spec.layer_sizes[-2]

    def parameter_shapes(self) -> Dict[str, tuple]:
        return expected_shapes(self.main_spec, self.hn_spec)

    def copy(self) -> "HnFdnnModel":
        return HnFdnnModel(
            main_spec=self.main_spec,
            hn_spec=self.hn_spec,
            params={k: v.copy() for k, v in self.params.items()},
            memory=self.memory,
            users=self.users,
            input_scale=self.input_scale,
            tap_wrap=self.tap_wrap,
            version=self.version,
        )


def check_specs(main: MlpSpec, hn: Optional[MlpSpec]) -> None:
    if hn is None:
        return
    if hn.layer_sizes[0] != 2:
        raise DimensionError(f"hypernetwork input must be the 2-element state vector, got {hn.layer_sizes[0]}")
    need = hn_output_dim(main)
    if hn.layer_sizes[-1] != need:
        d_out, d_prev = main.layer_sizes[-1], main.layer_sizes[-2]
        raise DimensionError(
            f"hypernetwork output must be {d_out}*{d_prev}+{d_out} = {need} for main {main.describe()}, "
            f"got {hn.layer_sizes[-1]}"
        )


def expected_shapes(main: MlpSpec, hn: Optional[MlpSpec]) -> Dict[str, tuple]:
    shapes = {}
    sizes = main.layer_sizes
    last = len(sizes) if hn is None else len(sizes) - 1
    for g in range(2, last + 1):
        shapes[f"main.W{g}"] = (sizes[g - 1], sizes[g - 2])
        shapes[f"main.b{g}"] = (sizes[g - 1],)
    if hn is not None:
        hs = hn.layer_sizes
        for g in range(2, len(hs) + 1):
            shapes[f"hn.W{g}"] = (hs[g - 1], hs[g - 2])
            shapes[f"hn.b{g}"] = (hs[g - 1],)
    return shapes


def _act(name: str, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(a)
    if name == "relu":
        return np.maximum(a, 0.0)
    return a


def _act_grad(name: str, z: np.ndarray) -> np.ndarray:
    # derivative written in terms of the activation output
    if name == "tanh":
        return 1.0 - z * z
    if name == "relu":
        return (z > 0).astype(z.dtype)
    return np.ones_like(z)


def _dense_forward(params, prefix: str, n_layers: int, activation: str, x: np.ndarray, last_linear: bool):
    acts = [x]
    for g in range(2, n_layers + 1):
        a = acts[-1] @ params[f"{prefix}.W{g}"].T + params[f"{prefix}.b{g}"]
        acts.append(a if (last_linear and g == n_layers) else _act(activation, a))
    return acts


def _dense_backward(params, prefix: str, n_layers: int, activation: str, acts, d_out, last_linear: bool, grads):
    d = d_out
    for g in range(n_layers, 1, -1):
        if not (last_linear and g == n_layers):
            d = d * _act_grad(activation, acts[g - 1])
        grads[f"{prefix}.W{g}"] = d.T @ acts[g - 2]
        grads[f"{prefix}.b{g}"] = d.sum(axis=0)
        d = d @ params[f"{prefix}.W{g}"]
    return d


@dataclass
class ForwardCache:
    version: int
    hidden: List[np.ndarray]
    hn_acts: Optional[List[np.ndarray]] = None
    inverse: Optional[np.ndarray] = None
    w_out: Optional[np.ndarray] = None
    single: bool = False


def emit_output_layer(model: HnFdnnModel, c: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """W_G(c), b_G(c) for one state; reuse while the state is unchanged"""
    if not model.has_hypernetwork:
        sizes = model.main_spec.layer_sizes
        return model.params[f"main.W{len(sizes)}"], model.params[f"main.b{len(sizes)}"]
    c = np.asarray(c, dtype=float).reshape(1, -1)
    acts = _dense_forward(model.params, "hn", model.hn_spec.depth, model.hn_spec.hidden_activation, c, True)
    weights, biases = _split_hn_output(model, acts[-1])
    return weights[0], biases[0]


def _split_hn_output(model: HnFdnnModel, out: np.ndarray):
    d_out, d_prev = model.output_dims
    weights = out[:, : d_out * d_prev].reshape(-1, d_out, d_prev)
    biases = out[:, d_out * d_prev:]
    return weights, biases


def forward(
    model: HnFdnnModel,
    z1: np.ndarray,
    c: Optional[np.ndarray] = None,
    output_layer: Optional[Tuple[np.ndarray, np.ndarray]] = None,
):
    """
    z1 is one tap vector (D1,) or a batch (n, D1); c is (2,) or (n, 2).
    Returns z_G and the cache needed by backward.
    """
    z1 = np.asarray(z1, dtype=float)
    single = z1.ndim == 1
    Z1 = z1[None, :] if single else z1
    sizes = model.main_spec.layer_sizes
    if Z1.shape[1] != sizes[0]:
        raise DimensionError(f"main network expects {sizes[0]} inputs, got {Z1.shape[1]}")
    n = Z1.shape[0]

    hidden = _dense_forward(model.params, "main", len(sizes) - 1, model.main_spec.hidden_activation, Z1, False)
    z_prev = hidden[-1]
    cache = ForwardCache(version=model.version, hidden=hidden, single=single)

    if not model.has_hypernetwork:
        w_g, b_g = emit_output_layer(model, None)
        z_out = z_prev @ w_g.T + b_g
    else:
        if output_layer is not None:
            w_g, b_g = output_layer
            w_s = np.broadcast_to(w_g, (n,) + w_g.shape)
            b_s = np.broadcast_to(b_g, (n,) + b_g.shape)
        else:
            if c is None:
                raise DimensionError("the hypernetwork needs a state vector c")
            C = np.asarray(c, dtype=float)
            C = np.broadcast_to(C, (n, C.shape[-1])) if C.ndim == 1 else C
            if C.shape != (n, 2):
                raise DimensionError(f"state vectors must be (n, 2), got {C.shape}")
            # the hypernetwork only runs once per distinct state
            uniq, inverse = np.unique(C, axis=0, return_inverse=True)
            inverse = inverse.reshape(-1)
            hn_acts = _dense_forward(
                model.params, "hn", model.hn_spec.depth, model.hn_spec.hidden_activation, uniq, True
            )
            w_u, b_u = _split_hn_output(model, hn_acts[-1])
            w_s, b_s = w_u[inverse], b_u[inverse]
            cache.hn_acts = hn_acts
            cache.inverse = inverse
        cache.w_out = w_s
        z_out = (w_s * z_prev[:, None, :]).sum(axis=-1) + b_s

    return (z_out[0] if single else z_out), cache


def backward(model: HnFdnnModel, cache: ForwardCache, d_out: np.ndarray) -> Dict[str, np.ndarray]:
    """Exact gradients of a loss with dL/dz_G = d_out for every trainable parameter"""
    if cache.version != model.version:
        raise DimensionError("stale forward cache: parameters changed since the forward pass")
    d_out = np.asarray(d_out, dtype=float)
    dZ = d_out[None, :] if d_out.ndim == 1 else d_out
    sizes = model.main_spec.layer_sizes
    z_prev = cache.hidden[-1]
    if dZ.shape != (z_prev.shape[0], sizes[-1]):
        raise DimensionError(f"upstream gradient shape {dZ.shape} does not match the forward batch")

    grads: Dict[str, np.ndarray] = {}
    if not model.has_hypernetwork:
        G = len(sizes)
        grads[f"main.W{G}"] = dZ.T @ z_prev
        grads[f"main.b{G}"] = dZ.sum(axis=0)
        d_prev = dZ @ model.params[f"main.W{G}"]
    else:
        if cache.hn_acts is None:
            raise DimensionError("backward needs a forward pass that ran the hypernetwork")
        n = dZ.shape[0]
        d_w = dZ[:, :, None] * z_prev[:, None, :]
        d_hn_out = np.concatenate([d_w.reshape(n, -1), dZ], axis=1)
        d_uniq = np.zeros((cache.hn_acts[0].shape[0], d_hn_out.shape[1]))
        np.add.at(d_uniq, cache.inverse, d_hn_out)
        _dense_backward(
            model.params, "hn", model.hn_spec.depth, model.hn_spec.hidden_activation,
            cache.hn_acts, d_uniq, True, grads,
        )
        d_prev = (cache.w_out * dZ[:, :, None]).sum(axis=1)

    _dense_backward(
        model.params, "main", len(sizes) - 1, model.main_spec.hidden_activation,
        cache.hidden, d_prev, False, grads,
    )
    return grads


def init_model(
    main_spec: MlpSpec,
    hn_spec: Optional[MlpSpec],
    rng: StreamDraws,
    memory: int = 7,
    users: int = 1,
    input_scale: float = 1.0,
    tap_wrap: str = "circular",
    hn_output_init: float = 1e-2,
) -> HnFdnnModel:
    """
    Xavier-uniform main layers; He-uniform hypernetwork hidden layers;
    small hypernetwork output weights with zero bias so W_G(c) starts near zero.
    """
    check_specs(main_spec, hn_spec)
    params = {}
    shapes = expected_shapes(main_spec, hn_spec)
    hn_last = f"hn.W{hn_spec.depth}" if hn_spec else None
    for name, shape in shapes.items():
        if ".b" in name:
            params[name] = np.zeros(shape)
            continue
        fan_out, fan_in = shape
        if name.startswith("hn.") and name != hn_last and hn_spec.hidden_activation == "relu":
            limit = np.sqrt(6.0 / fan_in)
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, shape)
        if name == hn_last:
            w = w * hn_output_init
        params[name] = w
    return HnFdnnModel(
        main_spec=main_spec,
        hn_spec=hn_spec,
        params=params,
        memory=memory,
        users=users,
        input_scale=input_scale,
        tap_wrap=tap_wrap,
    )


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_model(cls, model: HnFdnnModel, lr: float = 1e-3, **kwargs) -> "AdamState":
        state = cls(lr=lr, **kwargs)
        state.m = {k: np.zeros_like(p) for k, p in model.params.items()}
        state.v = {k: np.zeros_like(p) for k, p in model.params.items()}
        return state


def adam_step(opt: AdamState, model: HnFdnnModel, grads: Dict[str, np.ndarray]):
    """Bias-corrected Adam update of every parameter, in place"""
    opt.step += 1
    t = opt.step
    for name, p in model.params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        opt.m[name] = opt.beta1 * opt.m[name] + (1 - opt.beta1) * g
        opt.v[name] = opt.beta2 * opt.v[name] + (1 - opt.beta2) * g * g
        m_hat = opt.m[name] / (1 - opt.beta1**t)
        v_hat = opt.v[name] / (1 - opt.beta2**t)
        p -= opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    model.version += 1
    return model, opt


@dataclass
class GradSample:
    """Inputs plus an upstream direction u; the checked loss is sum(u * z_G)"""

    z1: np.ndarray
    c: np.ndarray
    upstream: np.ndarray


def random_grad_sample(model: HnFdnnModel, rng: StreamDraws, batch: int = 4) -> GradSample:
    sizes = model.main_spec.layer_sizes
    return GradSample(
        z1=rng.normal((batch, sizes[0])),
        c=rng.uniform(0.1, 1.0, (batch, 2)),
        upstream=rng.normal((batch, sizes[-1])),
    )


def grad_check(
    model: HnFdnnModel,
    sample: GradSample,
    h: float = 1e-6,
    tolerance: float = 1e-5,
    max_params: Optional[int] = None,
    rng: Optional[StreamDraws] = None,
    grads: Optional[Dict[str, np.ndarray]] = None,
    floor: float = 1e-4,
) -> float:
    """
    Worst relative error between analytic gradients and central differences.
    Checks every parameter entry, or a random subset of max_params entries.
    """
    if not 1e-8 <= h <= 1e-4:
        raise ValueError(f"finite-difference step must be in [1e-8, 1e-4], got {h}")

    def loss() -> float:
        out, _ = forward(model, sample.z1, sample.c)
        return float(np.sum(sample.upstream * out))

    if grads is None:
        _, cache = forward(model, sample.z1, sample.c)
        grads = backward(model, cache, sample.upstream)

    entries = [(name, idx) for name, p in model.params.items() for idx in np.ndindex(p.shape)]
    if max_params is not None and len(entries) > max_params:
        if rng is None:
            raise ValueError("sampling a parameter subset needs an rng")
        pick = rng.permutation(len(entries))[:max_params]
        entries = [entries[i] for i in sorted(pick)]

    worst = 0.0
    for name, idx in entries:
        p = model.params[name]
        saved = p[idx]
        p[idx] = saved + h
        up = loss()
        p[idx] = saved - h
        down = loss()
        p[idx] = saved
        numeric = (up - down) / (2 * h)
        analytic = float(grads[name][idx])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, err)
    if worst > tolerance:
        print(f"⚠️ gradient check: worst relative error {worst:.3e} exceeds {tolerance:.1e}")
    return worst


def _spec_dict(spec: Optional[MlpSpec]):
    return None if spec is None else spec.model_dump()


def save_checkpoint(path: Path, model: HnFdnnModel, opt: Optional[AdamState] = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "spec": _spec_dict(model.main_spec),
        "hn_spec": _spec_dict(model.hn_spec),
        "reshape_convention": RESHAPE_CONVENTION,
        "memory": model.memory,
        "users": model.users,
        "input_scale": model.input_scale,
        "tap_wrap": model.tap_wrap,
        "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in model.params.items()},
        "adam": None,
    }
    if opt is not None:
        doc["adam"] = {
            "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "step": opt.step,
            "m": {k: v.ravel().tolist() for k, v in opt.m.items()},
            "v": {k: v.ravel().tolist() for k, v in opt.v.items()},
        }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(
    path: Path,
    expected_main: Optional[MlpSpec] = None,
    expected_hn: Optional[MlpSpec] = None,
) -> Tuple[HnFdnnModel, Optional[AdamState]]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}")

    try:
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
        if doc.get("reshape_convention") != RESHAPE_CONVENTION:
            raise CheckpointError(f"Unsupported reshape convention {doc.get('reshape_convention')}")
        main = MlpSpec(**doc["spec"])
        hn = MlpSpec(**doc["hn_spec"]) if doc["hn_spec"] else None

        if expected_main is not None and main.layer_sizes != expected_main.layer_sizes:
            raise CheckpointError(
                f"Checkpoint main network {main.describe()} does not match configured {expected_main.describe()}"
            )
        if expected_hn is not None and (hn is None or hn.layer_sizes != expected_hn.layer_sizes):
            got = hn.describe() if hn else "none"
            raise CheckpointError(f"Checkpoint hypernetwork {got} does not match configured {expected_hn.describe()}")

        shapes = expected_shapes(main, hn)
        if set(shapes) != set(doc["params"]):
            raise CheckpointError(f"Checkpoint parameters {sorted(doc['params'])} do not match the spec")
        params = {}
        for name, shape in shapes.items():
            entry = doc["params"][name]
            arr = np.array(entry["data"], dtype=float)
            if tuple(entry["shape"]) != shape or arr.size != int(np.prod(shape)):
                raise CheckpointError(f"Parameter {name} has shape {entry['shape']}, spec needs {list(shape)}")
            params[name] = arr.reshape(shape)

        model = HnFdnnModel(
            main_spec=main,
            hn_spec=hn,
            params=params,
            memory=int(doc["memory"]),
            users=int(doc["users"]),
            input_scale=float(doc["input_scale"]),
            tap_wrap=doc.get("tap_wrap", "circular"),
        )

        opt = None
        if doc.get("adam"):
            a = doc["adam"]
            opt = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"])
            opt.m = {k: np.array(a["m"][k], dtype=float).reshape(shapes[k]) for k in shapes}
            opt.v = {k: np.array(a["v"][k], dtype=float).reshape(shapes[k]) for k in shapes}
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"Malformed checkpoint {path}: {e}")
    return model, opt
