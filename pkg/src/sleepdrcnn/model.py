"""Dense recurrent convolutional network: DCU1 x 3 with pooling, DCU2 x 11, LSTM block.

A dense convolutional unit (DCU) holds two sub-layers. Each sub-layer sees
the concatenation of the unit input and every earlier sub-layer output,
applies two depthwise-separable convolutions, its normalizations and the
activation. A 1x1 transition maps the concatenated features to the unit
width. DCU2 adds weight normalization, position-wise normalization and a
dilation from the schedule; DCU1 uses neither of the last two.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .errors import FormatError, ValidationError

CHECKPOINT_FORMAT = "sleepdrcnn-checkpoint"
CHECKPOINT_VERSION = 1
N_OUTPUTS = 4
SUBLAYERS = 2
CONVS_PER_SUBLAYER = 2

DEFAULT_DILATIONS = (1, 2, 4, 8, 16, 32, 16, 8, 4, 2, 1)

ABLATIONS = {
    1: "Original model",
    2: "Replace SELU activations with ReLU",
    3: "Turn on position-wise normalization in DCU1",
    4: "Turn off position-wise normalization in DCU2",
    5: "Remove the bidirectional LSTM layer",
    6: "Remove moving-window signal normalization",
    7: "Remove residual mapping from the LSTM block",
    8: "Remove weight normalization",
    9: "Single-task (arousal only) learning",
    10: "Fix dilation of the last five DCU2 units to one",
}


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int = 12
    dcu1_count: int = 3
    dcu2_count: int = 11
    pool_widths: tuple[int, ...] = (2, 5, 5)
    dcu1_widths: tuple[int, ...] = (32, 64, 64)
    dcu1_growth: int = 16
    dcu2_width: int = 64
    dcu2_growth: int = 16
    kernel_size: int = 3
    dilation_schedule: tuple[int, ...] = DEFAULT_DILATIONS
    lstm_hidden: int = 64
    head_hidden: int = 64
    activation: str = "selu"
    positionwise_in_dcu1: bool = False
    positionwise_in_dcu2: bool = True
    use_lstm: bool = True
    use_residual_in_lstm_block: bool = True
    use_weight_norm: bool = True
    multi_task: bool = True
    moving_normalization: bool = True  # consumed by preprocessing, not by the network

    def __post_init__(self) -> None:
        object.__setattr__(self, "pool_widths", tuple(self.pool_widths))
        object.__setattr__(self, "dcu1_widths", tuple(self.dcu1_widths))
        object.__setattr__(self, "dilation_schedule", tuple(self.dilation_schedule))
        if len(self.pool_widths) != self.dcu1_count or len(self.dcu1_widths) != self.dcu1_count:
            raise ValidationError("one pool width and one output width per DCU1")
        if len(self.dilation_schedule) != self.dcu2_count:
            raise ValidationError("one dilation per DCU2")
        if self.kernel_size % 2 == 0:
            raise ValidationError("kernel_size must be odd")
        if self.activation not in ("selu", "relu"):
            raise ValidationError(f"unknown activation {self.activation!r}")
        if not (self.use_lstm or self.use_residual_in_lstm_block):
            raise ValidationError("LSTM block needs the LSTM or the residual path")

    @property
    def total_pooling(self) -> int:
        return int(np.prod(self.pool_widths))

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Reduced widths (<= 16) for CPU-scale training."""
        base = dict(dcu1_widths=(8, 16, 16), dcu1_growth=8, dcu2_width=16, dcu2_growth=8,
                    lstm_hidden=16, head_hidden=16)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def apply_ablation(config: ModelConfig, experiment: int) -> ModelConfig:
    """Return ``config`` with the single change of the given ablation experiment."""
    if experiment not in ABLATIONS:
        raise ValidationError(f"ablation experiment must be 1..10, got {experiment}")
    rep = dataclasses.replace
    if experiment == 1:
        return config
    if experiment == 2:
        return rep(config, activation="relu")
    if experiment == 3:
        return rep(config, positionwise_in_dcu1=True)
    if experiment == 4:
        return rep(config, positionwise_in_dcu2=False)
    if experiment == 5:
        return rep(config, use_lstm=False)
    if experiment == 6:
        return rep(config, moving_normalization=False)
    if experiment == 7:
        return rep(config, use_residual_in_lstm_block=False)
    if experiment == 8:
        return rep(config, use_weight_norm=False)
    if experiment == 9:
        return rep(config, multi_task=False)
    sched = list(config.dilation_schedule)
    sched[-5:] = [1] * min(5, len(sched))
    return rep(config, dilation_schedule=tuple(sched))


def dcu_receptive_field(kernel_size: int, dilation: int,
                        n_convs: int = SUBLAYERS * CONVS_PER_SUBLAYER) -> int:
    return 1 + n_convs * (kernel_size - 1) * dilation


# --------------------------------------------------------------------------
# parameter layout
# --------------------------------------------------------------------------

@dataclass
class _ParamSpec:
    name: str
    shape: tuple[int, ...]
    init: str  # "fanin", "unit_norm_fanin", "ones", "zeros", "lstm_w", "lstm_b"


def _conv_specs(prefix: str, cout: int, cpg: int, k: int, bias: bool, wn: bool) -> list[_ParamSpec]:
    specs = []
    if wn:
        specs.append(_ParamSpec(prefix + ".v", (cout, cpg, k), "fanin"))
        specs.append(_ParamSpec(prefix + ".g", (cout,), "ones"))
    else:
        specs.append(_ParamSpec(prefix + ".w", (cout, cpg, k), "fanin"))
    if bias:
        specs.append(_ParamSpec(prefix + ".b", (cout,), "zeros"))
    return specs


def _unit_plan(cfg: ModelConfig) -> list[dict]:
    """Static description of every DCU: prefix, widths, dilation, flags."""
    units = []
    cin = cfg.input_channels
    for i in range(cfg.dcu1_count):
        units.append(dict(prefix=f"dcu1.{i}", cin=cin, cout=cfg.dcu1_widths[i], growth=cfg.dcu1_growth,
                          dilation=1, positionwise=cfg.positionwise_in_dcu1, wn=False,
                          pool=cfg.pool_widths[i]))
        cin = cfg.dcu1_widths[i]
    for i in range(cfg.dcu2_count):
        units.append(dict(prefix=f"dcu2.{i}", cin=cin, cout=cfg.dcu2_width, growth=cfg.dcu2_growth,
                          dilation=cfg.dilation_schedule[i], positionwise=cfg.positionwise_in_dcu2,
                          wn=cfg.use_weight_norm, pool=None))
        cin = cfg.dcu2_width
    return units


def param_specs(cfg: ModelConfig) -> tuple[list[_ParamSpec], dict[str, int]]:
    specs: list[_ParamSpec] = []
    bn: dict[str, int] = {}
    k = cfg.kernel_size
    for u in _unit_plan(cfg):
        width = u["cin"]
        for s in range(SUBLAYERS):
            c = width
            for j in range(CONVS_PER_SUBLAYER):
                p = f"{u['prefix']}.sub{s}.ds{j}"
                specs += _conv_specs(p + ".dw", c, 1, k, bias=False, wn=u["wn"])
                specs += _conv_specs(p + ".pw", u["growth"], c, 1, bias=True, wn=u["wn"])
                c = u["growth"]
            specs.append(_ParamSpec(f"{u['prefix']}.sub{s}.bn.gamma", (u["growth"],), "ones"))
            specs.append(_ParamSpec(f"{u['prefix']}.sub{s}.bn.beta", (u["growth"],), "zeros"))
            bn[f"{u['prefix']}.sub{s}.bn"] = u["growth"]
            width += u["growth"]
        specs += _conv_specs(f"{u['prefix']}.transition", u["cout"], width, 1, bias=True, wn=u["wn"])

    cin = cfg.dcu2_width if cfg.dcu2_count else cfg.dcu1_widths[-1]
    h2 = 2 * cfg.lstm_hidden
    if cfg.use_lstm:
        for d in ("fwd", "bwd"):
            specs.append(_ParamSpec(f"lstm.{d}.wih", (4 * cfg.lstm_hidden, cin), "lstm_w"))
            specs.append(_ParamSpec(f"lstm.{d}.whh", (4 * cfg.lstm_hidden, cfg.lstm_hidden), "lstm_w"))
            specs.append(_ParamSpec(f"lstm.{d}.b", (4 * cfg.lstm_hidden,), "lstm_b"))
    if cfg.use_residual_in_lstm_block:
        specs += _conv_specs("head.residual", h2, cin, 1, bias=True, wn=cfg.use_weight_norm)
    specs += _conv_specs("head.a", cfg.head_hidden, h2, 1, bias=True, wn=cfg.use_weight_norm)
    specs += _conv_specs("head.b", N_OUTPUTS, cfg.head_hidden, 1, bias=True, wn=cfg.use_weight_norm)
    return specs, bn


def parameter_count(cfg: ModelConfig) -> int:
    specs, _ = param_specs(cfg)
    return int(sum(np.prod(s.shape) for s in specs))


def _init_array(spec: _ParamSpec, rng: np.random.Generator, hidden: int) -> np.ndarray:
    if spec.init == "fanin":
        fan_in = int(np.prod(spec.shape[1:]))
        return rng.standard_normal(spec.shape) / np.sqrt(fan_in)
    if spec.init == "ones":
        return np.ones(spec.shape)
    if spec.init == "zeros":
        return np.zeros(spec.shape)
    if spec.init == "lstm_w":
        bound = 1 / np.sqrt(hidden)
        return rng.uniform(-bound, bound, spec.shape)
    if spec.init == "lstm_b":
        b = np.zeros(spec.shape)
        b[hidden:2 * hidden] = 1.0  # forget gate
        return b
    raise AssertionError(spec.init)


# --------------------------------------------------------------------------
# network
# --------------------------------------------------------------------------

class DRCNN:
    """Network parameters, normalization state and the forward pass."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32,
                 params: dict[str, np.ndarray] | None = None,
                 bn_state: dict[str, BatchNormState] | None = None):
        self.config = config
        self.dtype = np.dtype(dtype)
        specs, bn = param_specs(config)
        self._units = _unit_plan(config)
        if params is None:
            rng = np.random.default_rng(seed)
            params = {s.name: _init_array(s, rng, config.lstm_hidden) for s in specs}
        missing = {s.name for s in specs} - set(params)
        if missing:
            raise ValidationError(f"missing parameters: {sorted(missing)[:5]}")
        for s in specs:
            if tuple(params[s.name].shape) != s.shape:
                raise ValidationError(f"parameter {s.name} has shape {params[s.name].shape}, "
                                      f"expected {s.shape}")
        self.params: dict[str, Tensor] = {
            s.name: Tensor(np.array(params[s.name], dtype=self.dtype), requires_grad=True)
            for s in specs
        }
        self.bn_state = bn_state or {name: BatchNormState.fresh(c) for name, c in bn.items()}

    # -- helpers -----------------------------------------------------------

    def _weight(self, prefix: str, wn: bool) -> Tensor:
        if wn:
            return ad.weight_norm(self.params[prefix + ".v"], self.params[prefix + ".g"])
        return self.params[prefix + ".w"]

    def _conv(self, prefix: str, x: Tensor, wn: bool, dilation: int = 1, groups: int = 1) -> Tensor:
        return ad.conv1d(x, self._weight(prefix, wn), self.params.get(prefix + ".b"),
                         dilation=dilation, groups=groups)

    def _act(self, x: Tensor) -> Tensor:
        return ad.selu(x) if self.config.activation == "selu" else ad.relu(x)

    # -- blocks ------------------------------------------------------------

    def dcu_forward(self, unit: dict, x: Tensor, training: bool) -> Tensor:
        p, wn = unit["prefix"], unit["wn"]
        feats = [x]
        for s in range(SUBLAYERS):
            h = ad.concat(feats)
            for j in range(CONVS_PER_SUBLAYER):
                q = f"{p}.sub{s}.ds{j}"
                h = self._conv(q + ".dw", h, wn, dilation=unit["dilation"], groups=h.shape[0])
                h = self._conv(q + ".pw", h, wn)
            if unit["positionwise"]:
                h = ad.positionwise_norm(h)
            bn = f"{p}.sub{s}.bn"
            h = ad.batch_norm(h, self.params[bn + ".gamma"], self.params[bn + ".beta"],
                              self.bn_state[bn], training=training)
            feats.append(self._act(h))
        return self._conv(f"{p}.transition", ad.concat(feats), wn)

    def lstm_block_forward(self, x: Tensor) -> Tensor:
        """Pre-softmax 4-channel output from 1 Hz features."""
        cfg = self.config
        wn = cfg.use_weight_norm
        paths = []
        if cfg.use_lstm:
            P = self.params
            paths.append(ad.bilstm(x, P["lstm.fwd.wih"], P["lstm.fwd.whh"], P["lstm.fwd.b"],
                                   P["lstm.bwd.wih"], P["lstm.bwd.whh"], P["lstm.bwd.b"]))
        if cfg.use_residual_in_lstm_block:
            paths.append(self._conv("head.residual", x, wn))
        s = paths[0] if len(paths) == 1 else ad.add(paths[0], paths[1])
        return self._conv("head.b", ad.tanh(self._conv("head.a", s, wn)), wn)

    def forward(self, signals: np.ndarray | Tensor, training: bool = False) -> Tensor:
        """(12, T) signals at 50 Hz -> (4, T / 50) joint probabilities."""
        x = signals if isinstance(signals, Tensor) else Tensor(np.asarray(signals, dtype=self.dtype))
        cfg = self.config
        if x.data.ndim != 2 or x.shape[0] != cfg.input_channels:
            raise ValidationError(f"expected ({cfg.input_channels}, T) input, got {x.shape}")
        if x.shape[1] % cfg.total_pooling:
            raise ValidationError(f"input length {x.shape[1]} not divisible by {cfg.total_pooling}")
        for unit in self._units:
            x = self.dcu_forward(unit, x, training)
            if unit["pool"]:
                x = ad.maxpool1d(x, unit["pool"])
        return ad.softmax(self.lstm_block_forward(x), axis=0)

    def predict(self, signals: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.forward(signals, training=False).data

    def predict_batch(self, batch: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
        """Eval-mode prediction for a stack of records, one at a time."""
        return np.stack([self.predict(x) for x in batch])

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def numpy_params(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def copy(self) -> "DRCNN":
        return DRCNN(self.config, dtype=self.dtype,
                     params={k: v.data.copy() for k, v in self.params.items()},
                     bn_state={k: BatchNormState(s.running_mean.copy(), s.running_var.copy(), s.momentum)
                               for k, s in self.bn_state.items()})


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def _blob_name(name: str) -> str:
    return name + ".bin"


def save_checkpoint(model: DRCNN, path: str | os.PathLike, metadata: dict | None = None,
                    overwrite: bool = True) -> None:
    """Write config + one raw little-endian blob per tensor; bit-exact on reload."""
    path = Path(path)
    if (path / "manifest").exists() and not overwrite:
        raise FileExistsError(f"{path} already holds a checkpoint")
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs: dict[str, np.ndarray] = {f"param.{k}": v.data for k, v in model.params.items()}
    for k, s in model.bn_state.items():
        blobs[f"bn.{k}.running_mean"] = s.running_mean
        blobs[f"bn.{k}.running_var"] = s.running_var
    for name, arr in blobs.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<")
        arr.astype(dt).tofile(path / _blob_name(name))
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dt.str})
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "dtype": model.dtype.str,
        "tensors": entries,
        "metadata": metadata or {},
    }
    (path / "manifest").write_text(json.dumps(manifest, indent=2) + "\n")


def load_checkpoint(path: str | os.PathLike) -> tuple[DRCNN, dict]:
    path = Path(path)
    mpath = path / "manifest"
    if not mpath.is_file():
        raise FormatError(f"{path}: no checkpoint manifest")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: not a checkpoint")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
    arrays = {}
    for e in manifest["tensors"]:
        fpath = path / _blob_name(e["name"])
        if not fpath.is_file():
            raise FormatError(f"{path}: missing blob {e['name']}")
        arr = np.fromfile(fpath, dtype=np.dtype(e["dtype"]))
        arrays[e["name"]] = arr.reshape(e["shape"])
    config = ModelConfig.from_dict(manifest["config"])
    params = {k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")}
    bn = {}
    for k in arrays:
        if k.startswith("bn.") and k.endswith(".running_mean"):
            layer = k[len("bn."):-len(".running_mean")]
            bn[layer] = BatchNormState(arrays[k].copy(), arrays[f"bn.{layer}.running_var"].copy())
    model = DRCNN(config, dtype=np.dtype(manifest["dtype"]), params=params, bn_state=bn)
    return model, manifest.get("metadata", {})
