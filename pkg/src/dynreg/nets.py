"""Miniature residual and dense networks with pluggable branch regularization.

Three block topologies are supported:

* ``res2``  pre-activation residual block, BN-conv-BN-ReLU-conv-BN, with the
  branch scale applied after the final BN;
* ``res3``  two parallel ReLU-conv-BN-ReLU-conv-BN branches plus identity;
* ``dense`` BN-ReLU-conv producing ``growth_rate`` channels, scaled, then
  concatenated onto the running feature map.

Inputs that are plain vectors are treated as ``(D, 1, 1)`` maps and every
convolution degrades to 1x1, so the same blocks serve 2-D toy data.
"""

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import BN_MOMENTUM, Graph, Parameter
from .controller import DEFAULT_FILTER_LENGTH, DEFAULT_SIGMA, ControllerState
from .errors import ConfigError
from .perturb import (
    SHAKE_SHAKE_EVAL,
    PerturbUnit,
    dense_forward,
    noise_range,
    res2_forward,
    res3_forward,
    shake_shake_scales,
    shakedrop_eval_scale,
    shakedrop_scale,
)

TOPOLOGIES = ("res2", "res3", "dense")
PERTURB_MODES = ("dynamic", "fixed", "linear")


def reg_family(reg_mode: str) -> str:
    """Collapse ``fixed:2``/``linear:3``/``dynamic`` to the unit family they share."""
    name = reg_mode.split(":", 1)[0].strip().lower()
    name = {"fix": "fixed"}.get(name, name)
    if name in PERTURB_MODES:
        return name
    if name in ("none", "shake_shake", "shakedrop"):
        return name
    raise ConfigError(f"unknown reg_mode {reg_mode!r}")


@dataclass
class NetSpec:
    topology: str = "res2"
    depth: int = 4
    width: int = 16
    widening: str = "pyramid"
    width_step: int = 16
    growth_rate: int = 8
    num_classes: int = 2
    input_shape: Tuple[int, ...] = (2,)
    reg_mode: str = "none"
    granularity: str = "batch"
    A: float = 0.5
    p_L: float = 0.5
    uniform_R: Optional[float] = None
    clamp: bool = False
    literal_scale: Optional[float] = None
    downsample: Optional[Tuple[int, ...]] = None
    delta_s: float = 0.0003
    filter_length: int = DEFAULT_FILTER_LENGTH
    sigma: float = DEFAULT_SIGMA
    seed: int = 0

    def validate(self):
        if self.topology not in TOPOLOGIES:
            raise ConfigError(f"topology must be one of {TOPOLOGIES}, got {self.topology!r}")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.width < 1 or self.growth_rate < 1 or self.width_step < 0:
            raise ConfigError("width and growth_rate must be positive, width_step non-negative")
        if self.widening not in ("constant", "pyramid"):
            raise ConfigError(f"widening must be 'constant' or 'pyramid', got {self.widening!r}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if len(self.input_shape) not in (1, 3):
            raise ConfigError(f"input_shape must be (D,) or (C, H, W), got {self.input_shape}")
        if self.granularity not in ("batch", "sample"):
            raise ConfigError(f"granularity must be 'batch' or 'sample', got {self.granularity!r}")
        family = reg_family(self.reg_mode)
        if family == "shake_shake" and self.topology != "res3":
            raise ConfigError("shake_shake needs the res3 topology (two branches)")
        if family == "shakedrop" and self.topology == "res3":
            raise ConfigError("shakedrop applies to single-branch topologies (res2, dense)")
        if self.uniform_R is not None and not 0 <= self.uniform_R <= 1:
            raise ConfigError("uniform_R must lie in [0, 1]")
        for l in self.downsample or ():
            if not 1 <= l <= self.depth:
                raise ConfigError(f"downsample block {l} outside 1..{self.depth}")
        if self.downsample and self.topology == "dense":
            raise ConfigError("dense topology does not downsample")
        return self


# -- layers -----------------------------------------------------------------------


class Conv:
    def __init__(self, cin, cout, k, stride, rng, name):
        std = np.sqrt(2.0 / (cin * k * k))
        self.weight = Parameter(rng.standard_normal((cout, cin, k, k)) * std, name)
        self.stride = stride

    def __call__(self, g, x):
        return g.conv2d(x, g.param(self.weight), self.stride)

    def parameters(self):
        return [self.weight]


class BatchNorm:
    def __init__(self, channels, name):
        self.gamma = Parameter(np.ones(channels), name + ".gamma")
        self.beta = Parameter(np.zeros(channels), name + ".beta")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def __call__(self, g, x, training):
        node = g.batchnorm(x, g.param(self.gamma), g.param(self.beta), training,
                           self.running_mean, self.running_var)
        if training:
            ctx = g.nodes[node].ctx
            self.running_mean = BN_MOMENTUM * self.running_mean + (1 - BN_MOMENTUM) * ctx["mean"]
            self.running_var = BN_MOMENTUM * self.running_var + (1 - BN_MOMENTUM) * ctx["var"]
        return node

    def parameters(self):
        return [self.gamma, self.beta]


class Linear:
    def __init__(self, din, dout, rng, name):
        self.weight = Parameter(rng.standard_normal((din, dout)) / np.sqrt(din), name + ".weight")
        self.bias = Parameter(np.zeros(dout), name + ".bias")

    def __call__(self, g, x):
        return g.add(g.matmul(x, g.param(self.weight)), g.param(self.bias))

    def parameters(self):
        return [self.weight, self.bias]


class Shortcut:
    """Identity, zero channel padding, or a strided 1x1 projection."""

    def __init__(self, cin, cout, stride, rng, name):
        self.pad = cout - cin if stride == 1 else 0
        if self.pad < 0:
            raise ConfigError(f"{name}: channel count may not shrink ({cin} -> {cout})")
        self.proj = Conv(cin, cout, 1, stride, rng, name + ".proj") if stride != 1 else None

    def __call__(self, g, x):
        if self.proj is not None:
            return self.proj(g, x)
        if self.pad:
            n, _, h, w = g.value(x).shape
            return g.concat(x, g.const(np.zeros((n, self.pad, h, w))))
        return x

    def parameters(self):
        return self.proj.parameters() if self.proj else []


# -- branch scaling --------------------------------------------------------------


class BranchScaler:
    """Produces ``(forward, backward, stochastic)`` branch scales for one block.

    Returns None when the branch is added unscaled.
    """

    def __init__(self, family, l, L, spec: NetSpec, rng):
        self.family = family
        self.l, self.L = l, L
        self.spec = spec
        self.rng = rng
        self.unit = None
        if family in PERTURB_MODES:
            R = noise_range(l, L) if spec.uniform_R is None else spec.uniform_R
            self.unit = PerturbUnit(spec.A, R, l, spec.granularity, rng, spec.clamp)

    def scales(self, training, s, batch):
        size = batch if self.spec.granularity == "sample" else None
        fam = self.family
        if fam == "none":
            c = self.spec.literal_scale
            return None if c is None else (c, c, False)
        if fam in PERTURB_MODES:
            self.unit.training = training
            if not training:
                a = self.unit.fold_inference()
                return a, a, False
            theta = self.unit.sample_theta(s, size)
            mu = self.unit.sample_mu(s, size)
            return theta, mu, True
        if fam == "shake_shake":
            if not training:
                return SHAKE_SHAKE_EVAL, SHAKE_SHAKE_EVAL, False
            alpha, beta = shake_shake_scales(self.rng, size)
            return alpha, beta, True
        if fam == "shakedrop":
            if not training:
                p = shakedrop_eval_scale(self.l, self.L, self.spec.p_L)
                return p, p, False
            fwd, bwd = shakedrop_scale(self.l, self.L, self.spec.p_L, self.rng, size)
            return fwd, bwd, True
        raise ConfigError(f"unknown regularization family {fam!r}")


# -- blocks --------------------------------------------------------------------------


class Res2Block:
    def __init__(self, cin, cout, stride, k, scaler, rng, name):
        self.bn1 = BatchNorm(cin, name + ".bn1")
        self.conv1 = Conv(cin, cout, k, stride, rng, name + ".conv1")
        self.bn2 = BatchNorm(cout, name + ".bn2")
        self.conv2 = Conv(cout, cout, k, 1, rng, name + ".conv2")
        self.bn3 = BatchNorm(cout, name + ".bn3")
        self.shortcut = Shortcut(cin, cout, stride, rng, name + ".shortcut")
        self.scaler = scaler

    def branch(self, g, x, training):
        h = self.conv1(g, self.bn1(g, x, training))
        h = self.conv2(g, g.relu(self.bn2(g, h, training)))
        return self.bn3(g, h, training)

    def __call__(self, g, x, training, s):
        f = self.branch(g, x, training)
        short = self.shortcut(g, x)
        sc = self.scaler.scales(training, s, g.value(x).shape[0])
        if sc is None:
            return g.add(short, f)
        return res2_forward(g, short, f, sc[0], sc[1], stochastic=sc[2])

    def parameters(self):
        out = []
        for part in (self.bn1, self.conv1, self.bn2, self.conv2, self.bn3, self.shortcut):
            out += part.parameters()
        return out


class Res3Block:
    def __init__(self, cin, cout, stride, k, scaler, rng, name):
        self.branches = []
        for b in (1, 2):
            tag = f"{name}.b{b}"
            self.branches.append((Conv(cin, cout, k, stride, rng, tag + ".conv1"), BatchNorm(cout, tag + ".bn1"),
                                  Conv(cout, cout, k, 1, rng, tag + ".conv2"), BatchNorm(cout, tag + ".bn2")))
        self.shortcut = Shortcut(cin, cout, stride, rng, name + ".shortcut")
        self.scaler = scaler

    def branch(self, g, x, training, which):
        c1, b1, c2, b2 = self.branches[which]
        h = b1(g, c1(g, g.relu(x)), training)
        return b2(g, c2(g, g.relu(h)), training)

    def __call__(self, g, x, training, s):
        f1 = self.branch(g, x, training, 0)
        f2 = self.branch(g, x, training, 1)
        short = self.shortcut(g, x)
        sc = self.scaler.scales(training, s, g.value(x).shape[0])
        if sc is None:
            return g.add(g.add(short, f1), f2)
        if self.scaler.family == "none":
            # literal scale c on the first branch, 1 - c on the second
            return res3_forward(g, short, f1, f2, sc[0], stochastic=False)
        return res3_forward(g, short, f1, f2, sc[0], sc[1], stochastic=sc[2])

    def parameters(self):
        out = []
        for parts in self.branches:
            for p in parts:
                out += p.parameters()
        return out + self.shortcut.parameters()


class DenseLayer:
    def __init__(self, cin, growth, k, scaler, rng, name):
        self.bn = BatchNorm(cin, name + ".bn")
        self.conv = Conv(cin, growth, k, 1, rng, name + ".conv")
        self.scaler = scaler

    def __call__(self, g, x, training, s):
        new = self.conv(g, g.relu(self.bn(g, x, training)))
        sc = self.scaler.scales(training, s, g.value(x).shape[0])
        if sc is None:
            return g.concat(x, new)
        return dense_forward(g, x, new, sc[0], sc[1], stochastic=sc[2])

    def parameters(self):
        return self.bn.parameters() + self.conv.parameters()


# -- network -------------------------------------------------------------------------


class Net:
    """A built network: stem, blocks, BN-ReLU-pool-linear head."""

    def __init__(self, spec: NetSpec):
        self.spec = spec.validate()
        seeds = np.random.SeedSequence(spec.seed).spawn(spec.depth + 1)
        rng = np.random.default_rng(seeds[0])
        shape = tuple(spec.input_shape)
        cin = shape[0]
        spatial = shape[1] if len(shape) == 3 else 1
        self.training = True
        self.family = reg_family(spec.reg_mode)

        k = 3 if spatial > 1 else 1
        self.stem = Conv(cin, spec.width, k, 1, rng, "stem.conv")
        self.stem_bn = BatchNorm(spec.width, "stem.bn")
        downsample = spec.downsample
        if downsample is None:
            downsample = (spec.depth // 2 + 1,) if spatial >= 8 and spec.depth >= 2 and spec.topology != "dense" else ()

        self.blocks = []
        self.units: List[PerturbUnit] = []
        c = spec.width
        L = spec.depth
        for l in range(1, L + 1):
            scaler = BranchScaler(self.family, l, L, spec, np.random.default_rng(seeds[l]))
            if scaler.unit is not None:
                self.units.append(scaler.unit)
            k = 3 if spatial > 1 else 1
            name = f"block{l}"
            if spec.topology == "dense":
                block = DenseLayer(c, spec.growth_rate, k, scaler, rng, name)
                c_out = c + spec.growth_rate
            else:
                stride = 2 if l in downsample and spatial > 1 else 1
                if spec.widening == "pyramid":
                    c_out = spec.width + (spec.width_step * l) // L
                else:
                    c_out = c
                cls = Res2Block if spec.topology == "res2" else Res3Block
                block = cls(c, c_out, stride, k, scaler, rng, name)
                if stride == 2:
                    spatial = (spatial - 1) // 2 + 1
            self.blocks.append(block)
            c = c_out
        self.head_bn = BatchNorm(c, "head.bn")
        self.fc = Linear(c, spec.num_classes, rng, "fc")
        self.out_channels = c

        self.controller = None
        if self.family == "dynamic":
            self.controller = ControllerState.create(spec.delta_s, spec.filter_length, spec.sigma)

    @property
    def params(self) -> List[Parameter]:
        out = self.stem.parameters() + self.stem_bn.parameters()
        for b in self.blocks:
            out += b.parameters()
        return out + self.head_bn.parameters() + self.fc.parameters()

    def batchnorms(self) -> List[BatchNorm]:
        found = []

        def walk(obj):
            if isinstance(obj, BatchNorm):
                found.append(obj)
            elif isinstance(obj, (list, tuple)):
                for o in obj:
                    walk(o)
            elif hasattr(obj, "__dict__") and not isinstance(obj, (Parameter, np.ndarray, np.random.Generator)):
                for v in vars(obj).values():
                    if v is not self:
                        walk(v)

        for part in [self.stem_bn] + self.blocks + [self.head_bn]:
            walk(part)
        return found

    def _as_maps(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            return x[:, :, None, None]
        return x

    def forward(self, g: Graph, x, labels=None, s: float = 0.0):
        """Record a forward pass; returns ``(logits, loss)`` node ids (loss None without labels)."""
        h = g.const(self._as_maps(x))
        h = self.stem_bn(g, self.stem(g, h), self.training)
        for block in self.blocks:
            h = block(g, h, self.training, s)
        h = g.global_avg_pool(g.relu(self.head_bn(g, h, self.training)))
        logits = self.fc(g, h)
        loss = g.softmax_cross_entropy(logits, labels) if labels is not None else None
        return logits, loss

    def predict(self, x, batch_size: int = 512) -> np.ndarray:
        outs = []
        for start in range(0, len(x), batch_size):
            g = Graph()
            logits, _ = self.forward(g, x[start:start + batch_size])
            outs.append(g.value(logits))
        return np.concatenate(outs)

    def set_mode(self, mode: str) -> None:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.training = mode == "train"
        for u in self.units:
            u.training = self.training

    def count_params(self) -> int:
        return count_params(self)

    def state_dict(self):
        state = {p.name: p.data.copy() for p in self.params}
        for i, bn in enumerate(self.batchnorms()):
            state[f"_bn{i}.mean"] = bn.running_mean.copy()
            state[f"_bn{i}.var"] = bn.running_var.copy()
        return state

    def load_state_dict(self, state):
        for p in self.params:
            p.data = state[p.name].copy()
        for i, bn in enumerate(self.batchnorms()):
            bn.running_mean = state[f"_bn{i}.mean"].copy()
            bn.running_var = state[f"_bn{i}.var"].copy()


def build_net(spec: NetSpec) -> Net:
    return Net(spec)


def set_mode(net: Net, mode: str) -> None:
    net.set_mode(mode)


def count_params(net) -> int:
    return int(sum(p.size for p in net.params))


def literal_twin(net: Net) -> Net:
    """Deterministic copy of ``net`` whose branches are scaled by the literal eval scale.

    Only defined for the perturbation families, where the eval scale is ``A``.
    """
    if net.family not in PERTURB_MODES:
        raise ConfigError("literal_twin needs a perturbed network")
    twin = Net(replace(net.spec, reg_mode="none", literal_scale=net.spec.A))
    twin.load_state_dict(net.state_dict())
    twin.set_mode("train" if net.training else "eval")
    return twin
