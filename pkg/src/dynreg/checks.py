"""Finite-difference checks of blocks and whole networks, per block topology."""

from typing import List, Tuple

import numpy as np

from .autodiff import GradCheckReport, Graph, anchored_check, grad_check, surrogate_check
from .nets import BranchScaler, DenseLayer, NetSpec, Res2Block, Res3Block, build_net, reg_family


def probe_net(topology: str, reg_mode: str = "dynamic", seed: int = 0, granularity: str = "batch", **overrides):
    spec = NetSpec(topology=topology, depth=2, width=3, widening="pyramid", width_step=2, growth_rate=2,
                   num_classes=3, input_shape=(2, 4, 4), reg_mode=reg_mode, granularity=granularity,
                   seed=seed, **overrides)
    return build_net(spec)


def probe_graph(net, seed: int = 0, batch: int = 4, s: float = 1.0):
    """Record one train-mode forward of ``net`` on a random batch."""
    rng = np.random.default_rng(seed + 1000)
    x = rng.standard_normal((batch,) + tuple(net.spec.input_shape))
    y = rng.integers(0, net.spec.num_classes, batch)
    g = Graph()
    _, loss = net.forward(g, x, y, s)
    return g, loss


def probe_block(topology: str, seed: int = 0, s: float = 1.0, reg_mode: str = "dynamic",
                granularity: str = "batch", batch: int = 3, channels: int = 3):
    """One perturbed block under a fixed linear read-out.

    The input map is itself a trainable leaf, so the identity path is checked
    too. Returns ``(graph, loss node, block)``.
    """
    rng = np.random.default_rng(seed)
    spec = NetSpec(topology=topology, depth=2, reg_mode=reg_mode, granularity=granularity, seed=seed,
                   input_shape=(channels, 4, 4))
    scaler = BranchScaler(reg_family(reg_mode), 2, 2, spec, np.random.default_rng(seed + 1))
    if topology == "res2":
        block = Res2Block(channels, channels + 1, 1, 3, scaler, rng, "probe")
    elif topology == "res3":
        block = Res3Block(channels, channels, 1, 3, scaler, rng, "probe")
    else:
        block = DenseLayer(channels, 2, 3, scaler, rng, "probe")
    g = Graph()
    x = g.param(rng.standard_normal((batch, channels, 4, 4)))
    out = block(g, x, True, s)
    pooled = g.global_avg_pool(out)
    readout = g.const(rng.standard_normal((g.value(pooled).shape[1], 1)))
    # per-sample weights: a plain batch sum would cancel against the branch's final BN
    loss = g.matmul(g.const(rng.standard_normal((1, batch))), g.matmul(pooled, readout))
    return g, loss, block


def topology_grad_checks(seed: int = 0, step: float = 1e-5) -> List[Tuple[str, GradCheckReport]]:
    """For res2, res3 and dense: whole net with mu = theta, single block against
    the mu-substituted surrogate, and whole net with mu != theta against the
    anchored function."""
    out = []
    for topology in ("res2", "res3", "dense"):
        net = probe_net(topology, seed=seed)
        g, loss = probe_graph(net, seed)
        out.append((f"{topology} net frozen", grad_check(g.frozen(), loss, step)))
        out.append((f"{topology} net anchored", anchored_check(g, loss, step)))
        bg, bloss, _ = probe_block(topology, seed)
        out.append((f"{topology} block surrogate", surrogate_check(bg, bloss, step)))
    return out
