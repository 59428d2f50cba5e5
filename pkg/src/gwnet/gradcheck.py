"""Finite-difference check of every differentiable op and layer at tiny shapes."""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from .graph import Graph, NodeEmbeddings, adaptive_adjacency
from .layers import AdjacencyMode, Conv1x1, DilatedConv, GatedTcn, GcnLayer, StLayer
from .model import ModelConfig, build
from .tensor import (
    Tensor,
    abs_,
    add,
    bias_add,
    channel_mix,
    conv_time,
    grad_check,
    matmul,
    mean,
    mul,
    node_mix,
    pad_time,
    permute,
    relu,
    reshape,
    scale,
    shift,
    sigmoid,
    slice_time,
    softmax_rows,
    sub,
    sum_,
    tanh,
    transpose,
)
from .train import masked_mae_loss

TOLERANCE = 1e-5


def _probe_loss(out: Tensor, probe: np.ndarray) -> Tensor:
    return sum_(mul(out, Tensor(probe)))


def _away_from_zero(rng: np.random.Generator, shape) -> np.ndarray:
    """Random values at least 0.1 from 0 so relu/abs kinks stay out of the stencil."""
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.5, size=shape)


def _check_all(fn: Callable[[], Tensor], tensors: list[Tensor]) -> float:
    worst = 0.0
    for t in tensors:
        worst = max(worst, grad_check(lambda _: fn(), t))
    return worst


def _op_cases(rng: np.random.Generator) -> Iterator[tuple[str, float]]:
    def leaf(*shape, kink_free=False):
        data = _away_from_zero(rng, shape) if kink_free else rng.normal(size=shape)
        return Tensor(data, requires_grad=True)

    a, b = leaf(3, 4), leaf(3, 4)
    p34 = rng.normal(size=(3, 4))
    unary = {
        "relu": relu, "sigmoid": sigmoid, "tanh": tanh, "abs": abs_,
        "scale": lambda x: scale(x, -1.7), "shift": lambda x: shift(x, 0.3),
    }
    for name, op in unary.items():
        x = leaf(3, 4, kink_free=True)
        yield name, _check_all(lambda: _probe_loss(op(x), p34), [x])
    for name, op in {"add": add, "sub": sub, "mul": mul}.items():
        yield name, _check_all(lambda: _probe_loss(op(a, b), p34), [a, b])

    m, w = leaf(3, 4), leaf(4, 2)
    p32, p26 = rng.normal(size=(3, 2)), rng.normal(size=(2, 6))
    yield "matmul", _check_all(lambda: _probe_loss(matmul(m, w), p32), [m, w])
    yield "transpose", _check_all(lambda: _probe_loss(transpose(m), p34.T.copy()), [m])
    sq = leaf(4, 4)
    p44 = rng.normal(size=(4, 4))
    yield "softmax_rows", _check_all(lambda: _probe_loss(softmax_rows(sq), p44), [sq])
    yield "sum", _check_all(lambda: sum_(mul(m, m)), [m])
    yield "mean", _check_all(lambda: mean(mul(m, m)), [m])
    yield "reshape", _check_all(lambda: _probe_loss(reshape(m, (2, 6)), p26), [m])

    x = leaf(2, 3, 4, 16)
    px = rng.normal(size=(2, 3, 4, 16))
    pp = rng.normal(size=(2, 16, 4, 3))
    yield "permute", _check_all(lambda: _probe_loss(permute(x, (0, 3, 2, 1)), pp), [x])
    ps = rng.normal(size=(2, 3, 4, 11))
    yield "slice_time", _check_all(lambda: _probe_loss(slice_time(x, 5), ps), [x])
    pd = rng.normal(size=(2, 3, 4, 19))
    yield "pad_time", _check_all(lambda: _probe_loss(pad_time(x, 3), pd), [x])
    bias = leaf(3)
    yield "bias_add", _check_all(lambda: _probe_loss(bias_add(x, bias), px), [x, bias])
    adj = leaf(4, 4)
    yield "node_mix", _check_all(lambda: _probe_loss(node_mix(adj, x), px), [adj, x])
    cw = leaf(3, 2)
    pc = rng.normal(size=(2, 2, 4, 16))
    yield "channel_mix", _check_all(lambda: _probe_loss(channel_mix(x, cw), pc), [x, cw])
    k = leaf(2, 3, 3)
    pk = rng.normal(size=(2, 2, 4, 12))
    yield "conv_time", _check_all(lambda: _probe_loss(conv_time(x, k, 2), pk), [x, k])


def _layer_cases(rng: np.random.Generator) -> Iterator[tuple[str, float]]:
    n = 4
    x = Tensor(rng.normal(size=(2, 3, n, 8)), requires_grad=True)
    fwd = rng.dirichlet(np.ones(n), size=n)
    bwd = rng.dirichlet(np.ones(n), size=n)

    lin = Conv1x1(3, 2, rng)
    probe = rng_probe(lin(x))
    yield "conv1x1", _check_all(lambda: _probe_loss(lin(x), probe), [x, *lin.parameters()])

    conv = DilatedConv(3, 2, 2, 2, rng)
    for padded in (False, True):
        probe = rng_probe(conv(x, padded))
        yield (f"dilated_conv[{'padded' if padded else 'valid'}]",
               _check_all(lambda: _probe_loss(conv(x, padded), probe), [x, *conv.parameters()]))

    tcn = GatedTcn(3, 2, 2, 1, rng)
    probe = rng_probe(tcn(x))
    yield "gated_tcn", _check_all(lambda: _probe_loss(tcn(x), probe), [x, *tcn.parameters()])

    emb = NodeEmbeddings(Tensor(rng.normal(size=(n, 3)), requires_grad=True),
                         Tensor(rng.normal(size=(n, 3)), requires_grad=True))
    probe = rng.normal(size=(n, n))
    yield "adaptive_adjacency", _check_all(lambda: _probe_loss(adaptive_adjacency(emb), probe),
                                           [emb.source, emb.target])

    for mode in AdjacencyMode:
        gcn = GcnLayer(3, 2, 2, mode, rng)
        mats = {"identity": None, "forward": Tensor(fwd), "backward": Tensor(bwd)}

        def supports():
            adp = adaptive_adjacency(emb)
            return [adp if s == "adaptive" else mats[s] for s in mode.support_names]

        probe = rng_probe(gcn(x, supports()))
        params = [x, *gcn.parameters()] + ([emb.source, emb.target] if mode.uses_adaptive else [])
        yield f"gcn[{mode.value}]", _check_all(
            lambda: _probe_loss(gcn(x, supports()), probe), params)

    block = StLayer(3, 2, 4, 2, 2, 2, AdjacencyMode.FORWARD_BACKWARD, rng, "block")
    sup = [Tensor(fwd), Tensor(bwd)]
    out, skip = block(x, sup)
    po, pk = rng_probe(out), rng_probe(skip)

    def block_loss():
        o, s = block(x, sup)
        return add(_probe_loss(o, po), _probe_loss(s, pk))

    yield "st_layer", _check_all(block_loss, [x, *block.parameters()])

    pred = Tensor(rng.normal(size=(2, 3, n, 1)), requires_grad=True)
    target = pred.data + _away_from_zero(rng, pred.shape)
    mask = rng.uniform(size=pred.shape) < 0.7
    yield "masked_mae_loss", _check_all(lambda: masked_mae_loss(pred, target, mask), [pred])

    cfg = ModelConfig(num_nodes=n, num_layers=2, dilations=(1, 2), residual_channels=2,
                      dilation_channels=2, skip_channels=3, end_channels=3, horizon=2,
                      input_window=4, gcn_k=1, embed_dim=2, dropout_p=0.0, seed=1)
    model = build(cfg, Graph.from_adjacency(fwd, directed=True))
    xin = Tensor(rng.normal(size=(1, 1, n, 4)), requires_grad=True)
    probe = rng_probe(model.forward(xin))
    yield "graph_wavenet", _check_all(
        lambda: _probe_loss(model.forward(xin), probe), [xin, *model.parameters()])


def rng_probe(t: Tensor, seed: int = 99) -> np.ndarray:
    return np.random.default_rng([seed, *t.shape]).normal(size=t.shape)


def run_suite(seed: int = 0) -> list[tuple[str, float]]:
    """``(name, max relative error)`` for every op and layer."""
    rng = np.random.default_rng(seed)
    return list(_op_cases(rng)) + list(_layer_cases(rng))
