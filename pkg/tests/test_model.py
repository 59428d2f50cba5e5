import warnings

import numpy as np
import pytest

from gwnet.errors import ConfigError, CorruptCheckpointError
from gwnet.graph import Graph
from gwnet.model import ModelConfig, build, from_bytes, load, parse_kv, save, to_bytes
from gwnet.tensor import Tensor, mul, sum_

SUPPORTS = {"identity-only": 1, "forward-only": 1, "adaptive-only": 1,
            "forward-backward": 2, "forward-backward-adaptive": 3}


def expected_params(cfg):
    """Closed-form parameter count (the formula published in the README)."""
    R, Dc, Sk, E = cfg.residual_channels, cfg.dilation_channels, cfg.skip_channels, cfg.end_channels
    K, S = cfg.kernel_size, SUPPORTS[cfg.adjacency_mode]
    per_layer = 2 * (Dc * R * K + Dc) + S * (cfg.gcn_k + 1) * Dc * R + (R + 1) * Sk
    total = (cfg.input_dim + 1) * R + cfg.num_layers * per_layer
    total += (Sk + 1) * E + (E + 1) * cfg.horizon * cfg.output_dim
    if "adaptive" in cfg.adjacency_mode:
        total += 2 * cfg.num_nodes * cfg.embed_dim
    return total


def small_cfg(**kw):
    base = dict(num_nodes=5, dilations=(1, 2), residual_channels=4, dilation_channels=4,
                skip_channels=6, end_channels=8, horizon=3, input_window=4, dropout_p=0.0)
    base.update(kw)
    base.setdefault("num_layers", len(base["dilations"]))
    return ModelConfig(**base)


def ring(n, seed=0):
    rng = np.random.default_rng(seed)
    a = np.zeros((n, n))
    a[np.arange(n), (np.arange(n) + 1) % n] = rng.uniform(0.5, 1.0, size=n)
    return Graph.from_adjacency(a)


# --- config --------------------------------------------------------------------

def test_config_defaults_follow_reference_setup():
    cfg = ModelConfig(num_nodes=207)
    assert cfg.dilations == (1, 2, 1, 2, 1, 2, 1, 2)
    assert cfg.gcn_k == 2 and cfg.embed_dim == 10 and cfg.dropout_p == 0.3
    assert cfg.receptive_field == 13


@pytest.mark.parametrize("kw, key", [
    (dict(num_layers=3), "dilations"),
    (dict(dropout_p=1.0), "dropout_p"),
    (dict(adjacency_mode="sideways"), "adjacency_mode"),
    (dict(skip_channels=0), "skip_channels"),
    (dict(gcn_k=-1), "gcn_k"),
])
def test_config_errors_name_the_key(kw, key):
    with pytest.raises(ConfigError) as info:
        ModelConfig(num_nodes=4, **kw)
    assert info.value.key == key


def test_config_text_round_trip():
    cfg = small_cfg(adjacency_mode="adaptive-only", dropout_p=0.25)
    assert ModelConfig.from_text(cfg.to_text()) == cfg


def test_config_text_rejects_unknown_key():
    with pytest.raises(ConfigError, match="colour"):
        ModelConfig.from_text("num_nodes = 3\ncolour = red\n")


def test_parse_kv_comments_and_layers_inferred():
    kv = parse_kv("# header\nnum_nodes = 4  # trailing\n\ndilations = 1,2,4\n")
    assert kv == {"num_nodes": "4", "dilations": "1,2,4"}
    assert ModelConfig.from_dict(kv).num_layers == 3


# --- build -------------------------------------------------------------------------

def test_adaptive_only_builds_without_graph():
    assert build(small_cfg(adjacency_mode="adaptive-only")).embeddings is not None


def test_graph_mode_without_graph_is_config_error():
    with pytest.raises(ConfigError):
        build(small_cfg(adjacency_mode="forward-backward"))


def test_graph_node_count_must_match():
    with pytest.raises(ConfigError):
        build(small_cfg(adjacency_mode="forward-only"), ring(6))


def test_reference_sized_model_is_seed_stable():
    g = ring(207)
    cfg = ModelConfig(num_nodes=207)
    a, b = build(cfg, g), build(cfg, g)
    assert a.num_parameters() == b.num_parameters() == expected_params(cfg)
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), b.parameters()))


def test_reference_parameter_count_quoted_in_readme():
    assert expected_params(ModelConfig(num_nodes=207)) == 316_536
    assert build(ModelConfig(num_nodes=207), ring(207)).num_parameters() == 316_536


@pytest.mark.parametrize("cfg", [
    small_cfg(),
    small_cfg(adjacency_mode="identity-only", gcn_k=0, input_dim=2, output_dim=2),
    small_cfg(adjacency_mode="adaptive-only", gcn_k=3, embed_dim=7, kernel_size=3,
              dilations=(1, 2, 4)),
    ModelConfig(num_nodes=10, adjacency_mode="forward-only"),
])
def test_parameter_count_formula(cfg):
    m = build(cfg, ring(cfg.num_nodes))
    names = [n for n, _ in m.named_parameters()]
    assert len(names) == len(set(names))
    assert len({id(p) for p in m.parameters()}) == len(names)
    assert m.num_parameters() == expected_params(cfg)


# --- forward -----------------------------------------------------------------------------

def test_forward_shape_contract(rng):
    m = build(ModelConfig(num_nodes=10, residual_channels=8, dilation_channels=8,
                          skip_channels=16, end_channels=16), ring(10))
    out = m.forward(Tensor(rng.normal(size=(2, 1, 10, 12))))
    assert out.shape == (2, 12, 10, 1)


def test_multichannel_output_layout(rng):
    m = build(small_cfg(input_dim=2, output_dim=2), ring(5))
    x = Tensor(rng.normal(size=(3, 2, 5, 4)))
    out = m.forward(x).data
    assert out.shape == (3, 3, 5, 2)
    # node mixing through the graph must not leak across batch entries
    out0 = m.forward(Tensor(x.data[:1])).data
    assert np.allclose(out[:1], out0, rtol=0, atol=1e-12)


def test_eval_forward_is_deterministic(rng):
    m = build(small_cfg(dropout_p=0.5), ring(5))
    x = Tensor(rng.normal(size=(2, 1, 5, 4)))
    assert np.array_equal(m.forward(x).data, m.forward(x).data)


def test_train_mode_applies_dropout(rng):
    m = build(small_cfg(dropout_p=0.5), ring(5))
    x = Tensor(rng.normal(size=(2, 1, 5, 4)))
    assert not np.array_equal(m.forward(x, train_mode=True).data, m.forward(x).data)


def test_short_input_is_left_padded_with_zeros(rng):
    m = build(small_cfg(), ring(5))
    rf = m.config.receptive_field
    x = rng.normal(size=(1, 1, 5, rf - 2))
    padded = np.concatenate([np.zeros((1, 1, 5, 2)), x], axis=-1)
    assert np.array_equal(m.forward(Tensor(x)).data, m.forward(Tensor(padded)).data)


def test_long_input_warns_and_ignores_old_steps(rng):
    m = build(small_cfg(), ring(5))
    rf = m.config.receptive_field
    x = rng.normal(size=(1, 1, 5, rf + 3))
    with pytest.warns(UserWarning, match="receptive field"):
        long_out = m.forward(Tensor(x)).data
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert np.array_equal(long_out, m.forward(Tensor(x[..., 3:])).data)


def test_layers_are_causal(rng):
    m = build(small_cfg(dilations=(1, 2, 1)), ring(5))
    length, p = 10, 5
    x = rng.normal(size=(1, 1, 5, length))
    base_out, base_skip = m.layer_outputs(Tensor(x))
    x2 = x.copy()
    x2[..., p + 1:] += rng.normal(size=(1, 1, 5, length - p - 1))
    out, skip = m.layer_outputs(Tensor(x2))
    for a, b in zip(base_out + base_skip, out + skip):
        shift = length - a.shape[-1]
        keep = p + 1 - shift  # output positions aligned with input times <= p
        assert keep > 0
        assert np.array_equal(a.data[..., :keep], b.data[..., :keep])
        assert not np.array_equal(a.data[..., keep:], b.data[..., keep:])


def test_whole_horizon_in_one_pass_without_feedback(rng):
    m = build(small_cfg(adjacency_mode="adaptive-only"), None)
    x = Tensor(rng.normal(size=(1, 1, 5, 4)))
    out = m.forward(x)
    seen, stack = set(), [out]
    while stack:
        t = stack.pop()
        if id(t) in seen or t.node is None:
            continue
        seen.add(id(t))
        assert out not in t.node.inputs
        stack.extend(t.node.inputs)
    assert x.node is None


def test_adaptive_embeddings_receive_gradient(rng):
    m = build(small_cfg(adjacency_mode="adaptive-only"))
    loss = sum_(mul(m.forward(Tensor(rng.normal(size=(2, 1, 5, 4)))),
                    Tensor(rng.normal(size=(2, 3, 5, 1)))))
    loss.backward()
    assert np.any(m.embeddings.source.grad != 0)
    assert np.any(m.embeddings.target.grad != 0)


# --- checkpoints -------------------------------------------------------------------------

@pytest.mark.parametrize("mode", ["forward-backward-adaptive", "adaptive-only", "identity-only"])
def test_checkpoint_round_trip(mode, tmp_path, rng):
    m = build(small_cfg(adjacency_mode=mode), ring(5))
    m.norm_mean, m.norm_std = 1.5, 0.25
    path = tmp_path / "best.ckpt"
    save(m, path)
    back = load(path)
    assert back.config == m.config
    assert (back.norm_mean, back.norm_std) == (1.5, 0.25)
    x = Tensor(rng.normal(size=(2, 1, 5, 4)))
    assert np.array_equal(back.forward(x).data, m.forward(x).data)
    assert to_bytes(back) == path.read_bytes()


def test_checkpoint_is_self_describing(rng):
    cfg = small_cfg(gcn_k=1, skip_channels=9, horizon=5)
    back = from_bytes(to_bytes(build(cfg, ring(5))))
    assert back.config == cfg
    assert back.forward(Tensor(rng.normal(size=(1, 1, 5, 4)))).shape == (1, 5, 5, 1)


def test_truncated_checkpoint_is_reported():
    blob = to_bytes(build(small_cfg(), ring(5)))
    for cut in (4, 10, 40, len(blob) // 2, len(blob) - 1):
        with pytest.raises(CorruptCheckpointError):
            from_bytes(blob[:cut])


def test_checkpoint_field_errors():
    blob = to_bytes(build(small_cfg(), ring(5)))
    with pytest.raises(CorruptCheckpointError) as info:
        from_bytes(b"XXXXXXXX" + blob[8:])
    assert info.value.field == "magic"
    with pytest.raises(CorruptCheckpointError) as info:
        from_bytes(blob[:8] + (99).to_bytes(4, "little") + blob[12:])
    assert info.value.field == "version"
    with pytest.raises(CorruptCheckpointError) as info:
        from_bytes(blob[:-8])
    assert info.value.field == "supports"
