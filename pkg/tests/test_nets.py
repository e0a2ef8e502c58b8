import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advlab import ContractError, DimensionError, ParseError, Tape, Tensor, backward
from advlab import tensor as T
from advlab.nets import (
    ArchSpec,
    LayerSpec,
    Network,
    decode,
    encode_dual,
    load_network,
    parse_arch,
    save_network,
)

from oracles import central_diff, grad_close

TABLE_CLASSIFIERS = [
    "c(2,20) mp(2) c(2,50) mp(2) d(500) sm(10)",
    "c(5,20) mp(2) c(5,50) mp(2) d(256) sm(10)",
    "c(5,20) mp(2) c(5,50) mp(2) d(500) sm(10)",
]
TABLE_ENCODERS = ["3(c(4,16))z(8,8)", "3(c(4,32))z(8,8)"]
TABLE_DECODERS = ["d(24)d(49)3(ct(4,16))d(784)", "d(24)d(49)3(ct(4,32))d(784)"]


# -- parser -------------------------------------------------------------------


def test_parse_table_classifier():
    spec = parse_arch("c(2,20) mp(2) c(2,50) mp(2) d(500) sm(10)")
    assert [l.kind for l in spec.layers] == ["c", "mp", "c", "mp", "d", "sm"]
    assert spec.layers[0].args == (2, 20)
    assert spec.layers[2].args == (2, 50)
    assert spec.layers[4].args == (500,)
    assert spec.layers[5].args == (10,)


def test_parse_repeat_prefix():
    spec = parse_arch("3(c(4,16))z(8,8)")
    assert [l.kind for l in spec.layers] == ["c", "c", "c", "z"]
    assert all(l.args == (4, 16) for l in spec.layers[:3])
    assert spec.latent_dims == (8, 8)


def test_parse_empty_string():
    with pytest.raises(ParseError):
        parse_arch("")
    with pytest.raises(ParseError):
        parse_arch("   ")


def test_parse_unknown_token_offset():
    with pytest.raises(ParseError) as ei:
        parse_arch("c(2,20) q(3)")
    assert ei.value.offset == 8


def test_parse_nonpositive_parameter():
    with pytest.raises(ParseError):
        parse_arch("c(0,3)")


def test_parse_z_not_final():
    with pytest.raises(ParseError) as ei:
        parse_arch("z(2,2) d(3)")
    assert ei.value.offset == 7


def test_parse_dashes_and_bare_tokens():
    spec = parse_arch("2(c(12,32)-bn-relu-mp(2))c(12,32)-bn-relu-z(64,64)")
    kinds = [l.kind for l in spec.layers]
    assert kinds == ["c", "bn", "relu", "mp", "c", "bn", "relu", "mp", "c", "bn", "relu", "z"]


def test_render_canonical_roundtrip():
    s = "3(c(4,16))  z(8,8)"
    spec = parse_arch(s)
    assert spec.render() == "c(4,16) c(4,16) c(4,16) z(8,8)"
    assert parse_arch(spec.render()) == spec


_LAYER_STRATEGY = st.one_of(
    st.tuples(st.just("c"), st.tuples(st.integers(1, 5), st.integers(1, 8))),
    st.tuples(st.just("ct"), st.tuples(st.integers(1, 5), st.integers(1, 8))),
    st.tuples(st.just("mp"), st.tuples(st.integers(1, 3))),
    st.tuples(st.just("d"), st.tuples(st.integers(1, 64))),
    st.tuples(st.just("relu"), st.just(())),
    st.tuples(st.just("bn"), st.just(())),
)


@settings(max_examples=60, deadline=None)
@given(st.lists(_LAYER_STRATEGY, min_size=1, max_size=8), st.booleans())
def test_parser_render_roundtrip_property(layers, with_z):
    specs = [LayerSpec(kind, args) for kind, args in layers]
    if with_z:
        specs.append(LayerSpec("z", (4, 4)))
    arch = ArchSpec(tuple(specs))
    assert parse_arch(arch.render()) == arch


# -- shape inference ------------------------------------------------------------


@pytest.mark.parametrize("arch", TABLE_CLASSIFIERS)
def test_table_classifiers_shape(arch):
    net = Network(arch, (1, 28, 28), role="classifier", rng=np.random.default_rng(0))
    out = net.forward(Tensor(np.random.default_rng(1).uniform(size=(2, 1, 28, 28))))
    assert out.shape == (2, 10)


@pytest.mark.parametrize("arch", TABLE_ENCODERS)
def test_table_encoders_shape(arch):
    net = Network(arch, (1, 28, 28), role="encoder", rng=np.random.default_rng(0))
    head, z_r, z_v = encode_dual(net, np.random.default_rng(1).uniform(size=(2, 1, 28, 28)))
    assert head.mu_r.shape == (2, 8) and head.mu_v.shape == (2, 8)
    assert z_r.shape == (2, 8) and z_v.shape == (2, 8)


@pytest.mark.parametrize("arch", TABLE_DECODERS)
def test_table_decoders_shape(arch):
    net = Network(arch, (8,), role="decoder", rng=np.random.default_rng(0))
    out = net.forward(Tensor(np.random.default_rng(1).normal(size=(2, 8))))
    assert out.shape == (2, 784)


def test_decoder_with_output_shape():
    net = Network("d(24)d(49)3(ct(4,16))d(784)", (8,), role="decoder",
                  rng=np.random.default_rng(0), output_shape=(1, 28, 28))
    out = net.forward(Tensor(np.zeros((3, 8))))
    assert out.shape == (3, 1, 28, 28)


def test_batchnorm_rejected_at_build():
    with pytest.raises(ContractError, match="out of scope"):
        Network("c(3,4) bn d(2) sm(2)", (1, 8, 8), rng=np.random.default_rng(0))


def test_forward_shape_mismatch():
    net = Network("sm(3)", (4,), rng=np.random.default_rng(0))
    with pytest.raises(DimensionError):
        net.forward(Tensor(np.ones((2, 5))))


def test_conv_kernel_too_large_at_build():
    with pytest.raises(DimensionError):
        Network("c(9,4) sm(2)", (1, 8, 8), rng=np.random.default_rng(0))


def test_dense_to_spatial_requires_square():
    with pytest.raises(ContractError, match="square"):
        Network("d(10) ct(2,1) d(4)", (3,), role="decoder", rng=np.random.default_rng(0))


# -- forward semantics ----------------------------------------------------------


def test_softmax_rows_sum_to_one():
    net = Network("c(3,4) mp(2) d(16) sm(5)", (1, 8, 8), rng=np.random.default_rng(3))
    out = net.forward(Tensor(np.random.default_rng(4).uniform(size=(4, 1, 8, 8))))
    assert np.all(np.abs(out.data.sum(axis=1) - 1.0) < 1e-9)


def test_zero_initialized_softmax_uniform():
    net = Network("sm(10)", (6,), rng=np.random.default_rng(0))
    for p in net.params().values():
        p.data[...] = 0.0
    out = net.forward(Tensor(np.random.default_rng(1).uniform(size=(3, 6))))
    assert np.max(np.abs(out.data - 0.1)) < 1e-12


def test_fixed_seed_forward_golden():
    net = Network("c(2,3) mp(2) d(8) sm(4)", (1, 6, 6), rng=np.random.default_rng(123))
    x = np.linspace(0.0, 1.0, 36).reshape(1, 1, 6, 6)
    out = net.forward(Tensor(x)).data[0]
    golden = np.array(GOLDEN_FORWARD)
    assert np.max(np.abs(out - golden)) < 1e-12


# golden created once from the frozen initializer (seed 123) and pinned
GOLDEN_FORWARD = [
    0.21649929019404254,
    0.2989345779079903,
    0.23263337653930755,
    0.25193275535865967,
]


def test_param_count_stable_across_forwards():
    net = Network("c(2,3) d(5) sm(2)", (1, 4, 4), rng=np.random.default_rng(0))
    n0 = net.param_count()
    net.forward(Tensor(np.zeros((2, 1, 4, 4))))
    assert net.param_count() == n0


def test_discriminator_output_range():
    net = Network("c(3,4) mp(2) d(16) d(1)", (1, 8, 8), role="discriminator",
                  rng=np.random.default_rng(5))
    out = net.forward(Tensor(np.random.default_rng(6).uniform(size=(5, 1, 8, 8))))
    assert out.shape == (5, 1)
    assert np.all((out.data > 0.0) & (out.data < 1.0))


# -- dual latent head -----------------------------------------------------------


def _small_encoder(seed=0):
    return Network("c(3,4) z(3,5)", (1, 6, 6), role="encoder", rng=np.random.default_rng(seed))


def test_encode_eval_mode_returns_means():
    enc = _small_encoder()
    x = np.random.default_rng(1).uniform(size=(2, 1, 6, 6))
    head, z_r, z_v = encode_dual(enc, x, sample=False)
    assert np.array_equal(z_r.data, head.mu_r.data)
    assert np.array_equal(z_v.data, head.mu_v.data)
    assert head.mu_r.shape == (2, 3) and head.mu_v.shape == (2, 5)


def test_encode_sample_unit_variance():
    enc = _small_encoder()
    # force logvar projections to zero so z = mu + eps with eps ~ N(0, 1)
    for name, p in enc.params().items():
        if "logvar" in name:
            p.data[...] = 0.0
    x = np.tile(np.random.default_rng(2).uniform(size=(1, 1, 6, 6)), (10_000, 1, 1, 1))
    head, z_r, _ = encode_dual(enc, x, sample=True, rng=np.random.default_rng(3))
    noise = z_r.data - head.mu_r.data
    assert abs(noise.var() - 1.0) < 0.05
    assert abs(noise.mean()) < 0.05


def test_encoder_without_z_rejected():
    with pytest.raises(ContractError):
        Network("c(3,4) d(2)", (1, 6, 6), role="encoder", rng=np.random.default_rng(0))


def test_encode_requires_rng_when_sampling():
    with pytest.raises(ContractError):
        encode_dual(_small_encoder(), np.zeros((1, 1, 6, 6)), sample=True)


# -- decoder routing ------------------------------------------------------------


def _small_decoder(seed=0):
    return Network("d(6) d(16)", (4,), role="decoder", rng=np.random.default_rng(seed))


def test_decode_sigmoid_range():
    dec = _small_decoder()
    z = np.random.default_rng(1).normal(size=(8, 4))
    out = decode(dec, z, route="r")
    assert np.all((out.data > 0.0) & (out.data < 1.0))


def test_decode_routes_share_weights():
    dec = _small_decoder()
    z = np.random.default_rng(2).normal(size=(3, 4))
    out_r = decode(dec, z, route="r")
    out_v = decode(dec, z, route="v")
    assert np.array_equal(out_r.data, out_v.data)


def test_decode_latent_width_mismatch():
    with pytest.raises(ContractError):
        decode(_small_decoder(), np.zeros((2, 7)), route="r")


# -- gradients through every layer type -----------------------------------------


@pytest.mark.parametrize(
    "arch,role,in_shape",
    [
        ("c(2,3) mp(2) d(6) sm(3)", "classifier", (1, 5, 5)),
        ("c(2,2) d(4) d(1)", "discriminator", (1, 4, 4)),
        ("c(2,3) z(2,3)", "encoder", (1, 4, 4)),
        ("d(4) ct(2,2) d(9)", "decoder", (2,)),
    ],
)
def test_layer_param_gradients_match_fd(arch, role, in_shape):
    rng = np.random.default_rng(17)
    net = Network(arch, in_shape, role=role, rng=rng)
    # nudge biases off zero: exact-zero pre-activations sit on relu kinks,
    # which the finite-difference check explicitly excludes
    for name, p in net.params().items():
        if name.endswith("bias"):
            p.data[...] = rng.normal(0.0, 0.05, size=p.shape)
    if len(in_shape) == 3:
        x0 = rng.uniform(0.1, 0.9, size=(2,) + in_shape)
    else:
        x0 = rng.uniform(-1.0, 1.0, size=(2,) + in_shape)

    def loss_of(xarr):
        with Tape():
            if role == "encoder":
                head = net.run_heads(Tensor(xarr))
                out = (T.square(head.mu_r).sum() + T.square(head.logvar_v).sum())
            else:
                out = T.square(net.forward(Tensor(xarr))).sum()
            return out

    params = net.params()
    with Tape():
        backward(loss_of(x0))
    for name, p in params.items():
        ag = p.grad if p.grad is not None else np.zeros_like(p.data)

        def f(w, name=name, p=p):
            saved = p.data.copy()
            p.data = w
            try:
                return loss_of(x0).item()
            finally:
                p.data = saved

        fd = central_diff(f, p.data.copy())
        assert grad_close(ag, fd), f"parameter gradient mismatch for {name}"
        p.zero_grad()


# -- checkpoints ------------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    net = Network("c(2,3) mp(2) d(6) sm(3)", (1, 6, 6), rng=np.random.default_rng(21))
    x = np.random.default_rng(22).uniform(size=(2, 1, 6, 6))
    before = net.forward(Tensor(x)).data
    path = tmp_path / "net.nkpt"
    save_network(net, path)
    loaded = load_network(path)
    assert loaded.spec == net.spec
    after = loaded.forward(Tensor(x)).data
    assert np.array_equal(before, after)


def test_checkpoint_rejects_garbage(tmp_path):
    from advlab.errors import FormatError

    path = tmp_path / "bad.nkpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(FormatError):
        load_network(path)
