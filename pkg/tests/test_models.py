import numpy as np
import pytest

from ddclass import graph as G
from ddclass.autodiff import backward
from ddclass.decomposition import extract_tiles, plan_grid
from ddclass.errors import ContractError, ShapeError
from ddclass.models import (
    assemble_cnn_dnn,
    assemble_dd_global,
    branch_params,
    build_dnn_head,
    build_model,
    build_resnet20,
    build_vgg9,
    channel_decompose,
    coherent_params,
    scale_local,
    widths,
)


def rand(shape, seed=0):
    return np.random.default_rng(seed).random(shape).astype(np.float32)


def test_vgg9_structure():
    g = build_vgg9((3, 32, 32), 10, 16)
    assert g.kinds().count("conv") == 9 and g.kinds().count("pool") == 3
    w = widths(g)
    assert [w[f"s{s}c0"] for s in range(3)] == [16, 32, 64]
    assert w["fc1"] == 128 and w["logits"] == 10
    assert g.shapes()["probs"] == (10,)
    g3 = build_vgg9((1, 16, 16, 8), 2, 4)
    assert g3.layer("s0c0").attrs["spec"].kernel == (3, 3, 3)
    with pytest.raises(ShapeError):
        build_vgg9((1, 4, 32), 2)


@pytest.mark.parametrize("kind", ["vgg9", "resnet20"])
@pytest.mark.parametrize("shape", [(3, 16, 16), (1, 8, 8, 8)])
def test_forward_is_probability(kind, shape):
    g = build_model(kind, shape, 4, 4)
    out, _ = G.forward(g, rand((3,) + shape), G.init_params(g, 0))
    assert np.all(np.isfinite(out)) and np.all(out >= 0)
    assert np.all(np.abs(out.sum(axis=1) - 1) <= 1e-6)


def test_resnet20_structure():
    g = build_resnet20((3, 32, 32), 10, 8)
    assert g.kinds().count("add") == 6
    assert sum(1 for lay in g.layers if lay.kind == "conv" and lay.name.startswith("b")) == 20
    # projections where the skip source width differs from the block output
    assert {lay.name for lay in g.layers if lay.name.startswith("proj")} == {"proj0", "proj6", "proj12"}


def test_resnet20_zero_residual_path_gives_skip_composition():
    g = build_resnet20((2, 8, 8), 3, 2)
    p = G.init_params(g, 1)
    for lay in g.layers:
        if lay.kind == "conv" and lay.name.startswith("b") and lay.name not in ("b0",):
            p[lay.name + ".w"][:] = 0
            p[lay.name + ".b"][:] = 0
    # with every block after b0 silenced the first skip adds relu(b2)=0 to the input
    outs = G.layer_outputs(g, rand((2, 2, 8, 8)), p)
    np.testing.assert_array_equal(outs["skip0"], outs["input"])


def test_dnn_head_sizes():
    for k, n in ((10, 4), (2, 32), (5, 16)):
        g = build_dnn_head(k, n)
        assert g.input_shape == (k * n,) and g.shapes()["probs"] == (k,)
        assert [widths(g)[f"h{i}"] for i in range(4)] == [128, 64, 32, 10]


def test_scale_local():
    g = build_vgg9((3, 32, 32), 10, 16)
    same = scale_local(g, 1, (3, 32, 32))
    assert same.layers == g.layers
    loc = scale_local(g, 4, (3, 16, 16))
    w = widths(loc)
    assert [w[f"s{s}c0"] for s in range(3)] == [4, 8, 16] and w["fc1"] == 32 and w["logits"] == 10
    assert loc.kinds() == g.kinds()
    assert widths(scale_local(g, 100, (3, 16, 16)))["s0c0"] == 1
    with pytest.raises(ShapeError):
        scale_local(g, 4, (3, 4, 4))


def coherent_setup(n_grid=(2, 2)):
    plan = plan_grid((16, 16), n_grid, channels=2)
    gg = build_vgg9((2, 16, 16), 3, 4)
    locs = [scale_local(gg, plan.n, plan.tile_input_shape(i)) for i in range(plan.n)]
    lps = [G.init_params(lg, 10 + i) for i, lg in enumerate(locs)]
    head = build_dnn_head(3, plan.n)
    coh = assemble_cnn_dnn(locs, head, plan)
    return plan, locs, lps, coh, coherent_params(lps, G.init_params(head, 99))


def test_coherent_branches_match_locals_bitwise():
    plan, locs, lps, coh, params = coherent_setup()
    x = rand((5, 2, 16, 16), 1)
    outs = G.layer_outputs(coh, x, params)
    tiles = extract_tiles(x, plan)
    for i, lg in enumerate(locs):
        ref, _ = G.forward(lg, tiles[i], lps[i])
        assert outs[f"b{i}/probs"].tobytes() == ref.tobytes()
        assert branch_params(params, i).keys() == lps[i].keys()


def test_coherent_gradient_reaches_every_branch():
    plan, locs, lps, coh, params = coherent_setup()
    loss, tape = G.forward_loss(coh, rand((4, 2, 16, 16), 2), params, labels=np.array([0, 1, 2, 0]))
    grads = backward(tape, output=loss)
    for i in range(plan.n):
        assert np.linalg.norm(grads[f"b{i}/s0c0.w"]) > 0


def test_coherent_assembly_errors():
    plan, locs, lps, coh, params = coherent_setup()
    with pytest.raises(ContractError):
        assemble_cnn_dnn(locs[:3], build_dnn_head(3, 4), plan)
    with pytest.raises(ContractError):
        assemble_cnn_dnn(locs, build_dnn_head(3, 3), plan)


def test_channel_decompose_widths_and_errors():
    g = build_vgg9((4, 16, 16), 3, 16)
    subs, rmap = channel_decompose(g, 4)
    w = widths(subs[0])
    assert [w[f"s{s}c0"] for s in range(3)] == [4, 8, 16]
    assert subs[0].input_shape == (1, 16, 16)
    one, _ = channel_decompose(g, 1)
    assert one[0].layers == g.layers
    with pytest.raises(ContractError, match="s0c0"):
        channel_decompose(build_vgg9((4, 16, 16), 3, 6), 4)
    with pytest.raises(ContractError):
        channel_decompose(build_vgg9((3, 16, 16), 3, 8), 2)


def test_reassembly_targets_cover_block_diagonal():
    g = build_vgg9((2, 16, 16), 3, 4)
    _, rmap = channel_decompose(g, 2)
    for name, shape in g.param_shapes().items():
        if name.startswith("logits"):
            continue
        mask = np.zeros(shape, bool)
        for pl in rmap.targets(name):
            assert not mask[pl.index].any()
            mask[pl.index] = True
        blocks = np.zeros(shape, bool)
        if len(shape) == 1:
            blocks[:] = True
        else:
            r, c = shape[0] // 2, shape[1] // 2
            blocks[:r, :c] = blocks[r:, c:] = True
        np.testing.assert_array_equal(mask, blocks)


def test_dd_n1_is_identity_and_cross_weight_breaks_coupling():
    g = build_vgg9((2, 8, 8), 3, 4)
    subs, rmap = channel_decompose(g, 1)
    p = G.init_params(subs[0], 0)
    _, gp = assemble_dd_global([p], rmap)
    for k in p:
        np.testing.assert_array_equal(gp[k], p[k])
    subs, rmap = channel_decompose(g, 2)
    sp = [G.init_params(s, i) for i, s in enumerate(subs)]
    _, gp = assemble_dd_global(sp, rmap)
    x = rand((2, 2, 8, 8), 3)
    ref = G.layer_outputs(subs[0], x[:, :1], sp[0])["s0c1"]
    out = G.layer_outputs(g, x, gp)["s0c1"]
    np.testing.assert_allclose(out[:, :2], ref, atol=1e-6)
    gp["s0c1.w"][0, 2, 1, 1] = 0.5  # cross-group weight
    out = G.layer_outputs(g, x, gp)["s0c1"]
    assert np.abs(out[:, :2] - ref).max() > 1e-3


def test_assemble_dd_mismatch():
    g = build_vgg9((2, 8, 8), 3, 4)
    subs, rmap = channel_decompose(g, 2)
    with pytest.raises(ContractError):
        assemble_dd_global([G.init_params(subs[0], 0)], rmap)
    bad = G.init_params(subs[0], 0)
    bad["s0c0.w"] = np.zeros((3, 1, 3, 3), np.float32)
    with pytest.raises(ContractError):
        assemble_dd_global([bad, G.init_params(subs[1], 1)], rmap)
