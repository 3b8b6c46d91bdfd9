import numpy as np
import pytest
import torch

from oracles import finite_difference_check, hat_resize
from radarseg4d.network import (
    ASPP,
    CheckpointError,
    Decoder,
    NetworkConfig,
    ShapeError,
    TMVA4D,
    count_params,
    latent_fuse,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
    to_tensors,
)
from radarseg4d.views import VIEW_IDS


def random_views(cfg, rng, batch=1, dtype=torch.float64):
    return {v: torch.as_tensor(rng.random((batch, cfg.window, *cfg.view_shapes[v])), dtype=dtype)
            for v in VIEW_IDS}


def naive_conv2d(x, w, b, dilation=1, padding=0):
    """Direct loops; x (C, H, W), w (O, C, kh, kw)."""
    C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    Ho = H + 2 * padding - dilation * (kh - 1)
    Wo = W + 2 * padding - dilation * (kw - 1)
    out = np.zeros((O, Ho, Wo))
    for o in range(O):
        for i in range(Ho):
            for j in range(Wo):
                acc = b[o]
                for c in range(C):
                    for a in range(kh):
                        for d in range(kw):
                            acc += w[o, c, a, d] * xp[c, i + a * dilation, j + d * dilation]
                out[o, i, j] = acc
    return out


def naive_conv_transpose2x2(x, w, b):
    """Stride-2, kernel-2 transposed convolution; w (C, O, 2, 2)."""
    C, H, W = x.shape
    O = w.shape[1]
    out = np.zeros((O, 2 * H, 2 * W)) + b[:, None, None]
    for c in range(C):
        for i in range(H):
            for j in range(W):
                for a in range(2):
                    for d in range(2):
                        out[:, 2 * i + a, 2 * j + d] += x[c, i, j] * w[c, :, a, d]
    return out


def relu(a):
    return np.maximum(a, 0.0)


def test_count_params_single_conv():
    assert sum(p.numel() for p in torch.nn.Conv2d(1, 1, 3).parameters()) == 10


@pytest.mark.parametrize("preset", [NetworkConfig.reference, NetworkConfig.tiny, NetworkConfig.gradcheck])
def test_count_params_matches_storage(preset):
    cfg = preset()
    assert count_params(cfg) == TMVA4D(cfg).n_params()


def test_gradcheck_closed_form():
    # encoder: 3D stage with depth kernel 3 then 1, two 2D convs, all with 2 channels
    enc = (1 * 2 * 27 + 2) + (2 * 2 * 9 + 2) + 2 * (2 * 2 * 9 + 2)
    aspp = (2 * 2 + 2) + (2 * 2 * 9 + 2) + (4 * 2 + 2)
    dec = (10 * 2 * 4 + 2) + (2 * 2 * 9 + 2) + (2 * 2 * 4 + 2) + (2 * 2 * 9 + 2) + (2 * 2 + 2)
    assert count_params(NetworkConfig.gradcheck()) == 5 * (enc + aspp) + dec


def test_reference_param_budget():
    n = count_params(NetworkConfig.reference())
    assert abs(n - 7.7e6) <= 0.15 * 7.7e6


def test_encoder_shapes_reference():
    cfg = NetworkConfig.reference()
    model = TMVA4D(cfg)
    rng = np.random.default_rng(0)
    with torch.no_grad():
        ea = model.encoders["ea"](torch.as_tensor(rng.random((1, 5, 128, 128)), dtype=torch.float32))
        ra = model.encoders["ra"](torch.as_tensor(rng.random((1, 5, 256, 128)), dtype=torch.float32))
    assert ea.shape == (1, 64, 64, 64)
    assert ra.shape == (1, 64, 64, 32)


def test_zero_input_is_finite():
    cfg = NetworkConfig.tiny()
    model = TMVA4D(cfg, debug=True)
    views = {v: torch.zeros(1, cfg.window, *cfg.view_shapes[v]) for v in VIEW_IDS}
    with torch.no_grad():
        assert torch.isfinite(model(views)).all()


def test_wrong_input_shape():
    cfg = NetworkConfig.gradcheck()
    model = TMVA4D(cfg)
    views = random_views(cfg, np.random.default_rng(0), dtype=torch.float32)
    views["ER"] = views["ER"][:, :, :4]
    with pytest.raises(ShapeError, match="ER"):
        model(views)
    del views["ER"]
    with pytest.raises(ShapeError):
        model(views)


def test_aspp_preserves_size_and_matches_naive():
    torch.manual_seed(0)
    aspp = ASPP(2, 3, (1, 2)).double()
    x = torch.rand(1, 2, 6, 6, dtype=torch.float64)
    with torch.no_grad():
        out = aspp(x)[0].numpy()
    assert out.shape == (2, 6, 6)
    xn = x[0].numpy()
    sd = {k: v.numpy() for k, v in aspp.state_dict().items()}
    branches = [relu(naive_conv2d(xn, sd["point.weight"], sd["point.bias"]))]
    for k, r in enumerate((1, 2)):
        branches.append(relu(naive_conv2d(xn, sd[f"atrous.{k}.weight"], sd[f"atrous.{k}.bias"], r, r)))
    expect = relu(naive_conv2d(np.concatenate(branches), sd["fuse.weight"], sd["fuse.bias"]))
    np.testing.assert_allclose(out, expect, atol=1e-5)


def test_aspp_zero_branches_give_bias_map():
    aspp = ASPP(2, 3, (1,)).double()
    with torch.no_grad():
        for conv in [aspp.point, *aspp.atrous]:
            conv.weight.zero_()
            conv.bias.zero_()
        aspp.fuse.bias.copy_(torch.tensor([0.5, 2.0]))
        out = aspp(torch.rand(1, 2, 5, 5, dtype=torch.float64))
    assert torch.all(out[0, 0] == 0.5) and torch.all(out[0, 1] == 2.0)


def test_latent_fuse_order_and_resize():
    rng = np.random.default_rng(1)
    feats = {v: torch.as_tensor(rng.random((1, 2, 8, 4 + i))) for i, v in enumerate(VIEW_IDS)}
    z = latent_fuse(feats, (4, 4))
    assert z.shape == (1, 10, 4, 4)
    for i, v in enumerate(VIEW_IDS):
        for c in range(2):
            np.testing.assert_allclose(z[0, 2 * i + c].numpy(), hat_resize(feats[v][0, c].numpy(), 4, 4),
                                       atol=1e-12)
    same = {v: torch.ones(1, 2, 4, 4) for v in VIEW_IDS}
    assert torch.all(latent_fuse(same, (4, 4)) == 1.0)
    swapped = dict(feats)
    swapped["EA"], swapped["ER"] = feats["ER"][..., :8, :4], feats["EA"][..., :8, :4]
    assert not torch.equal(latent_fuse(swapped, (4, 4)), z)


def test_decoder_layer_by_layer():
    torch.manual_seed(1)
    dec = Decoder(4, (3, 2), 2).double()
    z = torch.rand(1, 4, 3, 3, dtype=torch.float64)
    with torch.no_grad():
        out = dec(z)[0].numpy()
    sd = {k: v.numpy() for k, v in dec.state_dict().items()}
    x = relu(naive_conv_transpose2x2(z[0].numpy(), sd["up1.weight"], sd["up1.bias"]))
    x = relu(naive_conv2d(x, sd["conv1.weight"], sd["conv1.bias"], padding=1))
    x = relu(naive_conv_transpose2x2(x, sd["up2.weight"], sd["up2.bias"]))
    x = relu(naive_conv2d(x, sd["conv2.weight"], sd["conv2.bias"], padding=1))
    expect = naive_conv2d(x, sd["head.weight"], sd["head.bias"])
    assert out.shape == (2, 12, 12)
    np.testing.assert_allclose(out, expect, atol=1e-5)


def test_decoder_zero_weights_constant_logits():
    dec = Decoder(4, (3, 2), 2)
    with torch.no_grad():
        for p in dec.parameters():
            p.zero_()
        dec.head.bias.copy_(torch.tensor([0.25, -1.0]))
        out = dec(torch.rand(1, 4, 2, 2))
    assert torch.all(out[0, 0] == 0.25) and torch.all(out[0, 1] == -1.0)


def test_forward_shapes_and_softmax_laws():
    cfg = NetworkConfig.tiny()
    model = TMVA4D(cfg, seed=3)
    views = random_views(cfg, np.random.default_rng(2), batch=2, dtype=torch.float32)
    with torch.no_grad():
        logits = model(views)
        probs = model.predict_proba(views)
    assert logits.shape == (2, 2, 128, 128)
    assert probs.min() >= 0 and probs.max() <= 1
    assert torch.allclose(probs.sum(dim=1), torch.ones(2, 128, 128), atol=1e-5)
    assert torch.allclose(torch.softmax(torch.zeros(2, 1, 1), 0), torch.full((2, 1, 1), 0.5))
    shifted = torch.softmax(logits + 3.0, dim=1)
    assert torch.allclose(shifted, probs, atol=1e-6)


def test_zero_upstream_gives_zero_gradients():
    cfg = NetworkConfig.gradcheck()
    model = TMVA4D(cfg).double()
    views = random_views(cfg, np.random.default_rng(3))
    model.forward_pass(views)
    grads = model.backward(torch.zeros(1, 2, 8, 8, dtype=torch.float64))
    assert all(not g.any() for g in grads.values())


def test_backward_requires_forward():
    model = TMVA4D(NetworkConfig.gradcheck())
    with pytest.raises(RuntimeError):
        model.backward(torch.zeros(1, 2, 8, 8))


def test_gradients_accumulate_linearly():
    cfg = NetworkConfig.gradcheck()
    model = TMVA4D(cfg, seed=1).double()
    rng = np.random.default_rng(4)
    va, vb = random_views(cfg, rng), random_views(cfg, rng)
    ga_up, gb_up = (torch.as_tensor(rng.standard_normal((1, 2, 8, 8))) for _ in range(2))
    model.zero_grad()
    model.forward_pass(va)
    ga = model.backward(ga_up)
    model.zero_grad()
    model.forward_pass(vb)
    gb = model.backward(gb_up)
    model.zero_grad()
    model.forward_pass(va)
    model.backward(ga_up)
    model.forward_pass(vb)
    both = model.backward(gb_up)
    for name in both:
        torch.testing.assert_close(both[name], ga[name] + gb[name], rtol=1e-12, atol=1e-14)


def test_finite_differences_all_parameters():
    cfg = NetworkConfig.gradcheck()
    model = TMVA4D(cfg, seed=4).double()
    rng = np.random.default_rng(4)
    views = random_views(cfg, rng)
    upstream = torch.as_tensor(rng.standard_normal((1, 2, 8, 8)))
    n, failures, worst = finite_difference_check(model, views, upstream)
    assert n == count_params(cfg)
    assert failures == [], f"worst relative error {worst}"


def test_init_deterministic_and_seed_dependent():
    cfg = NetworkConfig.gradcheck()
    a, b, c = TMVA4D(cfg, seed=5), TMVA4D(cfg, seed=5), TMVA4D(cfg, seed=6)
    for (n, p), q, r in zip(a.named_parameters(), b.parameters(), c.parameters()):
        assert torch.equal(p, q)
    assert not all(torch.equal(p, r) for p, r in zip(a.parameters(), c.parameters()))


def test_config_validation():
    with pytest.raises(ValueError, match="window"):
        TMVA4D(NetworkConfig(window=4))
    with pytest.raises(ValueError, match="ASPP"):
        NetworkConfig(view_shapes={v: (8, 8) for v in VIEW_IDS}, latent_size=(2, 2)).validate()
    with pytest.raises(ValueError, match="decoder"):
        NetworkConfig(latent_size=(16, 16)).validate()


def test_checkpoint_roundtrip(tmp_path):
    cfg = NetworkConfig.gradcheck()
    model = TMVA4D(cfg, seed=7)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    assert path.read_bytes()[:8] == b"TMVA4DCK"
    loaded = load_checkpoint(path, cfg)
    for (n, p), q in zip(model.state_dict().items(), loaded.state_dict().values()):
        assert torch.equal(p, q), n
    cfg2, params = read_checkpoint(path)
    assert cfg2 == cfg and len(params) == len(model.state_dict())
    save_checkpoint(loaded, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_errors(tmp_path):
    cfg = NetworkConfig.gradcheck()
    path = tmp_path / "m.ckpt"
    save_checkpoint(TMVA4D(cfg), path)
    with pytest.raises(CheckpointError, match="does not match"):
        load_checkpoint(path, NetworkConfig.tiny())
    (tmp_path / "short.ckpt").write_bytes(path.read_bytes()[:100])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "short.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"hello world" * 10)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt")


def test_to_tensors_adds_batch_axis():
    t = to_tensors({"EA": np.zeros((5, 4, 4))})
    assert t["EA"].shape == (1, 5, 4, 4) and t["EA"].dtype == torch.float32


def test_config_dict_roundtrip():
    cfg = NetworkConfig.tiny()
    assert NetworkConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.digest() == NetworkConfig.from_dict(cfg.to_dict()).digest()
