import numpy as np
import pytest

from pathalign import encoders as E
from pathalign import nn
from pathalign import tensor as T
from pathalign.errors import ConfigError, ContractError, DimensionError
from pathalign.tensor import Tensor


def small_cfg(**kw):
    defaults = dict(image_side=32, embed_patch=8, d_model=8, n_layers=2, n_heads=2,
                    vocab_size=12, max_report_len=16)
    defaults.update(kw)
    return E.EncoderConfig(**defaults)


def test_config_divisibility_checks():
    with pytest.raises(ConfigError):
        E.EncoderConfig(image_side=30, embed_patch=8)
    with pytest.raises(ConfigError):
        E.EncoderConfig(d_model=30, n_heads=4)


def test_image_local_token_count():
    cfg = small_cfg()
    params = E.init_image_encoder(np.random.default_rng(0), cfg)
    enc = E.encode_image(np.zeros((32, 32)), cfg, params)
    assert enc.local.shape == (16, cfg.d_model)
    assert enc.global_rep.shape == (cfg.d_model,)


def test_image_encoding_deterministic():
    cfg = small_cfg()
    params = E.init_image_encoder(np.random.default_rng(1), cfg)
    img = np.random.default_rng(2).uniform(size=(32, 32))
    a = E.encode_image(img, cfg, params)
    b = E.encode_image(img.copy(), cfg, params)
    np.testing.assert_array_equal(a.local.data, b.local.data)
    np.testing.assert_array_equal(a.global_rep.data, b.global_rep.data)


def test_image_global_is_mean_of_locals():
    cfg = small_cfg()
    params = E.init_image_encoder(np.random.default_rng(3), cfg)
    enc = E.encode_image(np.random.default_rng(4).uniform(size=(32, 32)), cfg, params)
    assert np.abs(enc.global_rep.data - enc.local.data.mean(axis=0)).max() < 1e-12


def test_image_wrong_size_rejected():
    cfg = small_cfg()
    params = E.init_image_encoder(np.random.default_rng(5), cfg)
    with pytest.raises(DimensionError):
        E.encode_image(np.zeros((16, 16)), cfg, params)


def _identity_initialize(params):
    """Zero the residual branches so each block passes tokens through."""
    for blk in params.blocks:
        blk.attn.out.w.data[:] = 0.0
        blk.attn.out.b.data[:] = 0.0
        blk.mlp.fc2.w.data[:] = 0.0
        blk.mlp.fc2.b.data[:] = 0.0


def test_patch_permutation_is_local_with_identity_layers():
    cfg = small_cfg()
    rng = np.random.default_rng(6)
    params = E.init_image_encoder(rng, cfg)
    params.pos.data[:] = 0.0
    _identity_initialize(params)

    img = rng.uniform(size=(32, 32)).copy()
    swapped = img.copy()
    # swap patch (0,0) with patch (1,2): rows 0..8 cols 0..8 <-> rows 8..16 cols 16..24
    swapped[0:8, 0:8], swapped[8:16, 16:24] = img[8:16, 16:24].copy(), img[0:8, 0:8].copy()

    a = E.encode_image(img, cfg, params).local.data
    b = E.encode_image(swapped, cfg, params).local.data
    moved = {0, 1 * 4 + 2}
    for tok in range(16):
        if tok in moved:
            assert np.abs(a[tok] - b[tok]).max() > 1e-6
        else:
            np.testing.assert_allclose(a[tok], b[tok], atol=1e-12)

    # direct patch-embedding oracle: layer-normed linear embedding of each patch
    patches = img.reshape(4, 8, 4, 8).transpose(0, 2, 1, 3).reshape(16, 64)
    raw = patches @ params.patch.w.data + params.patch.b.data
    mu = raw.mean(axis=1, keepdims=True)
    var = ((raw - mu) ** 2).mean(axis=1, keepdims=True)
    oracle = (raw - mu) / np.sqrt(var + 1e-5)
    np.testing.assert_allclose(a, oracle, atol=1e-10)


def test_batched_image_encoding_matches_single():
    cfg = small_cfg()
    params = E.init_image_encoder(np.random.default_rng(7), cfg)
    batch = np.random.default_rng(8).uniform(size=(3, 32, 32))
    locals_, globals_ = E.encode_images(batch, cfg, params)
    for i in range(3):
        single = E.encode_image(batch[i], cfg, params)
        np.testing.assert_allclose(locals_.data[i], single.local.data, atol=1e-12)
        np.testing.assert_allclose(globals_.data[i], single.global_rep.data, atol=1e-12)


def test_report_requires_content_tokens():
    cfg = small_cfg()
    params = E.init_text_encoder(np.random.default_rng(9), cfg)
    with pytest.raises(ContractError):
        E.encode_report([0], [], cfg, params)


def test_report_deterministic():
    cfg = small_cfg()
    params = E.init_text_encoder(np.random.default_rng(10), cfg)
    ids, spans = [0, 3, 4, 5, 6], [(1, 3), (3, 5)]
    a = E.encode_report(ids, spans, cfg, params)
    b = E.encode_report(list(ids), list(spans), cfg, params)
    np.testing.assert_array_equal(a.local.data, b.local.data)
    np.testing.assert_array_equal(a.cls_attention.data, b.cls_attention.data)


def test_report_global_is_cls_row():
    cfg = small_cfg()
    params = E.init_text_encoder(np.random.default_rng(11), cfg)
    enc = E.encode_report([0, 2, 3, 7], [(1, 4)], cfg, params)
    np.testing.assert_array_equal(enc.global_rep.data, enc.local.data[0])


def test_report_span_validation():
    cfg = small_cfg()
    params = E.init_text_encoder(np.random.default_rng(12), cfg)
    ids = [0, 2, 3, 7]
    with pytest.raises(ContractError):
        E.encode_report(ids, [(1, 5)], cfg, params)        # out of range
    with pytest.raises(ContractError):
        E.encode_report(ids, [(0, 4)], cfg, params)        # includes CLS
    with pytest.raises(ContractError):
        E.encode_report(ids, [(1, 3), (2, 4)], cfg, params)  # overlap
    with pytest.raises(ContractError):
        E.encode_report(ids, [(1, 3)], cfg, params)        # token 3 uncovered
    with pytest.raises(ContractError):
        E.encode_report([0, 2, 99], [(1, 3)], cfg, params)  # id out of vocab


def test_cls_attention_matches_hand_computed_single_head():
    cfg = small_cfg(d_model=2, n_layers=1, n_heads=1, vocab_size=4, max_report_len=4)
    params = E.init_text_encoder(np.random.default_rng(13), cfg)
    # hand-set everything so the oracle below is a pencil-and-paper computation
    params.tok_emb.data[:] = [[0.5, -0.2], [1.0, 0.3], [-0.4, 0.8], [0.1, 0.9]]
    params.pos.data[:] = [[0.0, 0.1], [0.2, 0.0], [-0.1, 0.3], [0.1, -0.2]]
    blk = params.blocks[0]
    blk.attn.q.w.data[:] = [[1.0, 0.0], [0.0, 1.0]]
    blk.attn.k.w.data[:] = [[0.0, 1.0], [1.0, 0.0]]
    ids = [0, 1, 2, 3]

    enc = E.encode_report(ids, [(1, 4)], cfg, params)

    x = params.tok_emb.data[ids] + params.pos.data[:4]
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    h = (x - mu) / np.sqrt(var + 1e-5)  # ln gain 1, bias 0
    q = h @ blk.attn.q.w.data + blk.attn.q.b.data
    k = h @ blk.attn.k.w.data + blk.attn.k.b.data
    scores = (q @ k.T) / np.sqrt(2.0)
    row = np.exp(scores[0] - scores[0].max())
    row /= row.sum()
    np.testing.assert_allclose(enc.cls_attention.data, row, atol=1e-12)


def test_cls_attention_renormalizes_over_content_tokens():
    cfg = small_cfg()
    params = E.init_text_encoder(np.random.default_rng(14), cfg)
    enc = E.encode_report([0, 2, 3, 7, 8], [(1, 5)], cfg, params)
    att = enc.cls_attention.data
    assert abs(att.sum() - 1.0) < 1e-12           # raw softmax row
    renorm = att[1:] / att[1:].sum()
    assert abs(renorm.sum() - 1.0) < 1e-12


def test_output_shapes_depend_only_on_config():
    cfg = small_cfg()
    ip = E.init_image_encoder(np.random.default_rng(15), cfg)
    tp = E.init_text_encoder(np.random.default_rng(16), cfg)
    shapes = set()
    for seed in range(3):
        r = np.random.default_rng(seed)
        img = E.encode_image(r.uniform(size=(32, 32)), cfg, ip)
        rep = E.encode_report([0, 1 + seed, 5, 7], [(1, 4)], cfg, tp)
        shapes.add((img.local.shape, img.global_rep.shape, rep.local.shape))
    assert len(shapes) == 1


def test_gradient_reaches_every_encoder_parameter():
    cfg = small_cfg()
    ip = E.init_image_encoder(np.random.default_rng(17), cfg)
    tp = E.init_text_encoder(np.random.default_rng(18), cfg)
    r = np.random.default_rng(19)
    img = E.encode_image(r.uniform(size=(32, 32)), cfg, ip)
    rep = E.encode_report([0, 2, 3, 7, 9, 1], [(1, 4), (4, 6)], cfg, tp)
    coeff_i = Tensor(r.normal(size=img.local.shape))
    coeff_t = Tensor(r.normal(size=rep.local.shape))
    loss = T.tsum(T.mul(img.local, coeff_i)) + T.tsum(T.mul(rep.local, coeff_t)) \
        + T.tsum(rep.cls_attention * Tensor(r.normal(size=rep.cls_attention.shape)))
    loss.backward()
    for name, p in list(nn.named_tensors(ip, "img")) + list(nn.named_tensors(tp, "txt")):
        assert p.grad is not None and not np.all(p.grad == 0.0), name


def test_encoder_grad_check():
    cfg = small_cfg(d_model=4, n_layers=1, n_heads=2, vocab_size=6, max_report_len=6)
    tp = E.init_text_encoder(np.random.default_rng(20), cfg)
    coeff = Tensor(np.random.default_rng(21).normal(size=(4,)))
    params = nn.trainable(tp)

    def f():
        rep = E.encode_report([0, 1, 2, 3], [(1, 4)], cfg, tp)
        return T.tsum(T.mul(rep.global_rep, coeff)) + T.tsum(rep.cls_attention * coeff)

    assert T.grad_check(f, params) < 1e-6
