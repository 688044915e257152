import math

import numpy as np
import pytest
import torch

from oracles import GRAD_CFG, finite_difference_check, gelu, layer_norm, matvec, softmax
from retmae.core import ConfigError, DataError, Modality, ModelConfig, patchify
from retmae.masking import TokenAllocation
from retmae.model import (GLOBAL, Block, ClassificationHead, ConvNeXtSegHead, CrossAttention, Encoder,
                          LinearSegHead, MultiMAE, TokenSequence, sincos_2d)

TINY = ModelConfig(depth=2, width=16, heads=2, patch=8, image_size=32, decoder_width=16, decoder_heads=2,
                   num_layer_classes=4, seg_head_width=64)


def planes_for(cfg, n=2, seed=0):
    rng = np.random.default_rng(seed)
    s = cfg.image_size
    return {Modality.OCT: torch.rand(n, s, s, generator=torch.Generator().manual_seed(seed)),
            Modality.SLO: torch.from_numpy(rng.random((n, s, s))).float(),
            Modality.LAYERS: torch.from_numpy(rng.integers(0, cfg.num_layer_classes, (n, s, s)))}


def full_sequence(cfg, tokens):
    """TokenSequence holding a global token then every OCT patch in raster order."""
    n, t, _ = tokens.shape
    mod = torch.cat([torch.full((n, 1), GLOBAL), torch.zeros(n, t - 1, dtype=torch.long)], dim=1)
    patch = torch.cat([torch.full((n, 1), GLOBAL), torch.arange(t - 1).expand(n, -1)], dim=1)
    return TokenSequence(tokens=tokens, modality=mod, patch=patch)


# ---------------------------------------------------------------------------
# tokens


def test_sequence_length_bookkeeping():
    enc = Encoder(TINY)
    alloc = TokenAllocation.from_indices([[1, 4, 7, 9, 15], [], []])
    seq = enc.project_tokens(planes_for(TINY, 1), [alloc])
    assert len(seq) == 1 + 5
    assert seq.modality[0, 0] == GLOBAL and seq.patch[0, 0] == GLOBAL
    np.testing.assert_array_equal(seq.patch[0, 1:].numpy(), [1, 4, 7, 9, 15])


def test_global_token_unique_and_first():
    enc = Encoder(TINY)
    seq = enc(planes_for(TINY))
    assert len(seq) == 1 + 3 * TINY.num_patches
    assert ((seq.modality == GLOBAL).sum(dim=1) == 1).all()
    assert (seq.modality[:, 0] == GLOBAL).all()


def test_zero_projection_gives_positional_table():
    enc = Encoder(TINY)
    with torch.no_grad():
        for lin in enc.proj.values():
            lin.weight.zero_()
            lin.bias.zero_()
        for e in enc.modality_embed.values():
            e.zero_()
    seq = enc.project_tokens(planes_for(TINY, 1))
    table = torch.from_numpy(sincos_2d(TINY.width, TINY.grid)).float()
    for j in range(3):
        block = seq.tokens[0, 1 + j * TINY.num_patches: 1 + (j + 1) * TINY.num_patches]
        torch.testing.assert_close(block, table, rtol=0, atol=0)


def test_hand_projection_two_by_two_patch():
    cfg = ModelConfig(depth=0, width=3, heads=1, patch=2, image_size=2, decoder_width=2, decoder_heads=1,
                      seg_head_width=4, seg_cells=1, modalities=("OCT",))
    enc = Encoder(cfg)
    w = [[1.0, 2.0, 0.0, -1.0], [0.5, 0.0, 1.0, 1.0], [-2.0, 1.0, 1.0, 0.0]]
    b = [0.1, -0.2, 0.3]
    emb = [0.01, 0.02, 0.03]
    with torch.no_grad():
        enc.proj["OCT"].weight.copy_(torch.tensor(w))
        enc.proj["OCT"].bias.copy_(torch.tensor(b))
        enc.modality_embed["OCT"].copy_(torch.tensor(emb))
    x = [[0.2, 0.4], [0.6, 0.8]]
    flat = [0.2, 0.4, 0.6, 0.8]
    # the 1x1 grid's sin-cos entry: row half is empty for d=3, column half is (sin 0, cos 0)
    pos = [0.0, 0.0, 1.0]
    expected = [w[i][0] * flat[0] + w[i][1] * flat[1] + w[i][2] * flat[2] + w[i][3] * flat[3] + b[i] + pos[i]
                + emb[i] for i in range(3)]
    assert expected == pytest.approx([0.2 + 0.8 - 0.8 + 0.1 + 0.01, 0.1 + 0.6 + 0.8 - 0.2 + 0.02,
                                      -0.4 + 0.4 + 0.6 + 0.3 + 1.0 + 0.03])
    seq = enc.project_tokens({Modality.OCT: torch.tensor([x])})
    np.testing.assert_allclose(seq.tokens[0, 1].detach().numpy(), expected, rtol=1e-6)


def test_missing_modality_referenced():
    enc = Encoder(TINY)
    planes = {Modality.OCT: planes_for(TINY, 1)[Modality.OCT]}
    with pytest.raises(DataError, match="missing modality"):
        enc.project_tokens(planes, [TokenAllocation.from_indices([[0], [1], []])])


def test_layer_class_out_of_range():
    enc = Encoder(TINY)
    planes = planes_for(TINY, 1)
    planes[Modality.LAYERS] = planes[Modality.LAYERS] * 0 + TINY.num_layer_classes
    with pytest.raises(DataError, match="layer class"):
        enc(planes)


def test_sincos_table_rows_distinct():
    t = sincos_2d(16, 4)
    assert t.shape == (16, 16)
    assert len({tuple(np.round(r, 12)) for r in t}) == 16


# ---------------------------------------------------------------------------
# encoder blocks


def test_zero_depth_is_identity():
    enc = Encoder(ModelConfig(depth=0, width=16, heads=2, patch=8, image_size=32, seg_head_width=64))
    seq = enc.project_tokens(planes_for(TINY))
    assert torch.equal(enc.encode(seq).tokens, seq.tokens)


def test_encode_permutation_equivariant():
    torch.manual_seed(0)
    enc = Encoder(TINY)
    seq = enc.project_tokens(planes_for(TINY, 1))
    t = len(seq)
    perm = torch.cat([torch.zeros(1, dtype=torch.long), 1 + torch.randperm(t - 1)])
    shuffled = TokenSequence(seq.tokens[:, perm], seq.modality[:, perm], seq.patch[:, perm])
    a = enc.encode(shuffled)
    b = enc.encode(seq)
    torch.testing.assert_close(a.tokens, b.tokens[:, perm], rtol=1e-5, atol=1e-5)
    assert torch.equal(a.patch, b.patch[:, perm])


def test_single_block_hand_evaluation():
    blk = Block(2, heads=1, mlp_ratio=1.0).double()
    P = dict(
        n1=([1.0, 0.5], [0.0, 0.1]), n2=([0.8, 1.2], [0.2, -0.1]),
        qkv=([[0.5, -0.3], [0.2, 0.4], [0.1, 0.9], [-0.6, 0.3], [1.0, 0.2], [-0.4, 0.7]],
             [0.0, 0.1, -0.1, 0.05, 0.2, 0.0]),
        proj=([[0.3, -0.2], [0.6, 0.1]], [0.01, -0.02]),
        fc1=([[0.7, -0.5], [0.2, 0.9]], [0.1, -0.3]),
        fc2=([[-0.4, 0.8], [0.5, 0.3]], [0.0, 0.05]),
    )
    mods = dict(n1=blk.norm1, n2=blk.norm2, qkv=blk.attn.qkv, proj=blk.attn.proj, fc1=blk.mlp.fc1,
                fc2=blk.mlp.fc2)
    with torch.no_grad():
        for k, (w, b) in P.items():
            mods[k].weight.copy_(torch.tensor(w, dtype=torch.float64))
            mods[k].bias.copy_(torch.tensor(b, dtype=torch.float64))
    x = [[0.3, -1.2], [1.5, 0.4]]

    # spreadsheet-style evaluation, one scalar at a time
    h = [layer_norm(t, *P["n1"]) for t in x]
    qkv = [matvec(P["qkv"][0], t, P["qkv"][1]) for t in h]
    q, k, v = [r[0:2] for r in qkv], [r[2:4] for r in qkv], [r[4:6] for r in qkv]
    scale = 1 / math.sqrt(2)
    att = []
    for i in range(2):
        wts = softmax([scale * (q[i][0] * k[j][0] + q[i][1] * k[j][1]) for j in range(2)])
        att.append([wts[0] * v[0][c] + wts[1] * v[1][c] for c in range(2)])
    x1 = [[a + b for a, b in zip(xi, matvec(P["proj"][0], ai, P["proj"][1]))] for xi, ai in zip(x, att)]
    out = []
    for t in x1:
        hid = [gelu(z) for z in matvec(P["fc1"][0], layer_norm(t, *P["n2"]), P["fc1"][1])]
        out.append([a + b for a, b in zip(t, matvec(P["fc2"][0], hid, P["fc2"][1]))])

    got = blk(torch.tensor([x], dtype=torch.float64))[0].detach().numpy()
    np.testing.assert_allclose(got, out, rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------------------
# decoders


@pytest.mark.parametrize("indices", [
    [[0, 5], [3], [1, 2]],
    [[], [], []],
    [list(range(16)), [], []],
])
def test_decoder_full_grid(indices):
    model = MultiMAE(TINY)
    out = model(planes_for(TINY, 1), [TokenAllocation.from_indices(indices)])
    p2 = TINY.patch ** 2
    assert out[Modality.OCT].shape == (1, 16, p2)
    assert out[Modality.SLO].shape == (1, 16, p2)
    assert out[Modality.LAYERS].shape == (1, 16, p2, TINY.num_layer_classes)
    assert all(torch.isfinite(v).all() for v in out.values())


def test_decoder_zero_head_outputs_zero():
    model = MultiMAE(TINY)
    with torch.no_grad():
        for dec in model.decoders.values():
            dec.head.weight.zero_()
            dec.head.bias.zero_()
    for seed in range(3):
        out = model(planes_for(TINY, 2, seed))
        assert all(torch.count_nonzero(v) == 0 for v in out.values())


def test_decoder_depends_on_visible_content():
    model = MultiMAE(TINY)
    alloc = [TokenAllocation.from_indices([[0, 1, 2], [4], [9]])]
    a = model(planes_for(TINY, 1, 0), alloc)[Modality.OCT]
    b = model(planes_for(TINY, 1, 1), alloc)[Modality.OCT]
    assert not torch.allclose(a, b)


def test_unknown_decoder():
    model = MultiMAE(ModelConfig(modalities=("OCT", "LAYERS"), seg_head_width=128))
    enc = model.encoder(planes_for(model.cfg, 1))
    with pytest.raises(ConfigError):
        model.decode_modality(enc, "SLO")


def test_cross_attention_single_key_hand():
    att = CrossAttention(2, heads=1).double()
    wq, wkv, wo = [[1.0, 0.0], [0.0, 1.0]], [[0.3, 0.1], [-0.2, 0.5], [0.4, -0.6], [0.9, 0.2]], [[0.5, 1.0], [-1.0, 0.25]]
    bq, bkv, bo = [0.0, 0.0], [0.0, 0.0, 0.1, -0.1], [0.2, 0.0]
    with torch.no_grad():
        for lin, w, b in ((att.q, wq, bq), (att.kv, wkv, bkv), (att.proj, wo, bo)):
            lin.weight.copy_(torch.tensor(w, dtype=torch.float64))
            lin.bias.copy_(torch.tensor(b, dtype=torch.float64))
    query, ctx = [0.7, -0.3], [1.0, 2.0]
    # one key: the softmax weight is 1, so the output is proj(value)
    value = [0.4 * 1.0 - 0.6 * 2.0 + 0.1, 0.9 * 1.0 + 0.2 * 2.0 - 0.1]
    expected = [0.5 * value[0] + 1.0 * value[1] + 0.2, -1.0 * value[0] + 0.25 * value[1]]
    got = att(torch.tensor([[query]], dtype=torch.float64), torch.tensor([[ctx]], dtype=torch.float64))
    np.testing.assert_allclose(got[0, 0].detach().numpy(), expected, rtol=1e-12)

    # two keys: weights from the scaled dot products
    ctx2 = [[1.0, 2.0], [-1.0, 0.5]]
    q = matvec(wq, query, bq)
    kv = [matvec(wkv, c, bkv) for c in ctx2]
    w = softmax([(q[0] * r[0] + q[1] * r[1]) / math.sqrt(2) for r in kv])
    mixed = [w[0] * kv[0][2 + c] + w[1] * kv[1][2 + c] for c in range(2)]
    got2 = att(torch.tensor([[query]], dtype=torch.float64), torch.tensor([ctx2], dtype=torch.float64))
    np.testing.assert_allclose(got2[0, 0].detach().numpy(), matvec(wo, mixed, bo), rtol=1e-12)


# ---------------------------------------------------------------------------
# heads


def test_classify_zero_head_uniform():
    head = ClassificationHead(16, 5)
    with torch.no_grad():
        head.linear.weight.zero_()
    seq = Encoder(TINY)(planes_for(TINY))
    torch.testing.assert_close(head(seq), torch.full((2, 5), 0.2))


def test_classify_shift_invariance_and_normalisation():
    head = ClassificationHead(16, 4)
    seq = Encoder(TINY)(planes_for(TINY))
    p = head(seq)
    with torch.no_grad():
        head.linear.bias.add_(3.7)
    torch.testing.assert_close(head(seq), p)
    torch.testing.assert_close(p.sum(-1), torch.ones(2), atol=1e-6, rtol=0)


def test_classify_hand_softmax_excludes_global():
    head = ClassificationHead(2, 3).double()
    w, b = [[1.0, -1.0], [0.5, 0.5], [-2.0, 0.0]], [0.0, 0.1, 0.2]
    with torch.no_grad():
        head.linear.weight.copy_(torch.tensor(w, dtype=torch.float64))
        head.linear.bias.copy_(torch.tensor(b, dtype=torch.float64))
    toks = torch.tensor([[[100.0, -100.0], [1.0, 2.0], [3.0, -1.0]]], dtype=torch.float64)
    seq = full_sequence(TINY, toks)
    pooled = [2.0, 0.5]
    expected = softmax(matvec(w, pooled, b))
    np.testing.assert_allclose(head(seq)[0].detach().numpy(), expected, rtol=1e-12)


def test_classify_needs_patch_tokens():
    head = ClassificationHead(16, 2)
    enc = Encoder(TINY)
    seq = enc.project_tokens(planes_for(TINY, 1), [TokenAllocation.from_indices([[], [], []])])
    with pytest.raises(DataError):
        head(seq)


def test_convnext_zero_classifier_zero_logits():
    cfg = ModelConfig(width=16, heads=2, patch=16, image_size=128, seg_head_width=64)
    head = ConvNeXtSegHead(cfg, 3)
    with torch.no_grad():
        head.classifier.weight.zero_()
        head.classifier.bias.zero_()
    seq = Encoder(cfg, ("OCT",))({Modality.OCT: torch.rand(2, 128, 128)})
    out = head(seq)
    assert out.shape == (2, 3, 128, 128)
    assert torch.count_nonzero(out) == 0


def test_convnext_blocks_start_as_identity():
    cfg = ModelConfig(width=16, heads=2, patch=16, image_size=128, seg_head_width=64)
    head = ConvNeXtSegHead(cfg, 3)
    x = torch.randn(1, cfg.seg_channels, 8, 8)
    for blk in head.blocks:
        torch.testing.assert_close(blk(x), x)


def test_convnext_feature_map_resolution():
    cfg = ModelConfig(width=16, heads=2, patch=16, image_size=128, seg_head_width=64)
    head = ConvNeXtSegHead(cfg, 2)
    seq = Encoder(cfg, ("OCT",))({Modality.OCT: torch.rand(1, 128, 128)})
    assert head.feature_map(seq).shape == (1, 64 // 16, 32, 32)


def test_seg_head_needs_full_grid():
    cfg = ModelConfig(width=16, heads=2, patch=16, image_size=128, seg_head_width=64)
    enc = Encoder(cfg, ("OCT",))
    seq = enc.project_tokens({Modality.OCT: torch.rand(1, 128, 128)}, [TokenAllocation.from_indices([[0, 1]])])
    with pytest.raises(DataError):
        LinearSegHead(cfg, 2)(seq)


def test_linear_head_constant_field():
    cfg = ModelConfig(width=16, heads=2, patch=16, image_size=128, seg_head_width=64)
    head = LinearSegHead(cfg, 3)
    toks = torch.randn(1, 1, 16).expand(1, 1 + cfg.num_patches, 16).clone()
    out = head(full_sequence(cfg, toks))
    assert out.shape == (1, 3, 128, 128)
    ref = out[:, :, :1, :1]
    torch.testing.assert_close(out, ref.expand_as(out), atol=1e-5, rtol=1e-5)


def cubic_weights(n_in, n_out, a=-0.75):
    """Interpolation matrix of the Keys cubic kernel, half-pixel centres, border clamped."""
    def k(x):
        x = abs(x)
        if x <= 1:
            return (a + 2) * x ** 3 - (a + 3) * x ** 2 + 1
        if x < 2:
            return a * x ** 3 - 5 * a * x ** 2 + 8 * a * x - 4 * a
        return 0.0

    w = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = (i + 0.5) * n_in / n_out - 0.5
        base = math.floor(src)
        for j in range(base - 1, base + 3):
            w[i, min(max(j, 0), n_in - 1)] += k(src - j)
    return w


def test_linear_head_argmax_follows_token_pattern():
    cfg = ModelConfig(width=4, heads=1, patch=16, image_size=128, seg_head_width=64)
    head = LinearSegHead(cfg, 2)
    with torch.no_grad():
        head.linear.weight.copy_(torch.tensor([[-1.0, 0, 0, 0], [1.0, 0, 0, 0]]))
        head.linear.bias.zero_()
    pattern = np.random.default_rng(0).integers(0, 2, (cfg.grid, cfg.grid))
    toks = torch.zeros(1, 1 + cfg.num_patches, 4)
    toks[0, 1:, 0] = torch.from_numpy(2.0 * pattern.reshape(-1) - 1.0)
    logits = head(full_sequence(cfg, toks))[0].detach().numpy()

    w = cubic_weights(cfg.grid, cfg.image_size)
    field = 2.0 * pattern - 1.0
    np.testing.assert_allclose(logits[1], w @ field @ w.T, atol=1e-5)
    np.testing.assert_allclose(logits[0], -(w @ field @ w.T), atol=1e-5)

    # near each token's centre the argmax is the nearest-neighbour coarsening of the pattern
    pred = logits.argmax(0)
    nearest = np.kron(pattern, np.ones((16, 16), dtype=int))
    centre = np.zeros(16, dtype=bool)
    centre[6:10] = True
    core = np.kron(np.ones((cfg.grid, cfg.grid), dtype=bool), np.outer(centre, centre))
    np.testing.assert_array_equal(pred[core], nearest[core])


# ---------------------------------------------------------------------------
# gradients


def test_gradients_match_finite_differences():
    errors = finite_difference_check(GRAD_CFG, eps=1e-4, per_tensor=6)
    worst = max(errors, key=errors.get)
    assert errors[worst] < 1e-4, f"{worst}: {errors[worst]:.3e}"


def test_forward_deterministic():
    model = MultiMAE(TINY)
    planes = planes_for(TINY)
    a, b = model(planes), model(planes)
    assert all(torch.equal(a[m], b[m]) for m in a)
    p16 = patchify(planes[Modality.OCT], 8)
    assert p16.shape == (2, 16, 64)
