"""Model-level behavior: rotary positions, gating, blocks, forward
invariants, vision-encoder mode, checkpoint format."""

import numpy as np
import pytest

import capvit.tensor as T
from capvit.imaging import ImageSample, PatchGrid, patchify
from capvit.model import (ModelConfig, ModelParameters, default_mrope_sections,
                          encode_image, forward, load_checkpoint, patch_embed,
                          rope_cos_sin, save_checkpoint, block_forward,
                          normalize_patches)
from capvit.packing import build_sequence, pack, prefix_lm_mask
from conftest import TOK, finite_diff, grad_close, random_pack, tiny_config


def params64(cfg, seed=0):
    return ModelParameters(cfg, seed=seed, dtype=np.float64)


# ---------------------------------------------------------------------------
# config validation
# ---------------------------------------------------------------------------

def test_config_rejects_bad_shapes():
    with pytest.raises(ValueError):
        ModelConfig(dim=30, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(mrope_sections=(1, 1, 1))
    with pytest.raises(ValueError):
        ModelConfig(drop_path_rate=1.0)
    with pytest.raises(ValueError):
        ModelConfig(layer_scale_init=0.0)


def test_config_published_large_model_validates():
    cfg = ModelConfig(layers=24, dim=1024, heads=16, ffn_width=2816,
                      vocab=151936, patch_size=16, rope_theta=10000.0,
                      layer_scale_init=0.1, drop_path_rate=0.1,
                      max_tokens=16384)
    assert cfg.head_dim == 64
    assert sum(cfg.mrope_sections) == 32


def test_default_sections_proportions():
    assert default_mrope_sections(32) == (4, 6, 6)
    assert default_mrope_sections(64) == (8, 12, 12)


def test_gate_bias_initialized_to_zero():
    p = ModelParameters(tiny_config(), seed=3)
    assert (p["blocks.0.attn.gate_b"].data == 0).all()
    assert (p["blocks.1.ls_attn"].data == 0.1).all()


# ---------------------------------------------------------------------------
# patch embedding
# ---------------------------------------------------------------------------

def test_patch_embed_zero_patches_give_bias(rng):
    w = T.Tensor(rng.standard_normal((48, 8)), requires_grad=True)
    b = T.Tensor(rng.standard_normal(8), requires_grad=True)
    out = patch_embed(T.Tensor(np.zeros((3, 48))), w, b)
    assert np.allclose(out.data, np.tile(b.data, (3, 1)))


def test_patch_embed_one_hot_selects_column(rng):
    w = T.Tensor(rng.standard_normal((48, 8)))
    b = T.Tensor(rng.standard_normal(8))
    x = np.zeros((1, 48))
    x[0, 17] = 1.0
    out = patch_embed(T.Tensor(x), w, b)
    assert np.allclose(out.data[0], w.data[17] + b.data)


def test_patch_embed_matches_unfold_reference(rng):
    cfg = tiny_config()
    p = params64(cfg, seed=5)
    img = rng.random((8, 8, 3))
    patches, grid = patchify(img, cfg.patch_size)
    norm = normalize_patches(patches, cfg, np.float64)
    out = patch_embed(T.Tensor(norm), p["patch_proj.w"], p["patch_proj.b"])
    # independent unfold-then-matmul composition
    ref = np.zeros((grid.tokens, cfg.dim))
    for r in range(grid.rows):
        for c in range(grid.cols):
            blk = img[r * 4:(r + 1) * 4, c * 4:(c + 1) * 4, :]
            flat = ((blk - 0.5) / 0.5).reshape(-1)
            ref[r * grid.cols + c] = flat @ p["patch_proj.w"].data + p["patch_proj.b"].data
    assert np.abs(out.data - ref).max() < 1e-12


def test_patch_embed_width_mismatch(rng):
    w = T.Tensor(rng.standard_normal((48, 8)))
    with pytest.raises(ValueError, match="match"):
        patch_embed(T.Tensor(np.zeros((2, 50))), w, T.Tensor(np.zeros(8)))


# ---------------------------------------------------------------------------
# rotary positions
# ---------------------------------------------------------------------------

def test_rope_zero_coordinates_identity(rng):
    cfg = tiny_config()
    pos = np.zeros((5, 3), dtype=np.int64)
    cos, sin = rope_cos_sin(pos, cfg, np.float64)
    x = T.Tensor(rng.standard_normal((2, 5, cfg.head_dim)))
    out = T.rope_rotate(x, cos, sin)
    assert (out.data == x.data).all()


def test_rope_preserves_pair_norms(rng):
    cfg = tiny_config()
    pos = rng.integers(0, 50, size=(7, 3))
    cos, sin = rope_cos_sin(pos, cfg, np.float64)
    x = rng.standard_normal((cfg.heads, 7, cfg.head_dim))
    out = T.rope_rotate(T.Tensor(x), cos, sin).data
    for arr in (x, out):
        pass
    norms_in = x[..., 0::2] ** 2 + x[..., 1::2] ** 2
    norms_out = out[..., 0::2] ** 2 + out[..., 1::2] ** 2
    assert np.abs(norms_in - norms_out).max() < 1e-12


def test_rope_text_relative_shift_invariance(rng):
    cfg = tiny_config()
    q = rng.standard_normal((1, 1, cfg.head_dim))
    k = rng.standard_normal((1, 1, cfg.head_dim))

    def dot(m, n):
        pm = np.full((1, 3), m, dtype=np.int64)
        pn = np.full((1, 3), n, dtype=np.int64)
        cm, sm = rope_cos_sin(pm, cfg, np.float64)
        cn, sn = rope_cos_sin(pn, cfg, np.float64)
        qm = T.rope_rotate(T.Tensor(q), cm, sm).data
        kn = T.rope_rotate(T.Tensor(k), cn, sn).data
        return float((qm * kn).sum())

    base = dot(3, 7)
    for shift in (1, 11, 100):
        assert abs(dot(3 + shift, 7 + shift) - base) < 1e-10


def test_rope_distinguishes_rows_from_columns(rng):
    cfg = tiny_config()
    q = rng.standard_normal((1, 1, cfg.head_dim))
    k = rng.standard_normal((1, 1, cfg.head_dim))

    def dot(pos_k):
        pq = np.zeros((1, 3), dtype=np.int64)
        pk = np.array([pos_k], dtype=np.int64)
        cq, sq = rope_cos_sin(pq, cfg, np.float64)
        ck, sk = rope_cos_sin(pk, cfg, np.float64)
        qm = T.rope_rotate(T.Tensor(q), cq, sq).data
        kn = T.rope_rotate(T.Tensor(k), ck, sk).data
        return float((qm * kn).sum())

    assert abs(dot((0, 1, 0)) - dot((0, 0, 1))) > 1e-8


# ---------------------------------------------------------------------------
# gate limits
# ---------------------------------------------------------------------------

def build_image_pack(rng, cfg, rows=2, cols=2, text="ab"):
    patches = rng.random((rows * cols, 3 * cfg.patch_size ** 2))
    seq = build_sequence(patches, PatchGrid(rows, cols, cfg.patch_size),
                         TOK.encode(text), eos_id=TOK.eos_id)
    return pack([seq], len(seq), TOK.pad_id)[0]


def test_gate_zero_weights_halve_attention(rng):
    cfg = tiny_config()
    packed = build_image_pack(rng, cfg)
    gated = params64(cfg, seed=2)
    for i in range(cfg.layers):
        gated[f"blocks.{i}.attn.gate_w"].data[:] = 0.0
        gated[f"blocks.{i}.attn.gate_b"].data[:] = 0.0
    ungated = params64(cfg, seed=2)
    ungated.cfg = ModelConfig(**{**vars(cfg), "gate_enabled": False})
    for (n1, p1), (n2, p2) in zip(gated.named(), ungated.named()):
        p2.data = p1.data.copy()
    # compare one block's attention branch: gate 0.5 == half of ungated A
    x = T.Tensor(rng.standard_normal((len(packed), cfg.dim)))
    mask = prefix_lm_mask(packed)
    cos, sin = rope_cos_sin(packed.positions, cfg, np.float64)
    from capvit.model import gated_attention
    h = T.Tensor(x.data.copy())
    a_gated = gated_attention(h, gated, 0, mask, cos, sin)
    a_plain = gated_attention(h, ungated, 0, mask, cos, sin)
    assert np.abs(a_gated.data - 0.5 * a_plain.data).max() == 0.0


def test_gate_saturated_bias_reproduces_ungated(rng):
    cfg = tiny_config()
    packed = build_image_pack(rng, cfg)
    p = params64(cfg, seed=2)
    for i in range(cfg.layers):
        p[f"blocks.{i}.attn.gate_w"].data[:] = 0.0
        p[f"blocks.{i}.attn.gate_b"].data[:] = 40.0
    res_gated = forward(p, packed)
    p.cfg = ModelConfig(**{**vars(cfg), "gate_enabled": False})
    res_plain = forward(p, packed)
    assert np.abs(res_gated.logits.data - res_plain.logits.data).max() < 1e-10


def test_gate_hand_computation_single_head(rng):
    """n=2 single-head attention through the gate, against scalar math."""
    cfg = ModelConfig(layers=1, dim=4, heads=1, ffn_width=8, vocab=258,
                      patch_size=2, mrope_sections=(2, 0, 0))
    p = params64(cfg, seed=0)
    rngl = np.random.default_rng(11)
    for name in ("wq", "wk", "wv", "wo", "gate_w"):
        p[f"blocks.0.attn.{name}"].data = rngl.standard_normal((4, 4))
    for name in ("bq", "bk", "bv", "bo", "gate_b"):
        p[f"blocks.0.attn.{name}"].data = rngl.standard_normal(4)
    x = rngl.standard_normal((2, 4))
    mask = np.ones((2, 2), dtype=bool)
    pos = np.zeros((2, 3), dtype=np.int64)  # zero coords: no rotation
    cos, sin = rope_cos_sin(pos, cfg, np.float64)
    from capvit.model import gated_attention
    out = gated_attention(T.Tensor(x), p, 0, mask, cos, sin)

    q = x @ p["blocks.0.attn.wq"].data + p["blocks.0.attn.bq"].data
    k = x @ p["blocks.0.attn.wk"].data + p["blocks.0.attn.bk"].data
    v = x @ p["blocks.0.attn.wv"].data + p["blocks.0.attn.bv"].data
    scores = q @ k.T / np.sqrt(4)
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    probs = e / e.sum(axis=1, keepdims=True)
    a = probs @ v @ p["blocks.0.attn.wo"].data + p["blocks.0.attn.bo"].data
    g = 1 / (1 + np.exp(-(x @ p["blocks.0.attn.gate_w"].data
                          + p["blocks.0.attn.gate_b"].data)))
    assert np.abs(out.data - g * a).max() < 1e-12


# ---------------------------------------------------------------------------
# block forward
# ---------------------------------------------------------------------------

def test_block_eval_ignores_drop_path_rate(rng):
    cfg = tiny_config(drop_path_rate=0.2)
    cfg0 = tiny_config(drop_path_rate=0.0)
    p = params64(cfg, seed=4)
    p0 = params64(cfg0, seed=4)
    x = T.Tensor(rng.standard_normal((6, cfg.dim)))
    mask = np.ones((6, 6), dtype=bool)
    pos = np.zeros((6, 3), dtype=np.int64)
    cos, sin = rope_cos_sin(pos, cfg, np.float64)
    out = block_forward(T.Tensor(x.data.copy()), p, 0, mask, cos, sin)
    out0 = block_forward(T.Tensor(x.data.copy()), p0, 0, mask, cos, sin)
    assert (out.data == out0.data).all()


def test_block_zero_layer_scale_is_identity(rng):
    cfg = tiny_config(layer_scale_init=1e-9)
    p = params64(cfg, seed=4)
    p["blocks.0.ls_attn"].data[:] = 0.0
    p["blocks.0.ls_ffn"].data[:] = 0.0
    x = rng.standard_normal((5, cfg.dim))
    mask = np.ones((5, 5), dtype=bool)
    pos = np.zeros((5, 3), dtype=np.int64)
    cos, sin = rope_cos_sin(pos, cfg, np.float64)
    out = block_forward(T.Tensor(x.copy()), p, 0, mask, cos, sin)
    assert (out.data == x).all()


def test_block_drop_path_expectation_matches_eval(rng):
    cfg = tiny_config(layers=1, dim=8, heads=2, ffn_width=8, patch_size=2,
                      drop_path_rate=0.3, mrope_sections=(0, 1, 1))
    p = params64(cfg, seed=4)
    x = rng.standard_normal((3, cfg.dim))
    mask = np.ones((3, 3), dtype=bool)
    pos = np.zeros((3, 3), dtype=np.int64)
    cos, sin = rope_cos_sin(pos, cfg, np.float64)
    ev = block_forward(T.Tensor(x.copy()), p, 0, mask, cos, sin).data
    draws = 10_000
    acc = np.zeros_like(ev)
    branch_rng = np.random.default_rng(99)
    samples = np.zeros((draws,) + ev.shape)
    for i in range(draws):
        samples[i] = block_forward(T.Tensor(x.copy()), p, 0, mask, cos, sin,
                                   train_mode=True, rng=branch_rng).data
    mean = samples.mean(axis=0)
    sem = samples.std(axis=0) / np.sqrt(draws)
    assert (np.abs(mean - ev) <= 3 * sem + 1e-12).mean() > 0.95


# ---------------------------------------------------------------------------
# forward invariants
# ---------------------------------------------------------------------------

def test_forward_pad_tail_does_not_change_logits(rng):
    cfg = tiny_config()
    p = params64(cfg, seed=6)
    patches = rng.random((4, 3 * cfg.patch_size ** 2))
    seq = build_sequence(patches, PatchGrid(2, 2, cfg.patch_size),
                         TOK.encode("ok"), eos_id=TOK.eos_id)
    short = pack([seq], len(seq) + 3, TOK.pad_id)[0]
    long = pack([seq], len(seq) + 11, TOK.pad_id)[0]
    r1 = forward(p, short).logits.data[:len(seq)]
    r2 = forward(p, long).logits.data[:len(seq)]
    assert np.abs(r1 - r2).max() < 1e-12


def test_packed_invariance_small(rng):
    cfg = tiny_config()
    p = params64(cfg, seed=7)
    packs, seqs = random_pack(rng, 3, 80)
    solo = {}
    for s in seqs:
        res = forward(p, s)
        solo[s.refs[0]] = res.logits.data
    for packed in packs:
        res = forward(p, packed).logits.data
        for (start, end), ref in zip(packed.sample_boundaries, packed.refs):
            assert np.abs(res[start:end] - solo[ref]).max() < 1e-10


def test_causality_and_isolation(rng):
    cfg = tiny_config()
    p = params64(cfg, seed=8)
    a = build_image_pack(rng, cfg, text="hello")
    b_patches = rng.random((4, 3 * cfg.patch_size ** 2))
    b = build_sequence(b_patches, PatchGrid(2, 2, cfg.patch_size),
                       TOK.encode("yo"), eos_id=TOK.eos_id, ref="b")
    a_seq = build_sequence(a.patches, PatchGrid(2, 2, cfg.patch_size),
                           TOK.encode("hello"), eos_id=TOK.eos_id, ref="a")
    packed = pack([a_seq, b], len(a_seq) + len(b) + 2, TOK.pad_id)[0]
    base = forward(p, packed).logits.data.copy()

    # perturb a middle text token of sample a
    t_idx = 6  # image 0..3, text starts at 4
    mutated_ids = packed.token_ids.copy()
    mutated_ids[t_idx] = (mutated_ids[t_idx] + 1) % 256
    import dataclasses
    mut = dataclasses.replace(packed, token_ids=mutated_ids)
    out = forward(p, mut).logits.data
    assert np.abs(out[:t_idx] - base[:t_idx]).max() < 1e-12
    b_start = packed.sample_boundaries[1][0]
    assert np.abs(out[b_start:] - base[b_start:]).max() < 1e-12
    assert np.abs(out[t_idx:packed.sample_boundaries[0][1]]
                  - base[t_idx:packed.sample_boundaries[0][1]]).max() > 0

    # perturb an image pixel of sample b: sample a logits unchanged
    mut_patches = packed.patches.copy()
    b_patch_row = packed.token_ids[b_start]
    mut_patches[b_patch_row, 0] += 0.25
    mut2 = dataclasses.replace(packed, patches=mut_patches)
    out2 = forward(p, mut2).logits.data
    a_start, a_end = packed.sample_boundaries[0]
    assert np.abs(out2[a_start:a_end] - base[a_start:a_end]).max() < 1e-12
    assert np.abs(out2[b_start:] - base[b_start:]).max() > 0


def test_forward_rejects_over_budget(rng):
    cfg = tiny_config(max_tokens=8)
    p = ModelParameters(cfg, seed=0)
    packed = build_image_pack(rng, cfg, rows=3, cols=3, text="")
    with pytest.raises(ValueError, match="budget"):
        forward(p, packed)


def test_eval_forward_deterministic(rng):
    cfg = tiny_config()
    p = ModelParameters(cfg, seed=9)
    packed = build_image_pack(rng, cfg)
    r1 = forward(p, packed).logits.data
    r2 = forward(p, packed).logits.data
    assert (r1 == r2).all()


# ---------------------------------------------------------------------------
# vision-encoder mode
# ---------------------------------------------------------------------------

def test_encode_image_equals_forward_hidden(rng):
    cfg = tiny_config()
    p = ModelParameters(cfg, seed=10)
    img = rng.random((8, 12, 3))
    sample = ImageSample(pixels=img, caption="", id="x")
    feats = encode_image(sample, p)
    patches, grid = patchify(img, cfg.patch_size)
    seq = build_sequence(patches, grid, [], eos_id=TOK.eos_id)
    res = forward(p, seq)
    assert (feats == res.hidden.data).all()
    assert feats.shape == (grid.tokens, cfg.dim)


def test_encode_image_permutation_covariant(rng):
    cfg = tiny_config()
    p = params64(cfg, seed=11)
    patches = rng.random((6, 3 * cfg.patch_size ** 2))
    grid = PatchGrid(2, 3, cfg.patch_size)
    seq = build_sequence(patches, grid, [], eos_id=TOK.eos_id)
    base = forward(p, seq).hidden.data
    perm = np.array([3, 1, 4, 0, 5, 2])
    import dataclasses
    shuffled = dataclasses.replace(
        seq, token_ids=np.arange(6),
        positions=seq.positions[perm],
        patches=patches[perm])
    out = forward(p, shuffled).hidden.data
    assert np.abs(out - base[perm]).max() < 1e-10


def test_encode_image_features_nondegenerate(rng):
    cfg = tiny_config()
    p = ModelParameters(cfg, seed=12)
    sample = ImageSample(pixels=rng.random((12, 8, 3)), caption="", id="x")
    feats = encode_image(sample, p)
    assert np.isfinite(feats).all()
    assert feats.std(axis=0).min() > 0


# ---------------------------------------------------------------------------
# checkpoints / feature dumps
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, rng):
    cfg = tiny_config()
    p = ModelParameters(cfg, seed=13)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, p, {"mode": "fixed", "side": 64, "patch_size": 4},
                    extra={"stage": "s1", "step": 7})
    loaded, preprocess, extra = load_checkpoint(path)
    assert preprocess["side"] == 64 and extra["step"] == 7
    assert loaded.cfg == cfg
    for (n1, t1), (n2, t2) in zip(p.named(), loaded.named()):
        assert n1 == n2
        assert (t1.data == t2.data).all()
    packed = build_image_pack(rng, cfg)
    assert (forward(p, packed).logits.data
            == forward(loaded, packed).logits.data).all()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(path)


def test_feature_dump_round_trip(tmp_path, rng):
    from capvit.model import load_features, save_features
    arr = rng.random((5, 9)).astype(np.float32)
    path = tmp_path / "f.bin"
    save_features(path, arr)
    assert (load_features(path) == arr).all()


# ---------------------------------------------------------------------------
# full-model gradient check (small; the acceptance suite runs the big one)
# ---------------------------------------------------------------------------

def test_model_gradients_match_finite_differences(rng):
    cfg = tiny_config()
    p = params64(cfg, seed=14)
    packed = build_image_pack(rng, cfg, text="hi")

    def loss_value():
        with T.no_grad():
            res = forward(p, packed)
        rows = res.logits.data[packed.loss_mask]
        t = packed.targets()[packed.loss_mask]
        m = rows.max(axis=1, keepdims=True)
        z = rows - m
        return float((np.log(np.exp(z).sum(axis=1))
                      - z[np.arange(len(t)), t]).mean())

    res = forward(p, packed)
    loss = T.cross_entropy_masked(res.logits, packed.targets(), packed.loss_mask)
    p.zero_grads()
    loss.backward()
    checked = 0
    for name in ("patch_proj.w", "tok_emb", "blocks.0.attn.gate_w",
                 "blocks.0.attn.gate_b", "blocks.0.ls_attn", "blocks.1.attn.wq",
                 "blocks.1.ffn.w_gate", "final_ln.g", "lm_head.w"):
        param = p[name]
        assert param.grad is not None, name
        for index in rng.choice(param.size, size=3, replace=False):
            num = finite_diff(loss_value, param, int(index))
            assert grad_close(param.grad.flat[index], num, rtol=1e-4), \
                (name, index, param.grad.flat[index], num)
            checked += 1
    assert checked >= 27
