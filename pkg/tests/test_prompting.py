import numpy as np
import pytest

from dualprompt import tensor_core as tc
from dualprompt.backbone import Backbone, BackboneConfig
from dualprompt.prompting import (PRE_T, PRO_T, AttachConfig, ConfigError, EPromptSet, GPrompt, attach,
                                  cosine_distances, export_prompt_vectors, match_loss, prompt_pre_t,
                                  prompt_pro_t, read_prompt_vectors, select_expert)
from dualprompt.tensor_core import Tensor

from helpers import TINY, images, tiny_backbone


def tokens(b, l, d=TINY.embed_dim, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=(b, l, d)))


def prompt(lp, d=TINY.embed_dim, seed=1, grad=True):
    return Tensor(np.random.default_rng(seed).normal(size=(lp, d)), requires_grad=grad)


# ---------------------------------------------------------------- prompting functions

@pytest.mark.parametrize("fn", [prompt_pro_t, prompt_pre_t])
def test_empty_prompt_is_plain_msa(fn):
    bb, h = tiny_backbone(), tokens(2, 5)
    out = fn(bb, Tensor(np.zeros((0, TINY.embed_dim))), h, 1)
    np.testing.assert_allclose(out.data, bb.msa(h, h, h, 1).data, atol=1e-12)


def test_output_lengths():
    bb = Backbone.init(BackboneConfig(num_layers=1), 0)
    bb.freeze()
    h = tokens(1, 17, 64)
    assert prompt_pro_t(bb, prompt(5, 64), h, 1).shape == (1, 22, 64)
    assert prompt_pre_t(bb, prompt(20, 64), h, 1).shape == (1, 17, 64)


def test_unbatched_inputs_work():
    bb = tiny_backbone()
    h = Tensor(np.random.default_rng(0).normal(size=(5, TINY.embed_dim)))
    assert prompt_pro_t(bb, prompt(3), h, 1).shape == (8, TINY.embed_dim)
    assert prompt_pre_t(bb, prompt(4), h, 1).shape == (5, TINY.embed_dim)


@pytest.mark.parametrize("fn,lp", [(prompt_pro_t, 3), (prompt_pre_t, 4)])
def test_gradient_reaches_prompt_not_frozen_weights(fn, lp):
    bb, p = tiny_backbone(), prompt(lp)
    with tc.Tape() as tape:
        out = fn(bb, p, tokens(2, 5), 1)
        tape.backward(tc.sum_all(tc.mul(out, tokens(*out.shape[:2], seed=5))))
    assert p.grad is not None and np.abs(p.grad).max() > 0
    assert all(w.grad is None for w in bb.params.values())


def test_width_mismatch():
    with pytest.raises(tc.ShapeError):
        prompt_pro_t(tiny_backbone(), prompt(2, d=3), tokens(1, 5), 1)


def test_odd_prefix_rejected():
    with pytest.raises(ConfigError):
        prompt_pre_t(tiny_backbone(), prompt(3), tokens(1, 5), 1)
    with pytest.raises(ConfigError):
        AttachConfig(variant=PRE_T, g_length=5)


def test_prefix_value_dilution_hand_oracle():
    # one head, zero query weights (uniform attention), identity value and output maps
    d = 4
    bb = Backbone.init(BackboneConfig(num_layers=1, embed_dim=d, num_heads=1, image_shape=(2, 2),
                                      patch_shape=(1, 1)), 0)
    w = np.zeros((d, 3 * d))
    w[:, 2 * d:] = np.eye(d)
    bb.params["blocks.1.qkv.w"].data[:] = w
    bb.params["blocks.1.proj.w"].data[:] = np.eye(d)
    bb.freeze()
    L, lp = 5, 6
    h = Tensor(np.random.default_rng(0).normal(size=(L, d)))
    p = Tensor(np.vstack([np.random.default_rng(1).normal(size=(lp // 2, d)), np.zeros((lp // 2, d))]))
    out = prompt_pre_t(bb, p, h, 1).data
    plain = bb.msa(h, h, h, 1).data
    expected = h.data.sum(axis=0) / (L + lp // 2)
    np.testing.assert_allclose(out, np.broadcast_to(expected, (L, d)), atol=1e-14)
    np.testing.assert_allclose(out, plain * L / (L + lp // 2), atol=1e-14)


# ---------------------------------------------------------------- attachment

def test_layer_map_examples():
    assert AttachConfig((1, 2), (3, 5)).layer_map(6) == {1: ("G",), 2: ("G",), 3: ("E",), 4: ("E",),
                                                        5: ("E",), 6: ()}
    single = AttachConfig((2, 2), (5, 5)).layer_map(6)
    assert sum(bool(v) for v in single.values()) == 2
    both = AttachConfig((1, 3), (2, 4)).layer_map(6)
    assert [l for l, v in both.items() if v == ("G", "E")] == [2, 3]


def test_attach_config_errors():
    with pytest.raises(ConfigError):
        AttachConfig((3, 2), (3, 5))
    with pytest.raises(ConfigError):
        AttachConfig((0, 1), (3, 5))
    with pytest.raises(ConfigError):
        AttachConfig((1, 2), (3, 7)).layer_map(6)
    with pytest.raises(ConfigError):
        AttachConfig(variant="postfix")


def _naive_pro_t_class_feature(bb, prompts_by_layer, x):
    """Pro-T without the class-token reorder: the class row drifts to index sum(Lp)."""
    h = bb.embed(x)
    cls_at = 0
    for layer in range(1, bb.config.num_layers + 1):
        pre = f"blocks.{layer}."
        u = bb.norm(h, pre + "ln1")
        if layer in prompts_by_layer:
            p = prompts_by_layer[layer]
            pb = tc.expand_batch(p, h.shape[0])
            a = prompt_pro_t(bb, p, u, layer)
            h = tc.concat_seq(pb, h)
            cls_at += p.shape[0]
        else:
            a = bb.msa(u, u, u, layer)
        x_ = tc.add(h, a)
        h = tc.add(x_, bb.mlp(bb.norm(x_, pre + "ln2"), layer))
    return bb.norm(h, "norm").data[:, cls_at]


def test_pro_t_reorder_is_exact():
    bb = tiny_backbone(layers=3)
    cfg = AttachConfig((1, 2), (2, 3), PRO_T, g_length=2, e_length=3)
    rng = np.random.default_rng(0)
    g = GPrompt.init(cfg, TINY.embed_dim, rng)
    e = EPromptSet()
    e.add_task(cfg, TINY.embed_dim, rng)
    fwd = attach(bb, g, e.prompts[0], cfg)
    x = images(3)
    merged = {1: g.layers[1], 2: tc.concat_seq(g.layers[2], e.prompts[0][2]), 3: e.prompts[0][3]}
    np.testing.assert_allclose(fwd(x).data, _naive_pro_t_class_feature(bb, merged, x), atol=1e-12)


def test_overlap_injects_g_then_e():
    bb = tiny_backbone()
    cfg = AttachConfig((1, 1), (1, 1), PRE_T, g_length=2, e_length=4)
    rng = np.random.default_rng(0)
    g = GPrompt.init(cfg, TINY.embed_dim, rng)
    e = EPromptSet()
    e.add_task(cfg, TINY.embed_dim, rng)
    fwd = attach(bb, g, e.prompts[0], cfg)
    assert fwd.kinds[1] == ("G", "E")
    h = tokens(1, 5)
    gp, ep = g.layers[1].data, e.prompts[0][1].data
    pk = Tensor(np.vstack([gp[:1], ep[:2]]))
    pv = Tensor(np.vstack([gp[1:], ep[2:]]))
    from dualprompt.prompting import prefix_msa
    _, got = fwd.injections[1](bb, h, h, 1)
    np.testing.assert_allclose(got.data, prefix_msa(bb, pk, pv, h, 1).data, atol=1e-14)


# ---------------------------------------------------------------- matching

def test_match_loss_trivial_values():
    q = Tensor(np.array([1.0, 2.0, -0.5]))
    assert match_loss(q, Tensor(q.data.copy())).item() == pytest.approx(0.0, abs=1e-15)
    assert match_loss(q, Tensor(-q.data)).item() == pytest.approx(2.0, abs=1e-15)
    assert match_loss(q, Tensor(np.array([2.0, -1.0, 0.0]))).item() == pytest.approx(1.0, abs=1e-15)


def test_match_loss_zero_vector_is_guarded():
    val = match_loss(Tensor(np.zeros(3)), Tensor(np.ones(3))).item()
    assert np.isfinite(val) and val == 1.0


def test_match_loss_range_random():
    rng = np.random.default_rng(0)
    for _ in range(200):
        q, k = rng.normal(size=(4, 6)), rng.normal(size=6) * rng.uniform(1e-3, 1e3)
        v = match_loss(q, Tensor(k)).data
        assert ((v >= 0) & (v <= 2)).all()


def test_select_expert_trivial():
    q = np.array([0.3, -1.0, 2.0])
    assert select_expert(q, q[None]) == 0
    assert select_expert(q, np.stack([-q, q])) == 1
    assert select_expert(q, np.stack([q, 2 * q])) == 0
    with pytest.raises(ValueError):
        select_expert(q, np.zeros((0, 3)))


def _scan(q, keys):
    best, best_d = 0, None
    for i, k in enumerate(keys):
        d = 1 - (q @ k) / (max(np.linalg.norm(q), 1e-12) * max(np.linalg.norm(k), 1e-12))
        if best_d is None or d < best_d:
            best, best_d = i, d
    return best


def test_select_expert_equals_scan_and_is_scale_invariant():
    rng = np.random.default_rng(0)
    for _ in range(300):
        q, keys = rng.normal(size=5), rng.normal(size=(10, 5))
        assert select_expert(q, keys) == _scan(q, keys)
        assert select_expert(q * rng.uniform(0.01, 100), keys) == select_expert(q, keys)


def test_select_expert_batched_matches_rows():
    rng = np.random.default_rng(1)
    q, keys = rng.normal(size=(7, 4)), rng.normal(size=(3, 4))
    assert select_expert(q, keys).tolist() == [select_expert(r, keys) for r in q]
    assert cosine_distances(q, keys).shape == (7, 3)


# ---------------------------------------------------------------- parameters and export

def test_eprompt_isolation_flags():
    cfg = AttachConfig((1, 1), (1, 2), PRE_T, g_length=2, e_length=4)
    e = EPromptSet()
    rng = np.random.default_rng(0)
    for _ in range(3):
        e.add_task(cfg, 8, rng)
    e.set_trainable(1)
    flags = {k: p.requires_grad for k, p in e.params().items()}
    assert flags == {k: k.startswith(("e.1.", "k.1")) for k in flags}
    assert np.allclose(np.linalg.norm(e.key_matrix(), axis=1), 1.0)
    assert all(np.abs(p.data).max() <= 0.03 for k, p in e.params().items() if k.startswith("e."))


def test_export_counts_and_round_trip(tmp_path):
    cfg = AttachConfig((1, 2), (3, 5), PRO_T, g_length=5, e_length=20)
    rng = np.random.default_rng(0)
    e = EPromptSet()
    snaps = []
    g = GPrompt.init(cfg, 8, rng)
    for _ in range(10):
        e.add_task(cfg, 8, rng)
        snaps.append({l: p.data + rng.normal() for l, p in g.layers.items()})
    n = export_prompt_vectors(snaps, e, tmp_path / "p.csv")
    recs = read_prompt_vectors(tmp_path / "p.csv")
    assert n == len(recs) == 700
    assert sum(r["kind"] == "E" for r in recs) == 600
    assert sum(r["kind"] == "G" for r in recs) == 100
    first_e = next(r for r in recs if r["kind"] == "E")
    assert first_e["vector"].tobytes() == e.prompts[0][3].data[0].tobytes()
    first_g = recs[0]
    assert first_g["vector"].tobytes() == snaps[0][1][0].tobytes()
