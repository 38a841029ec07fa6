import math

import numpy as np
import pytest

from stabletune import data as D
from stabletune import model as M
from stabletune import tensor as T
from stabletune.gradcheck import check_gradients
from stabletune.rng import CountingGenerator


def fresh(cfg, seed=0, include_head=True):
    return M.init_params(cfg, np.random.default_rng(seed), include_head)


def test_config_validation():
    with pytest.raises(ValueError):
        M.ModelConfig(hidden_dim=10, num_heads=4)
    with pytest.raises(ValueError):
        M.ModelConfig(num_blocks=0)
    with pytest.raises(ValueError):
        M.ModelConfig(init_std=0)
    with pytest.raises(ValueError):
        M.ModelConfig(dropout_p=1.0)
    with pytest.raises(ValueError):
        M.ModelConfig(activation="swish")
    with pytest.raises(ValueError):
        M.ReinitSpec(num_blocks=-1)


def test_init_statistics():
    cfg = M.ModelConfig(vocab_size=400, hidden_dim=64, ffn_dim=256, num_blocks=4)
    p = fresh(cfg)
    w = np.concatenate([v.ravel() for k, v in p.items() if M.is_matrix(k)])
    assert w.size >= 100_000
    sample = w[:100_000]
    assert abs(sample.mean()) < 0.0005
    assert abs(sample.std() - 0.02) < 0.001


def test_init_biases_norms_and_determinism():
    cfg = M.ModelConfig()
    p = fresh(cfg)
    for name, v in p.items():
        if name.endswith("gain"):
            assert np.all(v == 1.0), name
        elif M.is_norm(name) or M.is_bias(name):
            assert np.all(v == 0.0), name
    q = fresh(cfg)
    assert p.digest() == q.digest()
    assert fresh(cfg, seed=1).digest() != p.digest()


def test_param_tree_addressing():
    cfg = M.ModelConfig(num_blocks=3)
    p = fresh(cfg)
    assert p.get_param("blocks", "ffn.w1", block=2).shape == (cfg.hidden_dim, cfg.ffn_dim)
    assert p.get_param("pooler", "weight").shape == (cfg.hidden_dim, cfg.hidden_dim)
    assert p.get_param("head", "bias").shape == (cfg.num_classes,)
    assert M.param_block("blocks.3.ln2.gain") == 3 and M.param_block("pooler.bias") is None
    assert set(M.param_shapes(cfg)) == set(p)
    assert p.num_scalars() == sum(math.prod(s) for s in M.param_shapes(cfg).values())


def test_copies_are_independent():
    p = fresh(M.ModelConfig(num_blocks=1))
    q = p.copy()
    q["pooler.bias"][0] = 5.0
    assert p["pooler.bias"][0] == 0.0


def _batch(ids, pad_to=None):
    ex = [D.Example(tuple(s), 0) for s in ids]
    return D.make_batch(ex, range(len(ex)))


def test_zero_pooler_and_head_gives_uniform_loss(toy_cfg, small_data):
    cfg = M.ModelConfig(**{**toy_cfg.to_dict(), "num_classes": 3})
    p = dict(fresh(cfg).items())
    for k in ("pooler.weight", "pooler.bias", "head.weight", "head.bias"):
        p[k] = np.zeros_like(p[k])
    batch = D.make_batch(small_data.train, range(8))
    logits = M.forward(p, batch, cfg)
    np.testing.assert_array_equal(logits.data, 0.0)
    loss = T.softmax_cross_entropy(logits, np.array([0, 1, 2, 0, 1, 2, 0, 1]))
    assert loss.item() == pytest.approx(math.log(3))


def test_padding_is_masked(toy_cfg):
    p = fresh(toy_cfg)
    a = _batch([[7, 8, 9], [10, 11, 12, 13, 14]])
    logits = M.forward(p, a, toy_cfg).data
    # change what sits in the padded slots: must not matter
    b = D.Batch(a.ids.copy(), a.mask.copy(), a.labels, a.indices)
    b.ids[0, ~a.mask[0]] = [20, 21]
    np.testing.assert_allclose(M.forward(p, b, toy_cfg).data, logits, atol=1e-12)
    # a single short example gives the same logits alone as inside the padded batch
    solo = _batch([[7, 8, 9]])
    np.testing.assert_allclose(M.forward(p, solo, toy_cfg).data[0], logits[0], atol=1e-12)


def test_forward_errors(toy_cfg):
    p = fresh(toy_cfg)
    with pytest.raises(IndexError):
        M.forward(p, _batch([[toy_cfg.vocab_size]]), toy_cfg)
    too_long = [[6] * toy_cfg.max_seq_len]
    with pytest.raises(ValueError):
        M.forward(p, _batch(too_long), toy_cfg)


def test_forward_deterministic_with_rng(toy_cfg, small_data):
    p = fresh(toy_cfg)
    batch = D.make_batch(small_data.train, range(4))
    a = M.forward(p, batch, toy_cfg, np.random.default_rng(9), training=True).data
    b = M.forward(p, batch, toy_cfg, np.random.default_rng(9), training=True).data
    c = M.forward(p, batch, toy_cfg, np.random.default_rng(10), training=True).data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_regression_head_shape(small_data):
    cfg = M.ModelConfig(vocab_size=small_data.vocab_size, num_classes=1, num_blocks=1, hidden_dim=8, num_heads=2, ffn_dim=8)
    p = fresh(cfg)
    out = M.forward(p, D.make_batch(small_data.train, range(5)), cfg)
    assert out.shape == (5,)


@pytest.mark.parametrize("activation", ["relu", "gelu"])
def test_full_model_gradient(activation, small_data):
    cfg = M.ModelConfig(
        vocab_size=small_data.vocab_size, max_seq_len=small_data.max_seq_len, hidden_dim=16, num_heads=2,
        num_blocks=2, ffn_dim=24, activation=activation, init_std=0.3,
    )
    params = fresh(cfg, seed=4)
    batch = D.make_batch(small_data.train, range(3))

    def loss(p):
        return M.task_loss(M.forward(p, batch, cfg, np.random.default_rng(0), training=True), batch.labels, cfg)

    report = check_gradients(loss, dict(params.items()), max_coords=6, rng=np.random.default_rng(1))
    assert report.passed(1e-4), report.per_input


def test_reinit_noop(toy_cfg):
    p = fresh(toy_cfg, include_head=False)
    q = M.apply_reinit(p, M.ReinitSpec(False, 0), np.random.default_rng(1), toy_cfg)
    assert q.digest() == p.digest()


def _changed(a, b):
    return {k for k in a if not np.array_equal(a[k], b[k])}


def test_reinit_all(toy_cfg):
    p = fresh(toy_cfg, include_head=False)
    # perturb norms so that resetting them is visible
    p = p.replace({k: v + 0.5 for k, v in p.items() if M.is_norm(k) or M.is_bias(k)})
    q = M.apply_reinit(p, M.ReinitSpec(True, toy_cfg.num_blocks), np.random.default_rng(1), toy_cfg)
    changed = _changed(p, q)
    assert not any(k.startswith("embeddings.") for k in changed)
    for b in range(1, toy_cfg.num_blocks + 1):
        assert set(p.block_names(b)) <= changed
    assert {"pooler.weight", "pooler.bias"} <= changed


def test_reinit_top_block_exact_diff(toy_cfg):
    p = fresh(toy_cfg, include_head=False)
    p = p.replace({k: v + 0.5 for k, v in p.items() if M.is_norm(k) or M.is_bias(k)})
    q = M.apply_reinit(p, M.ReinitSpec(False, 1), np.random.default_rng(1), toy_cfg)
    assert _changed(p, q) == set(p.block_names(toy_cfg.num_blocks))
    top = toy_cfg.num_blocks
    assert np.all(q[M.block_key(top, "ln1.gain")] == 1.0)
    assert np.all(q[M.block_key(top, "attn.bq")] == 0.0)


def test_reinit_too_many_blocks(toy_cfg):
    p = fresh(toy_cfg, include_head=False)
    with pytest.raises(ValueError):
        M.apply_reinit(p, M.ReinitSpec(False, toy_cfg.num_blocks + 1), np.random.default_rng(0), toy_cfg)


def test_reinit_draws_only_from_given_stream(toy_cfg):
    p = fresh(toy_cfg, include_head=False)
    g = CountingGenerator(0)
    M.apply_reinit(p, M.ReinitSpec(True, 1), g, toy_cfg)
    assert g.calls > 0


def test_block_concat(toy_cfg):
    p = fresh(toy_cfg)
    vec = M.block_concat(p, 1)
    assert vec.size == sum(p[k].size for k in p.block_names(1))
    np.testing.assert_array_equal(vec, M.block_concat(p.copy(), 1))
    parts = M.block_split(vec, toy_cfg)
    for name, arr in parts.items():
        np.testing.assert_array_equal(arr, p[M.block_key(1, name)])
    with pytest.raises(IndexError):
        M.block_concat(p, 0)
    with pytest.raises(IndexError):
        M.block_concat(p, toy_cfg.num_blocks + 1)


def test_checkpoint_roundtrip(tmp_path, toy_cfg):
    p = fresh(toy_cfg)
    path = tmp_path / "p.ckpt"
    M.save_params(path, p, toy_cfg)
    q, cfg = M.load_params(path)
    assert cfg == toy_cfg
    assert list(q) == list(p)
    for k in p:
        assert q[k].tobytes() == p[k].tobytes()
    assert q.num_blocks == p.num_blocks


def test_checkpoint_rejects_garbage(tmp_path, toy_cfg):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        M.load_params(bad)
    M.save_params(bad, fresh(toy_cfg), toy_cfg)
    bad.write_bytes(bad.read_bytes()[:-10])
    with pytest.raises(ValueError):
        M.load_params(bad)
