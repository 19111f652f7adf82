import math

import numpy as np
import pytest

from cstlab import tensor as T
from cstlab.constraints import loss_terms
from cstlab.errors import ConfigError, DataError, UsageError
from cstlab.model import (
    ModelConfig,
    block_forward,
    forward,
    init_model,
    load_checkpoint,
    output_head,
    param_count,
    parse_arch,
    predict,
    save_checkpoint,
)

TABLE7 = ModelConfig(L=1, R=32, H=4, d_h=128, d_mlp=512, t=81, v=10, c=9)


def tiny(**kw):
    base = dict(L=1, R=2, H=2, d_h=8, t=6, v=5, c=3, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# independent straight-line block, written against the textbook formulas


def _ln(x, g, b, eps=1e-5):
    out = np.empty_like(x)
    for i, row in enumerate(x):
        mu = sum(row) / len(row)
        var = sum((v - mu) ** 2 for v in row) / len(row)
        out[i] = [(v - mu) / math.sqrt(var + eps) * gg + bb for v, gg, bb in zip(row, g, b)]
    return out


def _softmax_rows(z):
    out = np.empty_like(z)
    for i, row in enumerate(z):
        m = max(row)
        e = [math.exp(v - m) for v in row]
        s = sum(e)
        out[i] = [v / s for v in e]
    return out


def _gelu(x):
    k = math.sqrt(2 / math.pi)
    return np.vectorize(lambda v: 0.5 * v * (1 + math.tanh(k * (v + 0.044715 * v**3))))(x)


def reference_block(p, pre, h, n_heads):
    x = _ln(h, p[pre + "ln1.gamma"], p[pre + "ln1.beta"])
    K = x @ p[pre + "attn.wk"] + p[pre + "attn.bk"]
    Q = x @ p[pre + "attn.wq"] + p[pre + "attn.bq"]
    V = x @ p[pre + "attn.wv"] + p[pre + "attn.bv"]
    d = h.shape[1]
    dh = d // n_heads
    heads, atts = [], []
    for j in range(n_heads):
        sl = slice(j * dh, (j + 1) * dh)
        A = _softmax_rows(Q[:, sl] @ K[:, sl].T / math.sqrt(dh))
        atts.append(A)
        heads.append(A @ V[:, sl])
    v_star = np.concatenate(heads, axis=1) @ p[pre + "attn.wp"] + p[pre + "attn.bp"] + h
    y = _ln(v_star, p[pre + "ln2.gamma"], p[pre + "ln2.beta"])
    out = _gelu(y @ p[pre + "mlp.w1"] + p[pre + "mlp.b1"]) @ p[pre + "mlp.w2"] + p[pre + "mlp.b2"]
    return out + v_star, np.stack(atts)


def randomize(model, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.data[...] = rng.normal(0, scale, size=p.shape)


# ---------------------------------------------------------------------------


class TestConfig:
    def test_heads_must_divide_width(self):
        with pytest.raises(ConfigError):
            ModelConfig(d_h=10, H=4)

    def test_default_mlp_width(self):
        assert ModelConfig(d_h=128).d_mlp == 512

    def test_parse_arch(self):
        assert parse_arch("L1R32H4") == (1, 32, 4)
        with pytest.raises(ConfigError):
            parse_arch("L1R32")


class TestParamCount:
    def test_table7_total(self):
        assert param_count(TABLE7) == 211_328

    def test_table7_rows(self):
        m = init_model(TABLE7, 0)
        assert m["tok.weight"].size == 1_280
        assert m["pos.weight"].size == 10_368
        attn = sum(m[f"blocks.0.attn.{k}"].size for k in ("wk", "bk", "wq", "bq", "wv", "bv", "wp", "bp"))
        assert attn == 66_048
        mlp = sum(m[f"blocks.0.mlp.{k}"].size for k in ("w1", "b1", "w2", "b2"))
        assert mlp == 131_712
        norms = sum(p.size for k, p in m.named_parameters() if ".ln" in k)
        assert norms == 768
        assert m["head.w_out"].size == 1_152

    def test_second_block_doubles_block_terms_only(self):
        one = param_count(TABLE7)
        two = param_count(ModelConfig(L=2, R=32, H=4, d_h=128, t=81, v=10, c=9))
        per_block = 66_048 + 131_712 + 4 * 128
        assert two - one == per_block

    @pytest.mark.parametrize("kw", [{}, {"use_positional": False}, {"L": 3}, {"embedder": "linear", "v": 7}])
    def test_matches_initialized_model(self, kw):
        cfg = tiny(**kw)
        assert init_model(cfg, 1).num_params() == param_count(cfg)


class TestInit:
    def test_deterministic(self):
        a, b = init_model(tiny(), 3), init_model(tiny(), 3)
        for (ka, pa), (kb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert ka == kb and pa.data.tobytes() == pb.data.tobytes()

    def test_no_positional_table(self):
        assert "pos.weight" not in init_model(tiny(use_positional=False), 0).params

    def test_biases_zero_norms_identity(self):
        m = init_model(tiny(), 0)
        assert not m["blocks.0.attn.bq"].data.any()
        assert np.all(m["head.ln.gamma"].data == 1)


class TestBlock:
    def test_zero_weights_pass_through(self):
        m = init_model(tiny(), 0)
        for p in m.parameters():
            p.data[...] = 0
        h = T.Tensor(np.random.default_rng(0).normal(size=(2, 6, 8)).astype(np.float32))
        out, _ = block_forward(m, 0, h)
        np.testing.assert_array_equal(out.data, h.data)

    def test_attention_rows_stochastic(self):
        m = init_model(tiny(), 0)
        randomize(m)
        h = T.Tensor(np.random.default_rng(1).normal(size=(3, 6, 8)).astype(np.float32))
        _, A = block_forward(m, 0, h)
        assert A.shape == (3, 2, 6, 6)
        np.testing.assert_allclose(A.data.sum(-1), 1.0, atol=1e-5)

    def test_matches_straight_line_reference(self):
        cfg = tiny(t=2, d_h=4, H=2, d_mlp=6)
        m = init_model(cfg, 0, dtype=np.float64)
        randomize(m, seed=4)
        h = np.random.default_rng(2).normal(size=(2, 4))
        out, A = block_forward(m, 0, T.Tensor(h[None]))
        p = {k: v.data for k, v in m.named_parameters()}
        ref_out, ref_A = reference_block(p, "blocks.0.", h, cfg.H)
        np.testing.assert_allclose(out.data[0], ref_out, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(A.data[0], ref_A, rtol=1e-12, atol=1e-12)


class TestHead:
    def test_zero_projection_uniform(self):
        m = init_model(tiny(), 0)
        m["head.w_out"].data[...] = 0
        X = output_head(m, T.Tensor(np.random.default_rng(0).normal(size=(1, 6, 8)).astype(np.float32)))
        np.testing.assert_allclose(X.data, 1 / 3)

    def test_one_by_two_direct(self):
        cfg = tiny(t=1, d_h=2, H=1, c=2)
        m = init_model(cfg, 0, dtype=np.float64)
        m["head.w_out"].data[...] = [[1.0, -1.0], [0.5, 2.0]]
        X = output_head(m, T.Tensor(np.array([[[3.0, 1.0]]])))
        # layer_norm([3, 1]) = [1, -1] * 1/sqrt(1 + eps)
        s = 1 / math.sqrt(1 + 1e-5)
        z = [s * 1.0 - s * 0.5, s * -1.0 - s * 2.0]
        e = [math.exp(v) for v in z]
        np.testing.assert_allclose(X.data[0, 0], [e[0] / sum(e), e[1] / sum(e)], rtol=1e-12)


class TestForward:
    def test_trace_length(self):
        m = init_model(tiny(L=1), 0)
        assert len(forward(m, np.zeros(6, dtype=int), 1)) == 1
        m2 = init_model(tiny(L=3), 0)
        tr = forward(m2, np.zeros((2, 6), dtype=int), 4)
        assert len(tr) == 12
        assert [(e.r, e.l) for e in tr][:4] == [(1, 1), (1, 2), (1, 3), (2, 1)]

    def test_rows_stochastic(self):
        m = init_model(tiny(L=2), 0)
        randomize(m, scale=0.3)
        tr = forward(m, np.random.default_rng(0).integers(0, 5, (4, 6)), 3)
        for e in tr:
            np.testing.assert_allclose(e.X.data.sum(-1), 1.0, atol=1e-5)
            np.testing.assert_allclose(e.A.data.sum(-1), 1.0, atol=1e-5)

    def test_prefix_property(self):
        m = init_model(tiny(L=2), 0)
        randomize(m, scale=0.3)
        tok = np.random.default_rng(0).integers(0, 5, (3, 6))
        t1, t2 = forward(m, tok, 1), forward(m, tok, 2)
        for a, b in zip(t1.entries, t2.entries[:2]):
            assert a.X.data.tobytes() == b.X.data.tobytes()
            assert a.A.data.tobytes() == b.A.data.tobytes()

    def test_longer_inference_shares_prefix(self):
        m = init_model(tiny(), 0)
        tok = np.random.default_rng(1).integers(0, 5, (2, 6))
        t32, t64 = forward(m, tok, 32), forward(m, tok, 64)
        assert all(a.X.data.tobytes() == b.X.data.tobytes() for a, b in zip(t32.entries, t64.entries[:32]))

    def test_token_out_of_vocab(self):
        with pytest.raises(DataError):
            forward(init_model(tiny(), 0), np.full(6, 5), 1)

    def test_wrong_length(self):
        with pytest.raises(DataError):
            forward(init_model(tiny(), 0), np.zeros(7, dtype=int), 1)

    def test_zero_recurrences(self):
        with pytest.raises(UsageError):
            forward(init_model(tiny(), 0), np.zeros(6, dtype=int), 0)

    def test_train_mode_dropout_changes_output(self):
        m = init_model(tiny(dropout=0.5), 0)
        tok = np.zeros((1, 6), dtype=int)
        a = forward(m, tok, 1, train_mode=True).last.X.data
        b = forward(m, tok, 1, train_mode=False).last.X.data
        assert not np.array_equal(a, b)

    def test_no_positional_identical_tokens_identical_rows(self):
        m = init_model(tiny(use_positional=False, L=2), 0)
        randomize(m, scale=0.4)
        tok = np.array([[1, 3, 1, 0, 3, 1]])
        for e in forward(m, tok, 3):
            X = e.X.data[0]
            assert X[0].tobytes() == X[2].tobytes() == X[5].tobytes()
            assert X[1].tobytes() == X[4].tobytes()


class TestPredict:
    def _with_final(self, X):
        m = init_model(tiny(t=2, c=3), 0)

        class Fixed:
            pass

        return m, X

    def test_argmax_and_ties(self, monkeypatch):
        import cstlab.model as M

        X = np.array([[[0.0, 1.0, 0.0], [1 / 3, 1 / 3, 1 / 3]]])

        class Entry:
            pass

        class Trace:
            last = Entry()

        Trace.last.X = T.Tensor(X)
        monkeypatch.setattr(M, "forward", lambda *a, **k: Trace)
        m = init_model(tiny(t=2, c=3), 0)
        np.testing.assert_array_equal(predict(m, np.zeros(2, dtype=int), 1), [1, 0])

    def test_batched_shape(self):
        m = init_model(tiny(), 0)
        assert predict(m, np.zeros((4, 6), dtype=int), 2).shape == (4, 6)


class TestGradients:
    def test_weight_sharing_across_recurrences(self):
        cfg = tiny(R=1)
        tok = np.random.default_rng(0).integers(0, 5, (2, 6))
        labels = np.random.default_rng(1).integers(0, 3, (2, 6))

        def grad_for(steps):
            m = init_model(cfg, 0, dtype=np.float64)
            randomize(m, scale=0.3)
            with T.Tape() as tape:
                loss = loss_terms(forward(m, tok, steps), labels).total
            tape.backward(loss)
            return m["blocks.0.attn.wq"].grad.copy()

        assert not np.allclose(grad_for(1), grad_for(2))

    def test_small_model_finite_differences(self):
        cfg = tiny(L=1, R=2, H=2, d_h=8, t=6)
        m = init_model(cfg, 0, dtype=np.float64)
        randomize(m, scale=0.3)
        tok = np.random.default_rng(0).integers(0, 5, (2, 6))
        labels = np.random.default_rng(1).integers(-1, 3, (2, 6))
        names = [k for k, _ in m.named_parameters()]

        def f(ps):
            m.params = dict(zip(names, ps))
            return loss_terms(forward(m, tok, 2), labels).base

        rep = T.finite_diff_check(f, m.parameters(), max_per_param=12)
        assert rep.max_rel_error < 1e-4, rep.per_param


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = init_model(tiny(L=2), 5)
        save_checkpoint(m, tmp_path / "ck")
        back = load_checkpoint(tmp_path / "ck")
        assert back.config == m.config
        for (k, a), (k2, b) in zip(m.named_parameters(), back.named_parameters()):
            assert k == k2 and a.data.tobytes() == b.data.tobytes()

    def test_manifest_is_text_and_binary_is_flat(self, tmp_path):
        m = init_model(tiny(), 0)
        save_checkpoint(m, tmp_path / "ck")
        import json

        manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
        assert manifest["format_version"] == 1
        assert [p["name"] for p in manifest["params"]] == [k for k, _ in m.named_parameters()]
        assert (tmp_path / "ck" / "params.bin").stat().st_size == 4 * m.num_params()

    def test_truncated_binary_rejected(self, tmp_path):
        m = init_model(tiny(), 0)
        save_checkpoint(m, tmp_path / "ck")
        b = (tmp_path / "ck" / "params.bin").read_bytes()
        (tmp_path / "ck" / "params.bin").write_bytes(b + b"\0\0\0\0")
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "ck")
