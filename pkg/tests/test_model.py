import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tfmcl.errors import DatasetError, InvalidArgumentError, NumericError
from tfmcl.gradcheck import TINY_ENCODER, run_gradcheck
from tfmcl.model import (
    DomainEncoder,
    EncoderConfig,
    grad,
    init_params,
    load_checkpoint,
    save_checkpoint,
    token_count,
)

SMALL = EncoderConfig(n_channels=3, window_len=64, time_kernel=8, freq_kernel=4, n_time_filters=4,
                      n_channel_filters=6, ffn_hidden=10, repr_dim=5, fusion_dim=7, fmh_hidden=9)


# -- straight-line numpy forward oracle, written against the state_dict only


def _np_state(module):
    return {k: v.detach().double().numpy() for k, v in module.state_dict().items()}


def _relu(x):
    return np.maximum(x, 0.0)


def _layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _attention(x, s, p):
    q = x @ s[p + "q.weight"].T + s[p + "q.bias"]
    k = x @ s[p + "k.weight"].T
    v = x @ s[p + "v.weight"].T + s[p + "v.bias"]
    scores = q @ k.T / math.sqrt(x.shape[-1])
    scores = scores - scores.max(axis=1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=1, keepdims=True)
    return (w @ v) @ s[p + "o.weight"].T + s[p + "o.bias"]


def oracle_transformer(tokens, s):
    x = tokens
    x = _layer_norm(x + _attention(x, s, "layers.0.attn."), s["layers.0.norm1.weight"], s["layers.0.norm1.bias"])
    ff = _relu(x @ s["layers.0.ff1.weight"].T + s["layers.0.ff1.bias"]) @ s["layers.0.ff2.weight"].T + s["layers.0.ff2.bias"]
    x = _layer_norm(x + ff, s["layers.0.norm2.weight"], s["layers.0.norm2.bias"])
    return x.mean(axis=0) @ s["fc.weight"].T + s["fc.bias"]


def oracle_tokens(x, s, kernel):
    n_ch, length = x.shape
    n_tok = length // kernel
    w1, b1 = s["step_conv.weight"], s["step_conv.bias"]
    w2, b2 = s["channel_conv.weight"], s["channel_conv.bias"]
    h1 = np.zeros((w1.shape[0], n_ch, n_tok))
    for a in range(w1.shape[0]):
        for e in range(n_ch):
            for j in range(n_tok):
                acc = b1[a]
                for u in range(kernel):
                    acc += w1[a, 0, 0, u] * x[e, j * kernel + u]
                h1[a, e, j] = max(acc, 0.0)
    tokens = np.zeros((n_tok, w2.shape[0]))
    for c in range(w2.shape[0]):
        for j in range(n_tok):
            acc = b2[c]
            for a in range(w1.shape[0]):
                for e in range(n_ch):
                    acc += w2[c, a, e, 0] * h1[a, e, j]
            tokens[j, c] = max(acc, 0.0)
    return tokens + s["pos"]


def oracle_encoder(x, s, kernel):
    return oracle_transformer(oracle_tokens(x, s, kernel), s)


def oracle_fuse(rt, rf, s):
    pair = np.stack([rt, rf])
    pair = _layer_norm(pair + _attention(pair, s, "attn."), s["norm.weight"], s["norm.bias"])
    h = pair.reshape(-1)
    n = len([k for k in s if k.startswith("mlp.") and k.endswith(".weight")])
    for i in range(n):
        h = h @ s[f"mlp.{i}.weight"].T + s[f"mlp.{i}.bias"]
        if i < n - 1:
            h = _relu(h)
    return h


def _randomize_biases(model, seed=1):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.3)


@pytest.fixture
def model64():
    m = init_params(SMALL, seed=4, dtype=torch.float64)
    _randomize_biases(m)
    return m


class TestInit:
    def test_same_seed_bit_identical(self):
        a, b = init_params(SMALL, 9).state_dict(), init_params(SMALL, 9).state_dict()
        assert list(a) == list(b)
        for k in a:
            assert a[k].numpy().tobytes() == b[k].numpy().tobytes()

    def test_different_seed_differs(self):
        a, b = init_params(SMALL, 1), init_params(SMALL, 2)
        assert not torch.equal(a.fmh.mlp[0].weight, b.fmh.mlp[0].weight)

    def test_biases_zero_and_weights_bounded(self):
        model = init_params(SMALL, 3)
        norm_gains = 0
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                assert torch.all(p == 0), name
            elif ".norm" in name:
                assert torch.all(p == 1), name
                norm_gains += 1
            else:
                shape = tuple(p.shape)
                rf = int(np.prod(shape[2:])) if len(shape) > 2 else 1
                bound = math.sqrt(6.0 / (shape[1] * rf + shape[0] * rf))
                assert p.abs().max().item() <= bound, name
                assert p.abs().max().item() > 0.5 * bound, name
        assert norm_gains == 5

    def test_unresolved_config_rejected(self):
        with pytest.raises(InvalidArgumentError):
            init_params(EncoderConfig(), 0)

    @pytest.mark.parametrize("kwargs", [{"ffn_hidden": 0}, {"attn_heads": 2},
                                        {"window_len": 30, "time_kernel": 20}])
    def test_invalid_config(self, kwargs):
        with pytest.raises(InvalidArgumentError):
            EncoderConfig(n_channels=2, **{"window_len": 64, **kwargs})


class TestShapes:
    def test_table_kernel_token_counts(self):
        cfg = EncoderConfig(n_channels=2, window_len=1000, n_time_filters=2, n_channel_filters=4,
                            ffn_hidden=4, repr_dim=6, fusion_dim=3, fmh_hidden=4)
        model = init_params(cfg, 0)
        assert model.time_encoder.n_tokens == 50
        assert model.freq_encoder.n_tokens == 50
        t = torch.randn(3, 2, 1000)
        f = torch.randn(3, 2, 500)
        assert model.encode_time(t).shape == (3, 6)
        assert model.encode_freq(f).shape == (3, 6)
        assert model.time_encoder.tokens(t).shape == (3, 50, 4)
        assert model.fuse(model.encode_time(t), model.encode_freq(f)).shape == (3, 3)

    @settings(max_examples=30, deadline=None)
    @given(length=st.integers(8, 300), kernel=st.integers(1, 40))
    def test_token_count_formula(self, length, kernel):
        n = token_count(length, kernel)
        assert n == length // kernel
        if n < 2:
            with pytest.raises(InvalidArgumentError):
                DomainEncoder(2, length, kernel, SMALL)
        else:
            enc = DomainEncoder(2, length, kernel, SMALL)
            assert enc.tokens(torch.zeros(1, 2, length)).shape == (1, n, SMALL.n_channel_filters)

    def test_right_truncation(self, model64):
        t = torch.randn(2, 3, 64, dtype=torch.float64)
        enc = DomainEncoder(3, 70, 8, SMALL).double()
        enc.load_state_dict(model64.time_encoder.state_dict())
        padded = torch.cat([t, torch.randn(2, 3, 6, dtype=torch.float64)], dim=2)
        torch.testing.assert_close(enc(padded), model64.encode_time(t), rtol=0, atol=0)


class TestForwardOracle:
    def test_encode_time(self, model64, rng):
        x = rng.standard_normal((3, 64))
        got = model64.encode_time(torch.from_numpy(x)[None])[0].detach().numpy()
        np.testing.assert_allclose(got, oracle_encoder(x, _np_state(model64.time_encoder), 8), rtol=0, atol=1e-9)

    def test_encode_freq(self, model64, rng):
        f = rng.standard_normal((3, 32))
        got = model64.encode_freq(torch.from_numpy(f)[None])[0].detach().numpy()
        np.testing.assert_allclose(got, oracle_encoder(f, _np_state(model64.freq_encoder), 4), rtol=0, atol=1e-9)

    def test_zero_input_reduces_to_positional_embeddings(self):
        model = init_params(SMALL, seed=6, dtype=torch.float64)
        got = model.encode_time(torch.zeros(1, 3, 64, dtype=torch.float64))[0].detach().numpy()
        s = _np_state(model.time_encoder)
        # zero biases: both convolutions output exactly zero, tokens are the embeddings
        assert not model.time_encoder.tokens(torch.zeros(1, 3, 64, dtype=torch.float64))[0].sub(
            model.time_encoder.pos).any()
        np.testing.assert_allclose(got, oracle_transformer(s["pos"], s), rtol=0, atol=1e-9)

    def test_fuse(self, model64, rng):
        rt, rf = rng.standard_normal(5), rng.standard_normal(5)
        got = model64.fuse(torch.from_numpy(rt)[None], torch.from_numpy(rf)[None])[0].detach().numpy()
        np.testing.assert_allclose(got, oracle_fuse(rt, rf, _np_state(model64.fmh)), rtol=0, atol=1e-9)

    def test_classify(self, model64, rng):
        y = rng.standard_normal(7)
        s = _np_state(model64.head)
        got = model64.classify(torch.from_numpy(y)).detach().numpy()
        np.testing.assert_allclose(got, s["weight"] @ y + s["bias"], rtol=0, atol=1e-12)


class TestStructure:
    def test_channel_permutation_equivariance(self, model64, rng):
        x = torch.from_numpy(rng.standard_normal((2, 3, 64)))
        base = model64.encode_time(x)
        with torch.no_grad():
            w = model64.time_encoder.channel_conv.weight
            w.copy_(w[:, :, [1, 0, 2], :].clone())
        permuted = model64.encode_time(x[:, [1, 0, 2], :])
        torch.testing.assert_close(permuted, base, rtol=0, atol=1e-9)

    def test_time_and_freq_share_architecture(self, model64, rng):
        f = torch.from_numpy(rng.standard_normal((2, 3, 32)))
        twin = DomainEncoder(3, 32, SMALL.freq_kernel, SMALL).double()
        twin.load_state_dict(model64.freq_encoder.state_dict())
        assert torch.equal(twin(f), model64.encode_freq(f))

    def test_fuse_symmetric_pair(self, model64, rng):
        r = torch.from_numpy(rng.standard_normal((4, 5)))
        mixed = model64.fmh.mix(r, r)
        torch.testing.assert_close(mixed[:, :5], mixed[:, 5:], rtol=0, atol=1e-12)

    def test_fuse_dimension_mismatch(self, model64):
        with pytest.raises(InvalidArgumentError):
            model64.fuse(torch.zeros(1, 5, dtype=torch.float64), torch.zeros(1, 4, dtype=torch.float64))

    def test_zero_head(self, model64):
        with torch.no_grad():
            model64.head.weight.zero_()
            model64.head.bias.zero_()
        logits = model64.classify(torch.randn(7, dtype=torch.float64))
        assert torch.equal(logits, torch.zeros(2, dtype=torch.float64))
        torch.testing.assert_close(torch.softmax(logits, 0), torch.tensor([0.5, 0.5], dtype=torch.float64))

    def test_softmax_shift_invariance(self):
        logits = torch.tensor([0.3, -1.2], dtype=torch.float64)
        torch.testing.assert_close(torch.softmax(logits + 17.5, 0), torch.softmax(logits, 0), rtol=0, atol=1e-15)


class TestGrad:
    def test_unused_parameters_get_exact_zero(self, model64, rng):
        t = torch.from_numpy(rng.standard_normal((2, 3, 64)))
        g = grad(lambda m: m.encode_time(t).square().sum(), model64)
        assert set(g) == {k for k, _ in model64.named_parameters()}
        for k, v in g.items():
            if not k.startswith("time_encoder."):
                assert torch.count_nonzero(v) == 0, k
        assert torch.count_nonzero(g["time_encoder.fc.weight"]) > 0

    def test_linear_in_loss(self, model64, rng):
        t = torch.from_numpy(rng.standard_normal((2, 3, 64)))
        f = torch.from_numpy(rng.standard_normal((2, 3, 32)))
        g1 = grad(lambda m: m(t, f).sum(), model64)
        g2 = grad(lambda m: 2 * m(t, f).sum(), model64)
        for k in g1:
            torch.testing.assert_close(g2[k], 2 * g1[k], rtol=1e-12, atol=0)

    def test_non_finite_loss(self, model64):
        with pytest.raises(NumericError):
            grad(lambda m: m.head.bias.sum() * float("nan"), model64)

    def test_tiny_model_finite_differences(self):
        result = run_gradcheck(encoder=TINY_ENCODER, seed=0)
        assert result.max_rel_error <= 1e-4, result.per_tensor


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = init_params(SMALL, 12)
        _randomize_biases(model, 5)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path, {"stage": "test"})
        back = load_checkpoint(path)
        assert back.config == model.config and back.seed == 12
        for (k, a), (k2, b) in zip(model.state_dict().items(), back.state_dict().items()):
            assert k == k2 and a.numpy().tobytes() == b.numpy().tobytes()

    def test_header_layout(self, tmp_path):
        model = init_params(SMALL, 1)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        raw = path.read_bytes()
        header_line, payload = raw.split(b"\n", 1)
        import json
        header = json.loads(header_line)
        assert header["dtype"] == "f32le" and header["seed"] == 1
        assert header["config"]["window_len"] == 64
        n = sum(int(np.prod(t["shape"])) for t in header["tensors"])
        assert len(payload) == 4 * n
        first = header["tensors"][0]
        arr = np.frombuffer(payload, "<f4", int(np.prod(first["shape"])), first["byte_offset"])
        np.testing.assert_array_equal(arr, model.state_dict()[first["name"]].numpy().ravel())

    def test_truncated_file(self, tmp_path):
        model = init_params(SMALL, 1)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(DatasetError):
            load_checkpoint(path)
