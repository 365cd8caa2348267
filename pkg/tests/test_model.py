import math

import numpy as np
import pytest
import torch

from visotts import model as M
from visotts.model import ModelConfig, ModelError, VisualTTS

torch.set_num_threads(1)

TINY = ModelConfig(d=16, heads=2, vocab_size=43, max_len=400, dropout=0.1)


def tiny_model(seed=0, **overrides):
    cfg_kwargs = dict(d=16, heads=2, vocab_size=43, max_len=400)
    cfg_kwargs.update(overrides)
    net = M.build_model(ModelConfig(**cfg_kwargs), seed=seed)
    net.eval()
    return net


def zero_all_sublayer_weights(module):
    for name, param in module.named_parameters():
        if "norm" not in name:
            torch.nn.init.zeros_(param)


def numpy_layernorm(x, eps=1e-5):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps)


class TestPositionalEncoding:
    def test_row_zero_alternates(self):
        table = M.positional_encoding(3, 8).numpy()
        np.testing.assert_allclose(table[0], [0, 1, 0, 1, 0, 1, 0, 1], atol=1e-7)

    def test_scalar_entry(self):
        table = M.positional_encoding(2, 8).numpy()
        assert abs(table[1, 0] - math.sin(1.0)) < 1e-6
        assert abs(table[1, 1] - math.cos(1.0)) < 1e-6

    def test_bounded(self):
        table = M.positional_encoding(300, 64).numpy()
        assert table.min() >= -1.0 and table.max() <= 1.0

    def test_formula_against_direct_evaluation(self):
        d = 10
        table = M.positional_encoding(7, d).numpy()
        for pos in range(7):
            for i in range(d // 2):
                angle = pos / (10000 ** (2 * i / d))
                assert abs(table[pos, 2 * i] - math.sin(angle)) < 1e-6
                assert abs(table[pos, 2 * i + 1] - math.cos(angle)) < 1e-6

    def test_max_len_enforced(self):
        with pytest.raises(ModelError, match="max_len"):
            M.positional_encoding(500, 16, max_len=400)


class TestFFTBlock:
    @pytest.mark.parametrize("length", [1, 7, 50])
    def test_shape_preserved(self, length):
        torch.manual_seed(0)
        block = M.FFTBlock(TINY).eval()
        x = torch.randn(2, length, 16)
        assert block(x).shape == x.shape

    def test_zero_weights_give_identity(self):
        # closed form at d=4, L=2: both sublayers vanish, residuals pass x through
        cfg = ModelConfig(d=4, heads=1, vocab_size=43)
        torch.manual_seed(1)
        block = M.FFTBlock(cfg).eval()
        zero_all_sublayer_weights(block)
        x = torch.tensor([[[0.3, -1.2, 0.05, 2.0], [1.0, 0.0, -0.5, 0.25]]])
        np.testing.assert_allclose(block(x).detach().numpy(), x.numpy(), atol=1e-7)

    def test_stack_final_norm_closed_form(self):
        # one-block encoder with zeroed sublayers reduces to LayerNorm(x + pe)
        net = tiny_model(d=4, heads=1, text_blocks=1)
        zero_all_sublayer_weights(net.text_encoder.blocks[0])
        with torch.no_grad():
            net.text_encoder.embedding.weight.copy_(
                torch.arange(43 * 4, dtype=torch.float32).reshape(43, 4) / 100.0
            )
        ids = torch.tensor([[5, 9]])
        out = net.encode_text(ids).detach().numpy()
        embedded = net.text_encoder.embedding(ids).detach().numpy()
        pe = M.positional_encoding(2, 4).numpy()
        np.testing.assert_allclose(out[0], numpy_layernorm(embedded[0] + pe), atol=1e-5)

    def test_gradient_matches_finite_differences(self):
        cfg = ModelConfig(d=8, heads=2, vocab_size=43, dropout=0.0)
        torch.manual_seed(3)
        block = M.FFTBlock(cfg).double().eval()
        x = torch.randn(1, 3, 8, dtype=torch.float64)
        target = torch.rand(1, 3, 8, dtype=torch.float64) + 2.0

        def loss_fn():
            return torch.mean(torch.abs(block(x) - target))

        loss_fn().backward()
        rng = np.random.default_rng(0)
        for name, param in block.named_parameters():
            flat = param.detach().reshape(-1)
            for idx in rng.choice(flat.numel(), size=min(3, flat.numel()), replace=False):
                h = 1e-5
                with torch.no_grad():
                    flat[idx] += h
                    up = float(loss_fn())
                    flat[idx] -= 2 * h
                    down = float(loss_fn())
                    flat[idx] += h
                fd = (up - down) / (2 * h)
                ad = float(param.grad.reshape(-1)[idx])
                assert abs(fd - ad) <= 1e-3 * max(abs(fd), abs(ad), 1e-6), name


class TestEncoders:
    def test_text_shapes(self):
        net = tiny_model()
        out = net.encode_text(torch.tensor([[7]]))
        assert out.shape == (1, 1, 16)

    def test_permuting_tokens_changes_output(self):
        net = tiny_model(seed=4)
        a = net.encode_text(torch.tensor([[5, 9, 13, 20]]))
        b = net.encode_text(torch.tensor([[20, 13, 9, 5]]))
        assert float((a - b).abs().max()) > 1e-6

    def test_inference_deterministic(self):
        net = tiny_model(seed=5)
        ids = torch.tensor([[4, 8, 15, 16, 23, 42]])
        assert torch.equal(net.encode_text(ids), net.encode_text(ids))

    def test_out_of_vocab_rejected(self):
        net = tiny_model()
        with pytest.raises(ModelError, match="range"):
            net.encode_text(torch.tensor([[99]]))

    def test_visual_shapes_and_zero_input(self):
        net = tiny_model()
        out = net.encode_visual(torch.zeros(1, 7, 512))
        assert out.shape == (1, 7, 16)
        assert torch.all(torch.isfinite(out))

    def test_visual_width_checked(self):
        net = tiny_model()
        with pytest.raises(ModelError, match="512"):
            net.encode_visual(torch.zeros(1, 7, 100))

    def test_visual_gradient_check(self):
        cfg = ModelConfig(d=8, heads=2, vocab_size=43, visual_blocks=1, dropout=0.0)
        torch.manual_seed(6)
        net = VisualTTS(cfg).double().eval()
        x = torch.randn(1, 2, 512, dtype=torch.float64)
        target = torch.rand(1, 2, 8, dtype=torch.float64) + 2.0

        def loss_fn():
            return torch.mean(torch.abs(net.encode_visual(x) - target))

        loss_fn().backward()
        rng = np.random.default_rng(1)
        for name, param in net.visual_encoder.named_parameters():
            flat = param.detach().reshape(-1)
            for idx in rng.choice(flat.numel(), size=min(2, flat.numel()), replace=False):
                h = 1e-5
                with torch.no_grad():
                    flat[idx] += h
                    up = float(loss_fn())
                    flat[idx] -= 2 * h
                    down = float(loss_fn())
                    flat[idx] += h
                fd = (up - down) / (2 * h)
                ad = float(param.grad.reshape(-1)[idx])
                assert abs(fd - ad) <= 1e-3 * max(abs(fd), abs(ad), 1e-6), name


class TestVisualTextAttention:
    def test_single_key_gives_all_ones(self):
        net = tiny_model(seed=7)
        e_vis = torch.randn(1, 5, 16)
        e_text = torch.randn(1, 1, 16)
        with torch.no_grad():
            context, align = net.visual_text_attention(e_vis, e_text)
        np.testing.assert_allclose(align.numpy(), np.ones((1, 5, 1)), atol=1e-6)
        # every context row equals the single projected value row
        assert float((context - context[:, :1]).abs().max()) < 1e-6

    def test_zero_query_gives_uniform_rows(self):
        att = M.MultiHeadAttention(d=16, heads=2)
        with torch.no_grad():
            att.q_proj.weight.zero_()
            att.q_proj.bias.zero_()
        att.eval()
        e_vis = torch.randn(1, 4, 16)
        e_text = torch.randn(1, 8, 16)
        with torch.no_grad():
            out, align = att(e_vis, e_text, e_text)
        np.testing.assert_allclose(align.numpy(), np.full((1, 4, 8), 1 / 8), atol=1e-6)
        with torch.no_grad():
            mean_value = att.out_proj(att.v_proj(e_text).mean(dim=1, keepdim=True))
        np.testing.assert_allclose(
            out.detach().numpy(),
            mean_value.expand(1, 4, 16).numpy(),
            atol=1e-6,
        )

    def test_identity_projection_scalar_oracle(self):
        # single head, d=2, identity projections: logits [1/sqrt(2), 0]
        att = M.MultiHeadAttention(d=2, heads=1)
        with torch.no_grad():
            for proj in (att.q_proj, att.k_proj, att.v_proj, att.out_proj):
                proj.weight.copy_(torch.eye(2))
                if proj.bias is not None:
                    proj.bias.zero_()
        att.eval()
        query = torch.tensor([[[1.0, 0.0]]])
        keys = torch.tensor([[[1.0, 0.0], [0.0, 1.0]]])
        with torch.no_grad():
            _, align = att(query, keys, keys)
        z = math.exp(1 / math.sqrt(2))
        expected = [z / (z + 1), 1 / (z + 1)]
        np.testing.assert_allclose(align.numpy()[0, 0], expected, atol=1e-6)

    def test_permutation_equivariance(self):
        net = tiny_model(seed=8)
        rng = np.random.default_rng(2)
        for _ in range(20):
            t, n = int(rng.integers(1, 12)), int(rng.integers(2, 12))
            e_vis = torch.randn(1, t, 16)
            e_text = torch.randn(1, n, 16)
            perm = torch.from_numpy(rng.permutation(n))
            with torch.no_grad():
                ctx_a, align_a = net.visual_text_attention(e_vis, e_text)
                ctx_b, align_b = net.visual_text_attention(e_vis, e_text[:, perm])
            assert float((ctx_a - ctx_b).abs().max()) <= 1e-6
            assert float((align_a[:, :, perm] - align_b).abs().max()) <= 1e-6

    def test_width_mismatch_rejected(self):
        net = tiny_model()
        with pytest.raises(ModelError, match="width"):
            net.visual_text_attention(torch.randn(1, 3, 8), torch.randn(1, 3, 8))


class TestUpsample:
    def test_repeats_rows(self):
        x = torch.arange(2 * 3, dtype=torch.float32).reshape(1, 2, 3)
        up = M.upsample(x)
        assert up.shape == (1, 8, 3)
        assert torch.equal(up[0, :4], x[0, 0].expand(4, 3))
        assert torch.equal(up[0, 4:], x[0, 1].expand(4, 3))

    def test_factor_forced_by_rates(self):
        video_frame_ms = 1000 / 25
        mel_hop_ms = 10
        assert M.UPSAMPLE_N == video_frame_ms / mel_hop_ms == 4

    def test_subsample_inverts(self):
        x = torch.randn(2, 9, 5)
        assert torch.equal(M.upsample(x)[:, ::4], x)


class TestSpeakerConditioning:
    def test_zero_vector_zero_bias_is_identity(self):
        net = tiny_model(seed=9)
        with torch.no_grad():
            net.speaker_proj.bias.zero_()
        x = torch.randn(1, 8, 16)
        out = net.condition_speaker(x, torch.zeros(1, 256))
        assert torch.equal(out, x)

    def test_speaker_difference_is_row_constant(self):
        net = tiny_model(seed=10)
        x = torch.randn(1, 12, 16)
        spk_a = torch.randn(1, 256)
        spk_b = torch.randn(1, 256)
        diff = net.condition_speaker(x, spk_a) - net.condition_speaker(x, spk_b)
        assert float((diff - diff[:, :1]).abs().max()) < 1e-6

    @pytest.mark.parametrize("t", [1, 9])
    def test_shape_preserved(self, t):
        net = tiny_model()
        x = torch.randn(1, 4 * t, 16)
        assert net.condition_speaker(x, torch.randn(1, 256)).shape == x.shape

    def test_wrong_width_rejected(self):
        net = tiny_model()
        with pytest.raises(ModelError, match="256"):
            net.condition_speaker(torch.randn(1, 4, 16), torch.randn(1, 100))


class TestForward:
    def test_composed_shapes(self):
        net = tiny_model(seed=11)
        ids = torch.randint(1, 43, (1, 11))
        mel, align = net(ids, torch.randn(1, 7, 512), torch.randn(1, 256))
        assert mel.shape == (1, 28, 80)
        assert align.shape == (1, 7, 11)

    def test_decode_length_contract(self):
        net = tiny_model(seed=12)
        rng = np.random.default_rng(3)
        for _ in range(10):
            n, t = int(rng.integers(1, 30)), int(rng.integers(1, 40))
            mel, align = net(
                torch.randint(1, 43, (1, n)), torch.randn(1, t, 512), torch.randn(1, 256)
            )
            assert mel.shape == (1, 4 * t, 80)
            assert align.shape == (1, t, n)

    def test_inference_deterministic(self):
        net = tiny_model(seed=13)
        ids = torch.randint(1, 43, (1, 6))
        vis = torch.randn(1, 5, 512)
        spk = torch.randn(1, 256)
        with torch.no_grad():
            mel_a, align_a = net(ids, vis, spk)
            mel_b, align_b = net(ids, vis, spk)
        assert torch.equal(mel_a, mel_b) and torch.equal(align_a, align_b)

    def test_speaker_swap_changes_mel(self):
        net = tiny_model(seed=14)
        ids = torch.randint(1, 43, (1, 6))
        vis = torch.randn(1, 5, 512)
        mel_a, _ = net(ids, vis, torch.randn(1, 256))
        mel_b, _ = net(ids, vis, torch.randn(1, 256))
        assert float((mel_a - mel_b).abs().max()) > 1e-6

    def test_alignment_rows_stochastic(self):
        net = tiny_model(seed=15)
        for _ in range(5):
            with torch.no_grad():
                _, align = net(torch.randint(1, 43, (2, 9)), torch.randn(2, 6, 512), torch.randn(2, 256))
            assert float(align.min()) >= 0.0
            np.testing.assert_allclose(align.sum(-1).numpy(), 1.0, atol=1e-5)

    def test_padded_batch_matches_unpadded(self):
        net = tiny_model(seed=16, dropout=0.0)
        ids = torch.tensor([[5, 9, 13]])
        vis = torch.randn(1, 4, 512)
        spk = torch.randn(1, 256)
        with torch.no_grad():
            mel_ref, align_ref = net(ids, vis, spk)
            padded = torch.cat([ids, torch.zeros(1, 3, dtype=torch.long)], dim=1)
            mask = torch.tensor([[True, True, True, False, False, False]])
            mel_pad, align_pad = net(padded, vis, spk, text_mask=mask)
        assert float((mel_ref - mel_pad).abs().max()) < 1e-5
        np.testing.assert_allclose(align_pad[:, :, 3:].numpy(), 0.0, atol=1e-7)
        np.testing.assert_allclose(align_pad[:, :, :3].numpy(), align_ref.numpy(), atol=1e-5)

    def test_max_len_guard(self):
        net = tiny_model()
        with pytest.raises(ModelError, match="max_len"):
            net(torch.randint(1, 43, (1, 3)), torch.randn(1, 150, 512), torch.randn(1, 256))


class TestCheckpoint:
    def test_save_load_save_byte_identical(self, tmp_path):
        net = tiny_model(seed=17)
        M.save_checkpoint(tmp_path / "a", net, extra={"vocab": ["PAD"]})
        loaded, config = M.load_checkpoint(tmp_path / "a")
        assert config["vocab"] == ["PAD"]
        M.save_checkpoint(tmp_path / "b", loaded, extra={"vocab": ["PAD"]})
        assert (tmp_path / "a" / "params.bin").read_bytes() == (
            tmp_path / "b" / "params.bin"
        ).read_bytes()

    def test_loaded_model_behaves_identically(self, tmp_path):
        net = tiny_model(seed=18)
        M.save_checkpoint(tmp_path / "ck", net)
        loaded, _ = M.load_checkpoint(tmp_path / "ck")
        ids = torch.randint(1, 43, (1, 5))
        vis = torch.randn(1, 3, 512)
        spk = torch.randn(1, 256)
        assert torch.equal(net(ids, vis, spk)[0], loaded(ids, vis, spk)[0])

    def test_extra_tensor_rejected(self, tmp_path):
        net = tiny_model(seed=19)
        M.save_checkpoint(tmp_path / "ck", net)
        blob = M.read_tensor_blob(tmp_path / "ck" / "params.bin")
        blob["bogus"] = np.zeros(3, dtype=np.float32)
        M.write_tensor_blob(tmp_path / "ck" / "params.bin", blob)
        with pytest.raises(ModelError, match="unexpected tensors: bogus"):
            M.load_checkpoint(tmp_path / "ck")

    def test_missing_tensor_rejected(self, tmp_path):
        net = tiny_model(seed=20)
        M.save_checkpoint(tmp_path / "ck", net)
        blob = M.read_tensor_blob(tmp_path / "ck" / "params.bin")
        blob.pop("decoder.mel_head.bias")
        M.write_tensor_blob(tmp_path / "ck" / "params.bin", blob)
        with pytest.raises(ModelError, match="missing tensors"):
            M.load_checkpoint(tmp_path / "ck")

    def test_shape_mismatch_rejected(self, tmp_path):
        net = tiny_model(seed=21)
        M.save_checkpoint(tmp_path / "ck", net)
        blob = M.read_tensor_blob(tmp_path / "ck" / "params.bin")
        blob["decoder.mel_head.bias"] = np.zeros(7, dtype=np.float32)
        M.write_tensor_blob(tmp_path / "ck" / "params.bin", blob)
        with pytest.raises(ModelError, match="shape"):
            M.load_checkpoint(tmp_path / "ck")

    def test_missing_checkpoint_errors(self, tmp_path):
        with pytest.raises(ModelError, match="checkpoint not found"):
            M.load_checkpoint(tmp_path / "missing")


class TestConfigValidation:
    def test_head_divisibility(self):
        with pytest.raises(ModelError, match="divisible"):
            ModelConfig(d=10, heads=3)

    def test_upsample_pinned(self):
        with pytest.raises(ModelError, match="upsample_n"):
            ModelConfig(upsample_n=3)

    def test_conv_hidden_defaults_to_4d(self):
        assert ModelConfig(d=32).conv_hidden_size == 128
        assert ModelConfig(d=32, conv_hidden=96).conv_hidden_size == 96
