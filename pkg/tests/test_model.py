import numpy as np
import pytest
import torch

from avatarstream.model import (
    CheckpointError,
    CodecError,
    CondBundle,
    DenoisingNet,
    Discriminator,
    ModelShapeError,
    NetConfig,
    cm_apply,
    cm_sample,
    cm_scalings,
    ddim_sample,
    decode_latent,
    denoise_predict,
    denormalize_latent,
    discriminate,
    encode_latent,
    load_checkpoint,
    load_into,
    module_params,
    normalize_latent,
    save_checkpoint,
)
from avatarstream.sched import build_schedule, forward_diffuse, v_target
from avatarstream.world import AvatarIdentity, FaceParams, audio_feature_windows, render_frame

torch.set_num_threads(1)

SMALL = NetConfig(channels=(8, 12, 12), cond_dim=24, ref_dim=16, window=8)


def rand_frame(seed=0):
    rng = np.random.default_rng(seed)
    return (rng.integers(0, 256, (32, 32)) / 255.0).astype(np.float32)


def make_cond(cfg, f, n=4, seed=0, batch=0):
    g = torch.Generator().manual_seed(seed)
    shape = lambda *s: ((batch,) + s) if batch else s
    return CondBundle(
        audio=torch.rand(*shape(f, cfg.window), generator=g),
        label=torch.zeros(shape(1)[:-1] or (), dtype=torch.long)
        if not batch
        else torch.zeros(batch, dtype=torch.long),
        reference_embedding=torch.randn(*shape(cfg.ref_dim), generator=g),
        motion_latents=torch.randn(*shape(n, 4, 16, 16), generator=g),
    )


class TestCodec:
    def test_round_trip_is_exact(self):
        for seed in range(20):
            x = rand_frame(seed)
            assert np.array_equal(decode_latent(encode_latent(x)), x)
        avatar = AvatarIdentity(2)
        fr = render_frame(avatar, FaceParams(mouth=0.6, nod=0.25, expression=-0.75))
        assert np.array_equal(decode_latent(encode_latent(fr)), fr)

    def test_constant_half_frame_channel_values(self):
        z = encode_latent(np.full((32, 32), 0.5, dtype=np.float32))
        assert np.allclose(z[0], 1.0)
        assert np.abs(z[1:]).max() == 0.0

    def test_energy_preserved(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            x = rng.standard_normal((32, 32)).astype(np.float32)
            z = encode_latent(x)
            assert abs(np.linalg.norm(z) - np.linalg.norm(x)) <= 1e-6 * np.linalg.norm(x)

    def test_batched_shapes(self):
        x = np.stack([rand_frame(i) for i in range(6)]).reshape(2, 3, 32, 32)
        z = encode_latent(x)
        assert z.shape == (2, 3, 4, 16, 16)
        assert np.array_equal(decode_latent(z), x)

    def test_odd_dimensions_rejected(self):
        with pytest.raises(CodecError):
            encode_latent(np.zeros((31, 32)))
        with pytest.raises(CodecError):
            decode_latent(np.zeros((3, 16, 16)))

    def test_normalize_round_trip(self):
        z = encode_latent(rand_frame(3))
        back = denormalize_latent(normalize_latent(z))
        assert np.abs(back - z).max() <= 1e-6
        zt = torch.from_numpy(z.astype(np.float32))
        back_t = denormalize_latent(normalize_latent(zt))
        assert torch.abs(back_t - zt).max() <= 1e-6


class TestDenoisingNet:
    @pytest.mark.parametrize("f", [4, 8, 12])
    def test_output_shape_matches_input(self, f):
        torch.manual_seed(0)
        net = DenoisingNet(SMALL)
        x = torch.randn(f, 4, 16, 16)
        v = denoise_predict(net, x, 500, make_cond(SMALL, f))
        assert v.shape == x.shape

    def test_batched_forward(self):
        torch.manual_seed(0)
        net = DenoisingNet(SMALL)
        x = torch.randn(3, 8, 4, 16, 16)
        v = net(x, torch.tensor([10.0, 500.0, 999.0]), make_cond(SMALL, 8, batch=3))
        assert v.shape == x.shape

    def test_deterministic(self):
        torch.manual_seed(0)
        net = DenoisingNet(SMALL)
        x = torch.randn(4, 4, 16, 16)
        cond = make_cond(SMALL, 4)
        a = denoise_predict(net, x, 100, cond)
        b = denoise_predict(net, x, 100, cond)
        assert torch.equal(a, b)

    def test_label_swap_identical_at_init(self):
        # zero-initialized label table: label carries no signal yet
        torch.manual_seed(0)
        net = DenoisingNet(SMALL)
        x = torch.randn(4, 4, 16, 16)
        cond_a = make_cond(SMALL, 4)
        cond_b = CondBundle(
            audio=cond_a.audio,
            label=torch.tensor(2),
            reference_embedding=cond_a.reference_embedding,
            motion_latents=cond_a.motion_latents,
        )
        assert torch.equal(denoise_predict(net, x, 100, cond_a), denoise_predict(net, x, 100, cond_b))

    def test_label_embedding_additive(self):
        torch.manual_seed(0)
        net = DenoisingNet(SMALL)
        with torch.no_grad():
            net.label_table.weight.normal_()
        t1, t2 = torch.tensor([100.0]), torch.tensor([900.0])
        la, lb = torch.tensor([0]), torch.tensor([2])
        d1 = net.embed_timestep_and_label(t1, la) - net.embed_timestep_and_label(t1, lb)
        d2 = net.embed_timestep_and_label(t2, la) - net.embed_timestep_and_label(t2, lb)
        assert torch.allclose(d1, d2, atol=1e-6)
        assert not torch.equal(net.embed_timestep_and_label(t1, la), net.embed_timestep_and_label(t1, lb))

    def test_audio_perturbation_is_causal(self):
        torch.manual_seed(1)
        net = DenoisingNet(SMALL)
        with torch.no_grad():  # give audio weights real values
            for p in net.audio_mlp.parameters():
                p.normal_(std=0.3)
            net.out.weight.normal_(std=0.1)
        f, i = 8, 5
        rng = np.random.default_rng(0)
        env = rng.random(f).astype(np.float32)
        env2 = env.copy()
        env2[i] = 1.0 - env2[i]
        cond = make_cond(SMALL, f)
        x = torch.randn(f, 4, 16, 16)
        out1 = denoise_predict(
            net, x, 300, CondBundle(torch.from_numpy(audio_feature_windows(env)), cond.label, cond.reference_embedding, cond.motion_latents)
        )
        out2 = denoise_predict(
            net, x, 300, CondBundle(torch.from_numpy(audio_feature_windows(env2)), cond.label, cond.reference_embedding, cond.motion_latents)
        )
        assert torch.equal(out1[:i], out2[:i])
        assert not torch.equal(out1[i:], out2[i:])

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(2)
        net = DenoisingNet(SMALL).double()
        with torch.no_grad():
            net.out.weight.normal_(std=0.05)
            for p in net.audio_mlp.parameters():
                p.normal_(std=0.2)
        f = 4
        cond = make_cond(SMALL, f, seed=3)
        cond = CondBundle(
            cond.audio.double(), cond.label, cond.reference_embedding.double(), cond.motion_latents.double()
        )
        x = torch.randn(f, 4, 16, 16, dtype=torch.float64)
        proj = torch.randn(f, 4, 16, 16, dtype=torch.float64)

        def loss_fn():
            return (denoise_predict(net, x, 250, cond) * proj).sum()

        loss = loss_fn()
        loss.backward()
        rng = np.random.default_rng(4)
        names = [n for n, p in net.named_parameters() if p.grad is not None and p.grad.abs().max() > 1e-4]
        for name in rng.choice(names, size=6, replace=False):
            param = dict(net.named_parameters())[name]
            idx = np.unravel_index(int(torch.argmax(param.grad.abs())), param.shape)
            analytic = float(param.grad[idx])
            h = 1e-3
            with torch.no_grad():
                param[idx] += h
                up = float(loss_fn())
                param[idx] -= 2 * h
                down = float(loss_fn())
                param[idx] += h
            numeric = (up - down) / (2 * h)
            assert abs(analytic - numeric) <= 1e-2 * max(abs(numeric), 1e-8), name

    def test_non_finite_input_rejected(self):
        net = DenoisingNet(SMALL)
        x = torch.randn(4, 4, 16, 16)
        x[0, 0, 0, 0] = float("nan")
        with pytest.raises(ModelShapeError):
            denoise_predict(net, x, 10, make_cond(SMALL, 4))

    def test_audio_frame_mismatch_rejected(self):
        net = DenoisingNet(SMALL)
        with pytest.raises(ModelShapeError):
            denoise_predict(net, torch.randn(6, 4, 16, 16), 10, make_cond(SMALL, 4))


class TestDiscriminator:
    def test_head_count(self):
        disc = Discriminator(SMALL, heads=3)
        out = discriminate(disc, torch.randn(4, 4, 16, 16), 100, make_cond(SMALL, 4))
        assert out.heads == 3
        assert out.scores.shape == (3,)
        assert torch.isfinite(out.scores).all()

    def test_zero_mask_blinds_all_heads(self):
        torch.manual_seed(0)
        disc = Discriminator(SMALL, heads=3)
        cond = make_cond(SMALL, 4)
        cond.face_mask = torch.zeros(16, 16)
        a = discriminate(disc, torch.randn(4, 4, 16, 16), 100, cond)
        b = discriminate(disc, torch.randn(4, 4, 16, 16), 100, cond)
        assert torch.abs(a.scores - b.scores).max() <= 1e-6

    def test_nonzero_mask_sees_input(self):
        torch.manual_seed(0)
        disc = Discriminator(SMALL, heads=3)
        cond = make_cond(SMALL, 4)
        a = discriminate(disc, torch.randn(4, 4, 16, 16), 100, cond)
        b = discriminate(disc, torch.randn(4, 4, 16, 16), 100, cond)
        assert not torch.equal(a.scores, b.scores)

    def test_invalid_head_count(self):
        with pytest.raises(ValueError):
            Discriminator(SMALL, heads=0)


class TestSampling:
    def test_boundary_scalings(self):
        c_skip, c_out = cm_scalings(0)
        assert c_skip == 1.0 and c_out == 0.0
        c_skip, c_out = cm_scalings(999)
        assert c_skip < 1e-6 and c_out > 0.999999
        x = torch.randn(2, 4)
        assert torch.equal(cm_apply(x, torch.zeros_like(x), 0), x)

    def test_scalings_on_unit_circle(self):
        for t in (0, 1, 77, 500, 999):
            c_skip_raw = cm_scalings(t)
            # c_skip + normalized c_out parameterization keeps f well-scaled
            assert 0.0 <= c_skip_raw[0] <= 1.0
            assert 0.0 <= c_skip_raw[1] <= 1.0

    def test_ddim_sample_with_oracle_net_recovers_x0(self):
        sched = build_schedule(1000)
        torch.manual_seed(3)
        x0 = torch.randn(4, 4, 16, 16)

        class Oracle:
            def __call__(self, x_t, t, cond):
                ti = int(torch.as_tensor(t).reshape(-1)[0])
                sab = float(sched.sqrt_alpha_bar(ti))
                s1m = float(sched.sqrt_one_minus_alpha_bar(ti))
                eps = (x_t - sab * x0) / s1m if s1m > 0 else torch.zeros_like(x_t)
                return v_target(x0, eps, sched, ti)

        noise = torch.randn(4, 4, 16, 16)
        for steps in (2, 4, 25):
            out = ddim_sample(Oracle(), sched, noise, lambda t: None, steps)
            assert torch.abs(out - x0).max() <= 1e-4

    def test_cm_sample_visits_grid_points(self):
        sched = build_schedule(1000)
        seen = []

        class Probe:
            def __call__(self, x_t, t, cond):
                seen.append(int(torch.as_tensor(t).reshape(-1)[0]))
                return torch.zeros_like(x_t)

        noise = torch.randn(2, 4, 16, 16)
        cm_sample(Probe(), sched, noise, lambda t: None, steps=2, generator=torch.Generator().manual_seed(0))
        assert seen == [999, 500]
        seen.clear()
        cm_sample(Probe(), sched, noise, lambda t: None, steps=4, generator=torch.Generator().manual_seed(0))
        assert seen == [999, 749, 500, 250]

    def test_cm_sample_hook_overwrites_state(self):
        sched = build_schedule(1000)
        marker = torch.full((1, 4, 16, 16), 7.0)

        class Zero:
            def __call__(self, x_t, t, cond):
                return torch.zeros_like(x_t)

        out = cm_sample(
            Zero(), sched, torch.randn(1, 4, 16, 16), lambda t: None, steps=2,
            generator=torch.Generator().manual_seed(0), hook=lambda x, t: marker.clone(),
        )
        assert torch.equal(out, marker)


class TestCheckpoint:
    def params(self):
        rng = np.random.default_rng(0)
        return {
            "a.weight": rng.standard_normal((3, 4)).astype(np.float32),
            "a.bias": rng.standard_normal(4).astype(np.float32),
            "steps": np.array(12345, dtype=np.int64),
            "table": rng.integers(0, 255, (5,)).astype(np.uint8),
        }

    def test_round_trip_bit_exact(self, tmp_path):
        p = self.params()
        path = tmp_path / "m.pavc"
        save_checkpoint(p, path, meta={"kind": "test", "config": {"x": 1}})
        back, meta = load_checkpoint(path)
        assert set(back) == set(p)
        for k in p:
            assert back[k].dtype == p[k].dtype
            assert np.array_equal(back[k], p[k])
        assert meta == {"kind": "test", "config": {"x": 1}}

    def test_truncation_detected(self, tmp_path):
        path = tmp_path / "m.pavc"
        save_checkpoint(self.params(), path)
        raw = path.read_bytes()
        for cut in (len(raw) - 7, 10, 3):
            path.write_bytes(raw[:cut])
            with pytest.raises(CheckpointError):
                load_checkpoint(path)

    def test_bad_magic_and_version(self, tmp_path):
        import struct
        import zlib

        path = tmp_path / "m.pavc"
        save_checkpoint(self.params(), path)
        raw = bytearray(path.read_bytes())
        raw[0] = ord("X")
        body = bytes(raw[:-4])
        path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

        save_checkpoint(self.params(), path)
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        body = bytes(raw[:-4])
        path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_corruption_detected_by_crc(self, tmp_path):
        path = tmp_path / "m.pavc"
        save_checkpoint(self.params(), path)
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)

    def test_name_set_mismatch_rejected(self, tmp_path):
        path = tmp_path / "m.pavc"
        save_checkpoint(self.params(), path)
        with pytest.raises(CheckpointError, match="name set"):
            load_checkpoint(path, expect_names={"a.weight", "other"})

    def test_denoiser_checkpoint_rejected_by_discriminator(self, tmp_path):
        torch.manual_seed(0)
        net = DenoisingNet(SMALL)
        disc = Discriminator(SMALL)
        path = tmp_path / "net.pavc"
        save_checkpoint(module_params(net), path)
        params, _ = load_checkpoint(path)
        with pytest.raises(CheckpointError, match="name set"):
            load_into(disc, params)

    def test_torch_module_round_trip(self, tmp_path):
        torch.manual_seed(0)
        net = DenoisingNet(SMALL)
        path = tmp_path / "net.pavc"
        save_checkpoint(module_params(net), path, meta={"net": SMALL.to_dict()})
        params, meta = load_checkpoint(path)
        net2 = DenoisingNet(NetConfig.from_dict(meta["net"]))
        load_into(net2, params)
        x = torch.randn(4, 4, 16, 16)
        cond = make_cond(SMALL, 4)
        assert torch.equal(denoise_predict(net, x, 42, cond), denoise_predict(net2, x, 42, cond))
