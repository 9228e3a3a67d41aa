"""INT8 quantization: codes, integer kernels, calibration, mixed precision."""

import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from avatarstream.model.net import CondBundle, DenoisingNet, NetConfig
from avatarstream.quant import (
    CalibStats,
    InfeasibleError,
    IntegerLayer,
    LayerQuant,
    LayerStats,
    QuantError,
    QuantSpec,
    QuantSpecError,
    QuantizedDenoiser,
    affine_qparams,
    build_mixed_precision,
    build_quant_spec,
    calibrate,
    dequantize,
    file_crc,
    integer_conv1d,
    integer_conv2d,
    integer_linear,
    load_calib_cache,
    make_calib_batches,
    matmul_throughput_report,
    quantizable_layers,
    quantize_activations,
    quantize_tensor,
    quantize_weights,
    quantized_forward,
    save_calib_cache,
    sensitivity_scan,
    validate_spec,
)
from avatarstream.sched import build_schedule
from avatarstream.training import tensorize_dataset
from avatarstream.world.dataset import DatasetConfig, make_dataset

torch.set_num_threads(1)

SMALL = NetConfig(channels=(8, 12, 12), cond_dim=24, ref_dim=16, window=8)


def perturbed_net(seed=1):
    torch.manual_seed(0)
    net = DenoisingNet(SMALL)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in net.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=gen))
    return net


def make_batches(seed, count, B=2, f=6, n=4):
    gen = torch.Generator().manual_seed(seed)
    hw = SMALL.latent_size
    out = []
    for _ in range(count):
        x = torch.randn(B, f, 4, hw, hw, generator=gen)
        cond = CondBundle(
            audio=torch.randn(B, f, SMALL.window, generator=gen),
            label=torch.zeros(B, dtype=torch.long),
            reference_embedding=torch.randn(B, SMALL.ref_dim, generator=gen),
            motion_latents=torch.randn(B, n, 4, hw, hw, generator=gen),
        )
        out.append((x, torch.full((B,), 512.0), cond))
    return out


@pytest.fixture(scope="module")
def net():
    return perturbed_net()


@pytest.fixture(scope="module")
def batches():
    return make_batches(7, 4)


@pytest.fixture(scope="module")
def spec(net, batches):
    return build_quant_spec(net, calibrate(net, batches, method="minmax"))


# ---------------------------------------------------------------- codes


def test_scalar_brute_force_code():
    # best code for 0.37 at scale 1/127, checked against every code
    scale = 1.0 / 127.0
    best = min(range(-127, 128), key=lambda k: abs(k * scale - 0.37))
    assert best == 47

    codes, scales, zp = quantize_tensor(np.array([0.37, 1.0]), "symmetric")
    assert zp == 0
    assert scales[0] == scale
    assert codes.tolist() == [47, 127]
    assert dequantize(codes, scales)[0] == 47 / 127.0


def test_symmetric_on_grid_roundtrip_bit_exact():
    scale = 1.0 / 64.0
    grid = np.array([-127, -64, -1, 0, 3, 64, 127])
    x = grid * scale
    codes, scales, _ = quantize_tensor(x, "symmetric")
    assert scales[0] == scale
    assert np.array_equal(codes, grid.astype(np.int8))
    assert np.array_equal(dequantize(codes, scales), x)


def test_affine_on_grid_roundtrip_bit_exact():
    scale, zp = 1.0 / 128.0, 37
    grid = np.array([0, 5, 37, 200, 255])
    x = (grid - zp) * scale
    codes, got_scale, got_zp = quantize_tensor(x, "affine")
    assert (got_scale, got_zp) == (scale, zp)
    assert np.array_equal(codes, grid.astype(np.uint8))
    assert np.array_equal(dequantize(codes, got_scale, got_zp), x)


@settings(deadline=None)
@given(st.lists(st.floats(-50, 50, allow_nan=False, allow_infinity=False),
                min_size=1, max_size=64))
def test_symmetric_roundtrip_error_bound(vals):
    x = np.asarray(vals, dtype=np.float64)
    codes, scales, _ = quantize_tensor(x, "symmetric")
    err = np.abs(dequantize(codes, scales) - x)
    assert (err <= scales[0] / 2 + 1e-12).all()


@settings(deadline=None)
@given(st.lists(st.floats(-100, 100, allow_nan=False, allow_infinity=False),
                min_size=1, max_size=64))
def test_affine_roundtrip_error_bound(vals):
    x = np.asarray(vals, dtype=np.float64)
    codes, scale, zp = quantize_tensor(x, "affine")
    err = np.abs(dequantize(codes, scale, zp) - x)
    assert (err <= scale / 2 + 1e-12).all()


def test_all_zero_tensor_degenerate():
    z = np.zeros((3, 4))
    codes, scales, zp = quantize_tensor(z, "symmetric")
    assert (scales == 1.0).all() and zp == 0
    assert (codes == zp).all()
    codes, scale, zp = quantize_tensor(z, "affine")
    assert scale == 1.0 and zp == 0
    assert (codes == zp).all()


def test_constant_affine_keeps_zero_representable():
    x = np.full(8, 0.5)
    codes, scale, zp = quantize_tensor(x, "affine")
    assert zp == 0 and (codes == 255).all()
    assert np.array_equal(dequantize(codes, scale, zp), x)


def test_weight_scales_per_channel_independent():
    w = np.array([[0.1, -0.2], [100.0, 1.0]])
    codes, scales = quantize_weights(w)
    assert scales[0] == 0.2 / 127.0
    assert scales[1] == 100.0 / 127.0
    assert codes.dtype == np.int8
    # the loud second channel does not degrade the first
    assert np.abs(dequantize(codes, scales) - w).max(axis=1)[0] <= scales[0] / 2


def test_code_dtypes():
    sym, _, _ = quantize_tensor(np.array([1.0, -1.0]), "symmetric")
    aff, _, _ = quantize_tensor(np.array([1.0, -1.0]), "affine")
    assert sym.dtype == np.int8
    assert aff.dtype == np.uint8


def test_quantize_errors():
    with pytest.raises(QuantError):
        quantize_tensor(np.array([np.nan]), "symmetric")
    with pytest.raises(QuantError):
        quantize_tensor(np.array([1.0]), "int4")
    with pytest.raises(QuantError):
        quantize_activations(np.array([1.0]), 0.0, 0)
    with pytest.raises(QuantError):
        quantize_activations(np.array([1.0]), 0.1, 300)
    with pytest.raises(QuantError):
        affine_qparams(2.0, 1.0)


# ------------------------------------------------------- integer kernels


def test_integer_linear_hand_oracle():
    # x = [0.5, 0.25] at s_a = 0.01, zp = 10 -> codes [60, 35]
    # row 0: acc = 2*60 - 1*35 = 85, corr = 10*(2-1) = 10
    # row 1: acc = 3*60 + 4*35 = 320, corr = 10*(3+4) = 70
    w_codes = np.array([[2, -1], [3, 4]], dtype=np.int8)
    s_w = np.array([0.01, 0.02])
    a_codes = np.array([[60, 35]], dtype=np.uint8)
    bias = np.array([0.001, -0.002])
    out = integer_linear(a_codes, w_codes, s_w, 0.01, 10, bias)
    expected = np.array([
        np.float64(85 - 10) * (0.01 * 0.01) + 0.001,
        np.float64(320 - 70) * (0.02 * 0.01) - 0.002,
    ]).astype(np.float32)
    assert np.array_equal(out[0], expected)


def _brute_linear(a_codes, w_codes, w_scales, a_scale, zp, bias):
    a = a_codes.astype(np.int64)
    w = w_codes.astype(np.int64)
    acc = np.zeros((a.shape[0], w.shape[0]), dtype=np.int64)
    for p in range(a.shape[0]):
        for o in range(w.shape[0]):
            acc[p, o] = int(np.dot(a[p], w[o])) - zp * int(w[o].sum())
    out = acc.astype(np.float64) * (np.asarray(w_scales) * a_scale)[None, :]
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float64)[None, :]
    return out.astype(np.float32)


def test_integer_linear_matches_brute_force():
    rng = np.random.default_rng(0)
    a = rng.integers(0, 256, (5, 7)).astype(np.uint8)
    w = rng.integers(-127, 128, (3, 7)).astype(np.int8)
    s_w = rng.uniform(0.01, 0.1, 3)
    b = rng.normal(size=3)
    out = integer_linear(a, w, s_w, 0.05, 128, b)
    assert np.array_equal(out, _brute_linear(a, w, s_w, 0.05, 128, b))


def test_integer_linear_shape_error():
    with pytest.raises(QuantError):
        integer_linear(np.zeros((1, 3), np.uint8), np.zeros((2, 4), np.int8),
                       np.ones(2), 0.1, 0)


def _brute_conv2d(a_codes, w_codes, w_scales, a_scale, zp, bias, stride, padding):
    n, c, h, w = a_codes.shape
    o, _, kh, kw = w_codes.shape
    sh, sw = stride
    ph, pw = padding
    padded = np.pad(a_codes.astype(np.int64), ((0, 0), (0, 0), (ph, ph), (pw, pw)),
                    constant_values=zp)
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    acc = np.zeros((n, o, ho, wo), dtype=np.int64)
    wsum = w_codes.astype(np.int64).sum(axis=(1, 2, 3))
    for b_ in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = padded[b_, :, i * sh:i * sh + kh, j * sw:j * sw + kw]
                    acc[b_, oc, i, j] = int((patch * w_codes[oc]).sum()) - zp * int(wsum[oc])
    out = acc.astype(np.float64) * (np.asarray(w_scales) * a_scale)[None, :, None, None]
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float64)[None, :, None, None]
    return out.astype(np.float32)


@pytest.mark.parametrize("stride,padding", [((1, 1), (1, 1)), ((2, 2), (1, 1)), ((1, 1), (0, 0))])
def test_integer_conv2d_matches_brute_force(stride, padding):
    rng = np.random.default_rng(3)
    a = rng.integers(0, 256, (2, 3, 5, 5)).astype(np.uint8)
    w = rng.integers(-127, 128, (4, 3, 3, 3)).astype(np.int8)
    s_w = rng.uniform(0.01, 0.1, 4)
    b = rng.normal(size=4)
    out = integer_conv2d(a, w, s_w, 0.03, 117, b, stride=stride, padding=padding)
    assert np.array_equal(out, _brute_conv2d(a, w, s_w, 0.03, 117, b, stride, padding))


def test_integer_conv1d_matches_brute_force():
    rng = np.random.default_rng(4)
    a = rng.integers(0, 256, (2, 3, 9)).astype(np.uint8)
    w = rng.integers(-127, 128, (5, 3, 4)).astype(np.int8)
    s_w = rng.uniform(0.01, 0.1, 5)
    out = integer_conv1d(a, w, s_w, 0.02, 90, None, padding=2)
    ref = _brute_conv2d(a[:, :, None, :], w[:, :, None, :], s_w, 0.02, 90,
                        None, (1, 1), (0, 2))[:, :, 0, :]
    assert np.array_equal(out, ref)


def test_conv_padding_holds_zero_point():
    # real-valued zero input: every tap, padded ones included, cancels
    scale, zp = affine_qparams(-1.0, 1.0)
    a = quantize_activations(np.zeros((1, 1, 3, 3)), scale, zp)
    w = np.ones((1, 1, 3, 3), dtype=np.int8)
    out = integer_conv2d(a, w, np.array([0.5]), scale, zp, padding=(1, 1))
    assert np.array_equal(out, np.zeros_like(out))


def test_integer_conv_channel_mismatch():
    with pytest.raises(QuantError):
        integer_conv2d(np.zeros((1, 2, 4, 4), np.uint8),
                       np.zeros((1, 3, 3, 3), np.int8), np.ones(1), 0.1, 0)


# ----------------------------------------------------------- calibration


def test_constant_activation_stats(net):
    hw = SMALL.latent_size
    x = torch.full((1, 4, 4, hw, hw), 0.5)
    cond = CondBundle(
        audio=torch.full((1, 4, SMALL.window), 0.5),
        label=torch.zeros(1, dtype=torch.long),
        reference_embedding=torch.full((1, SMALL.ref_dim), 0.5),
        motion_latents=torch.full((1, 4, 4, hw, hw), 0.5),
    )
    stats = calibrate(net, [(x, torch.full((1,), 100.0), cond)])
    assert stats.layers["enc1"].lo == 0.5
    assert stats.layers["enc1"].hi == 0.5
    assert stats.layers["audio_mlp.0"].lo == 0.5
    assert stats.layers["audio_mlp.0"].hi == 0.5
    assert stats.batches == 1
    assert all(s.count > 0 for s in stats.layers.values())


def test_minmax_range_monotone_in_batches(net):
    first = make_batches(11, 2)
    more = first + make_batches(12, 2)
    s1 = calibrate(net, first)
    s2 = calibrate(net, more)
    for name in s1.layers:
        assert s2.layers[name].lo <= s1.layers[name].lo
        assert s2.layers[name].hi >= s1.layers[name].hi


def test_percentile_range_within_minmax(net):
    batches = make_batches(13, 3)
    # heavy tail: a few huge outliers in the input latents
    x, t, cond = batches[0]
    x = x.clone()
    x.view(-1)[::997] *= 50.0
    batches[0] = (x, t, cond)
    mm = calibrate(net, batches, method="minmax")
    pc = calibrate(net, batches, method="percentile", percentile=99.0)
    for name in mm.layers:
        lo_m, hi_m = mm.layers[name].effective_range()
        lo_p, hi_p = pc.layers[name].effective_range()
        assert lo_p >= lo_m and hi_p <= hi_m
    assert pc.layers["enc1"].effective_range()[1] < mm.layers["enc1"].hi


def test_calibrate_errors(net):
    with pytest.raises(QuantSpecError):
        calibrate(net, [])
    with pytest.raises(QuantSpecError):
        calibrate(net, make_batches(1, 1), method="entropy")


def test_layer_stats_invariants():
    with pytest.raises(QuantSpecError):
        LayerStats(lo=1.0, hi=0.0, count=10)
    with pytest.raises(QuantSpecError):
        LayerStats(lo=0.0, hi=1.0, count=0)


def test_make_calib_batches_state_coverage(net):
    ds = make_dataset(DatasetConfig(identities=2, clips_per_identity=6,
                                    clip_frames=24, samples_per_clip=2,
                                    motion_frames=4, target_frames=12, seed=3))
    samples = tensorize_dataset(ds.samples)
    sched = build_schedule(1000)
    batches = make_calib_batches(net, samples, sched, chunks=12, batch_size=4, f=6)
    assert len(batches) == 3
    seen = set()
    for x, t, cond in batches:
        assert x.shape == (4, 6, 4, 16, 16)
        seen.update(int(v) for v in cond.label)
    assert seen == {int(s.label_id) for s in samples}
    again = make_calib_batches(net, samples, sched, chunks=12, batch_size=4, f=6)
    assert all(torch.equal(a[0], b[0]) for a, b in zip(batches, again))


# ------------------------------------------------------------------ spec


def test_build_spec_valid(net, spec):
    validate_spec(net, spec)
    names = {e.layer for e in spec.layers}
    assert names == set(quantizable_layers(net))
    assert "ref_encoder.conv1" not in names
    for e in spec.layers:
        assert all(s > 0 for s in e.wscales)
        assert e.ascale > 0
        assert 0 <= e.zero_point <= 255
        assert not e.fallback


def test_spec_json_roundtrip(tmp_path, spec):
    path = tmp_path / "qspec.json"
    spec.save(path)
    loaded = QuantSpec.load(path)
    assert loaded == spec
    row = json.loads(path.read_text())["layers"][0]
    assert {"layer", "wscheme", "ascheme", "wscales", "ascale",
            "zero_point", "fallback"} <= set(row)


def test_spec_model_mismatch(net, spec):
    with pytest.raises(QuantSpecError):
        validate_spec(net, QuantSpec(spec.layers[1:]))
    bogus = LayerQuant(layer="does.not.exist", wscales=(1.0,), ascale=1.0, zero_point=0)
    with pytest.raises(QuantSpecError):
        validate_spec(net, QuantSpec(spec.layers + (bogus,)))
    entry = spec.by_name()["enc1"]
    broken = QuantSpec(tuple(
        LayerQuant(layer=e.layer, wscales=e.wscales[:-1], ascale=e.ascale,
                   zero_point=e.zero_point) if e.layer == "enc1" else e
        for e in spec.layers
    ))
    assert len(entry.wscales) > 1
    with pytest.raises(QuantSpecError):
        validate_spec(net, broken)


def test_spec_entry_validation():
    with pytest.raises(QuantSpecError):
        LayerQuant(layer="x", wscales=(0.0,), ascale=1.0, zero_point=0)
    with pytest.raises(QuantSpecError):
        LayerQuant(layer="x", wscales=(1.0,), ascale=1.0, zero_point=999)


def test_spec_fallback_helpers(spec):
    iso = spec.only("enc1")
    flags = {e.layer: e.fallback for e in iso.layers}
    assert not flags.pop("enc1")
    assert all(flags.values())
    two = spec.with_fallback(["enc1", "out"])
    assert set(two.fallback_names()) == {"enc1", "out"}


# ------------------------------------------------------ quantized forward


def test_all_fallback_bit_identical(net, spec, batches):
    full_fb = spec.with_fallback([e.layer for e in spec.layers])
    qnet = QuantizedDenoiser(net, full_fb)
    x, t, cond = batches[0]
    with torch.no_grad():
        ref = net(x, t, cond)
    assert torch.equal(qnet(x, t, cond), ref)
    ref_latent = torch.randn(1, 4, 16, 16, generator=torch.Generator().manual_seed(5))
    with torch.no_grad():
        assert torch.equal(qnet.encode_reference(ref_latent),
                           net.encode_reference(ref_latent))


def test_all_quantized_close_to_float(net, spec):
    qnet = QuantizedDenoiser(net, spec)
    worst = 0.0
    for seed in range(10):
        x, t, cond = make_batches(100 + seed, 1)[0]
        with torch.no_grad():
            ref = net(x, t, cond)
        rel = float(torch.linalg.vector_norm(qnet(x, t, cond) - ref)
                    / torch.linalg.vector_norm(ref))
        worst = max(worst, rel)
    assert 0.0 < worst <= 0.05


def test_quantized_forward_function_matches_class(net, spec, batches):
    x, t, cond = batches[0]
    assert torch.equal(quantized_forward(net, spec, x, t, cond),
                       QuantizedDenoiser(net, spec)(x, t, cond))


def test_quantized_unbatched_input(net, spec):
    x, t, cond = make_batches(55, 1, B=1)[0]
    single = CondBundle(audio=cond.audio[0], label=cond.label[0],
                        reference_embedding=cond.reference_embedding[0],
                        motion_latents=cond.motion_latents[0])
    qnet = QuantizedDenoiser(net, spec)
    out = qnet(x[0], 512.0, single)
    assert out.shape == x[0].shape
    assert torch.equal(out, qnet(x, t, cond)[0])


def test_quantized_spec_mismatch_rejected(net, spec):
    with pytest.raises(QuantSpecError):
        QuantizedDenoiser(net, QuantSpec(spec.layers[:3]))


def test_grouped_conv_rejected():
    mod = torch.nn.Conv2d(4, 4, 3, groups=2)
    entry = LayerQuant(layer="g", wscales=(1.0,) * 4, ascale=0.1, zero_point=128)
    with pytest.raises(QuantSpecError):
        IntegerLayer(mod, entry)


# ------------------------------------------------- sensitivity + fallback


def test_sensitivity_scan_deterministic(net, spec, batches):
    first = sensitivity_scan(net, spec, batches[:2])
    second = sensitivity_scan(net, spec, batches[:2])
    assert first == second
    assert [n for n, _ in first] != sorted(n for n, _ in first)  # actually ranked
    assert all(m >= 0 for _, m in first)


def test_exact_grid_layer_ranks_last(batches):
    net = perturbed_net()
    with torch.no_grad():
        # a zeroed modulation head quantizes exactly and contributes nothing
        net.cond_film1.weight.zero_()
        net.cond_film1.bias.zero_()
    spec = build_quant_spec(net, calibrate(net, batches))
    ranking = sensitivity_scan(net, spec, batches[:2])
    errors = dict(ranking)
    assert errors["cond_film1"] == 0.0
    order = [n for n, _ in ranking]
    for name, mse in ranking:
        if mse > 0.0:
            assert order.index(name) < order.index("cond_film1")


def _rel_metric(net, ref, xe, te, ce):
    norm = float(torch.linalg.vector_norm(ref))

    def metric(d):
        with torch.no_grad():
            out = d(xe, te, ce)
        return 1.0 - float(torch.linalg.vector_norm(out - ref)) / norm

    return metric


@pytest.fixture(scope="module")
def mixed_setup(net, spec, batches):
    ranking = sensitivity_scan(net, spec, batches[:2])
    xe, te, ce = make_batches(99, 1)[0]
    with torch.no_grad():
        ref = net(xe, te, ce)
    return ranking, _rel_metric(net, ref, xe, te, ce)


def test_mixed_infinite_target_no_fallbacks(net, spec, mixed_setup):
    ranking, metric = mixed_setup
    res = build_mixed_precision(net, spec, ranking, metric, target_drop=float("inf"))
    assert res.spec.fallback_names() == ()
    assert res.achieved_drop > 0.0


def test_mixed_zero_target_falls_all_the_way_back(net, spec, mixed_setup):
    ranking, metric = mixed_setup
    res = build_mixed_precision(net, spec, ranking, metric, target_drop=0.0)
    assert set(res.spec.fallback_names()) == {e.layer for e in spec.layers}
    assert res.achieved_drop == 0.0


def test_mixed_negative_target_infeasible(net, spec, mixed_setup):
    ranking, metric = mixed_setup
    with pytest.raises(InfeasibleError):
        build_mixed_precision(net, spec, ranking, metric, target_drop=-1.0)


def test_mixed_trajectory_monotone_and_stable(net, spec, mixed_setup):
    ranking, metric = mixed_setup
    res = build_mixed_precision(net, spec, ranking, metric, target_drop=0.0)
    drops = [d for _, d in res.trajectory]
    assert all(b <= a for a, b in zip(drops, drops[1:]))
    counts = [c for c, _ in res.trajectory]
    assert counts == list(range(len(counts)))
    again = build_mixed_precision(net, spec, ranking, metric, target_drop=0.0)
    assert again.spec == res.spec
    assert again.trajectory == res.trajectory


def test_mixed_moderate_target_partial_fallback(net, spec, mixed_setup):
    ranking, metric = mixed_setup
    full_drop = build_mixed_precision(net, spec, ranking, metric,
                                      target_drop=float("inf")).achieved_drop
    res = build_mixed_precision(net, spec, ranking, metric, target_drop=full_drop / 2)
    assert 0 < len(res.spec.fallback_names()) < len(spec.layers)
    assert res.achieved_drop <= full_drop / 2


# ----------------------------------------------------------------- cache


def test_calib_cache_roundtrip(tmp_path, net, batches):
    stats = calibrate(net, batches)
    ckpt = tmp_path / "model.ckpt"
    ckpt.write_bytes(b"pretend checkpoint bytes")
    crc = file_crc(ckpt)
    cache = tmp_path / "calib.json"
    save_calib_cache(stats, cache, crc)
    assert load_calib_cache(cache, crc) == stats
    assert load_calib_cache(cache, crc ^ 1) is None
    assert load_calib_cache(tmp_path / "absent.json", crc) is None


def test_file_crc_known_value(tmp_path):
    p = tmp_path / "blob"
    p.write_bytes(b"abc")
    assert file_crc(p) == 891568578  # zlib.crc32(b"abc")
    p.write_bytes(b"abd")
    assert file_crc(p) != 891568578


def test_calib_stats_dict_roundtrip(net, batches):
    stats = calibrate(net, batches, method="percentile", percentile=99.5)
    assert CalibStats.from_dict(stats.to_dict()) == stats


# ------------------------------------------------------------- benchmark


def test_matmul_throughput_reported():
    report = matmul_throughput_report(size=256, repeats=2)
    assert report["size"] == 256
    assert report["float_gops"] > 0 and report["int_gops"] > 0
    assert isinstance(report["inverted"], bool)
    ratio = report["int_over_float"]
    print(f"\nint8/float throughput ratio {ratio:.3f} "
          f"({'inverted' if report['inverted'] else 'int wins'})")
