import numpy as np
import pytest
import torch

from vsrlab.model import (
    SENTINEL_INIT,
    ConditionSpec,
    FlowWarpVSR,
    ModelSpec,
    RecurrentState,
    build_model,
    depth_to_space,
    frame_number_channel,
    init_state,
    load_checkpoint,
    save_checkpoint,
    space_to_depth,
    upscale_flow,
    warp,
)

TINY = ModelSpec(scale=4, flow_widths=(6, 6, 6), sr_width=8, sr_blocks=2)


def tiny_model(seed=0, dtype=torch.float64, **kwargs):
    spec = TINY if not kwargs else ModelSpec(
        scale=kwargs.pop("scale", 4),
        flow_widths=kwargs.pop("flow_widths", (6, 6, 6)),
        sr_width=kwargs.pop("sr_width", 8),
        sr_blocks=kwargs.pop("sr_blocks", 2),
        **kwargs,
    )
    return build_model(spec, seed=seed, dtype=dtype)


class TestInitState:
    def test_zeros(self):
        s = init_state("zeros", (4, 4, 3))
        assert torch.all(s.prev_sr == 0)
        assert s.tag == SENTINEL_INIT
        assert s.prev_lr is None

    def test_noise_reproducible(self):
        a = init_state("uniform_noise", (4, 4, 3), torch.Generator().manual_seed(7))
        b = init_state("uniform_noise", (4, 4, 3), torch.Generator().manual_seed(7))
        assert torch.equal(a.prev_sr, b.prev_sr)
        assert a.prev_sr.min() >= 0.0 and a.prev_sr.max() < 1.0

    def test_different_seeds_differ(self):
        a = init_state("uniform_noise", (4, 4, 3), torch.Generator().manual_seed(1))
        b = init_state("uniform_noise", (4, 4, 3), torch.Generator().manual_seed(2))
        assert not torch.equal(a.prev_sr, b.prev_sr)

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="init kind"):
            init_state("gauss", (4, 4, 3))


class TestFlowEstimate:
    def test_bounded_by_flow_max(self):
        m = tiny_model()
        # Extreme weights cannot push the flow past the saturation bound.
        with torch.no_grad():
            for p in m.parameters():
                p.mul_(50.0)
        flow = m.flow_estimate(torch.rand(6, 6, 3, dtype=torch.float64),
                               torch.rand(6, 6, 3, dtype=torch.float64))
        assert flow.abs().max() <= m.spec.flow_max

    def test_identical_inputs_nonzero_flow_allowed(self):
        m = tiny_model()
        x = torch.rand(6, 6, 3, dtype=torch.float64)
        m.flow_estimate(x, x)  # no constraint, just must not fail

    def test_output_shape(self):
        m = tiny_model()
        flow = m.flow_estimate(torch.rand(5, 7, 3, dtype=torch.float64),
                               torch.rand(5, 7, 3, dtype=torch.float64))
        assert flow.shape == (5, 7, 2)

    def test_shape_mismatch(self):
        m = tiny_model()
        with pytest.raises(ValueError, match="mismatch"):
            m.flow_estimate(torch.rand(5, 7, 3, dtype=torch.float64),
                            torch.rand(5, 8, 3, dtype=torch.float64))


class TestUpscaleFlow:
    def test_constant_flow_unit_conversion(self):
        flow = torch.zeros(4, 4, 2, dtype=torch.float64)
        flow[..., 0] = 1.0
        up = upscale_flow(flow, 4)
        assert up.shape == (16, 16, 2)
        assert torch.allclose(up[..., 0], torch.full((16, 16), 4.0, dtype=torch.float64))
        assert torch.all(up[..., 1] == 0.0)

    def test_zero_flow_stays_zero(self):
        up = upscale_flow(torch.zeros(3, 5, 2), 4)
        assert torch.all(up == 0.0)

    def test_shape(self):
        assert upscale_flow(torch.zeros(16, 16, 2), 4).shape == (64, 64, 2)


class TestWarp:
    def test_zero_flow_exact_identity(self):
        for h, w in ((7, 5), (11, 13)):
            img = torch.rand(h, w, 3, dtype=torch.float64)
            out = warp(img, torch.zeros(h, w, 2, dtype=torch.float64))
            assert torch.equal(out, img)

    def test_integer_shift_matches_index_shift_oracle(self):
        img = torch.rand(10, 12, 3, dtype=torch.float64)
        k = 3
        flow = torch.zeros(10, 12, 2, dtype=torch.float64)
        flow[..., 0] = k
        out = warp(img, flow)
        # interior: output[y, x] = img[y, x + k]
        assert torch.equal(out[:, :12 - k], img[:, k:])

    def test_border_clamping(self):
        img = torch.rand(4, 4, 1, dtype=torch.float64)
        flow = torch.full((4, 4, 2), 100.0, dtype=torch.float64)
        out = warp(img, flow)
        assert torch.allclose(out, img[-1, -1].expand(4, 4, 1))

    def test_gradient_wrt_flow_matches_finite_differences(self):
        torch.manual_seed(0)
        img = torch.rand(6, 6, 2, dtype=torch.float64)
        # keep fractional parts away from bilinear cell boundaries
        flow = (torch.rand(6, 6, 2, dtype=torch.float64) - 0.5) * 3
        flow = flow.floor() + 0.2 + 0.6 * torch.rand(6, 6, 2, dtype=torch.float64)
        flow.requires_grad_(True)
        weights = torch.rand(6, 6, 2, dtype=torch.float64)
        loss = (warp(img, flow) * weights).sum()
        loss.backward()
        eps = 1e-6
        rng = np.random.default_rng(0)
        for _ in range(20):
            y, x, c = rng.integers(0, 6), rng.integers(0, 6), rng.integers(0, 2)
            probe = flow.detach().clone()
            probe[y, x, c] += eps
            up = (warp(img, probe) * weights).sum()
            probe[y, x, c] -= 2 * eps
            down = (warp(img, probe) * weights).sum()
            fd = (up - down) / (2 * eps)
            an = flow.grad[y, x, c]
            rel = abs(fd - an) / max(abs(an), abs(fd), 1e-12)
            assert rel < 1e-4, f"flow grad mismatch at {(y, x, c)}: {an} vs {fd}"

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            warp(torch.rand(4, 4, 3), torch.zeros(4, 5, 2))


class TestSpaceToDepth:
    def test_shape(self):
        assert space_to_depth(torch.rand(64, 64, 3), 4).shape == (16, 16, 48)

    def test_round_trip_exact(self):
        x = torch.rand(8, 12, 3, dtype=torch.float64)
        assert torch.equal(depth_to_space(space_to_depth(x, 4), 4), x)
        assert torch.equal(space_to_depth(depth_to_space(space_to_depth(x, 2), 2), 2),
                           space_to_depth(x, 2))

    def test_factor_one_identity(self):
        x = torch.rand(5, 6, 3)
        assert torch.equal(space_to_depth(x, 1), x)

    def test_non_divisible(self):
        with pytest.raises(ValueError, match="divisible"):
            space_to_depth(torch.rand(6, 6, 3), 4)


class TestStep:
    def test_shapes(self):
        m = tiny_model()
        lr = torch.rand(16, 16, 3, dtype=torch.float64)
        sr, state = m.step(lr, m.initial_state(1, 16, 16))
        assert sr.shape == (64, 64, 3)
        assert state.tag == 0
        assert torch.equal(state.prev_lr.squeeze(0), lr)

    def test_purity_bitwise(self):
        m = tiny_model()
        lr = torch.rand(8, 8, 3, dtype=torch.float64)
        state = m.initial_state(1, 8, 8, "uniform_noise",
                                torch.Generator().manual_seed(3))
        a, _ = m.step(lr, state)
        b, _ = m.step(lr, state)
        assert torch.equal(a, b)

    def test_state_shape_mismatch(self):
        m = tiny_model()
        with pytest.raises(ValueError, match="inconsistent"):
            m.step(torch.rand(8, 8, 3, dtype=torch.float64), m.initial_state(1, 16, 16))

    def test_condition_channel_required_iff_enabled(self):
        cond_spec = ConditionSpec(enabled=True, t_max_norm=30)
        m = build_model(
            ModelSpec(flow_widths=(6,), sr_width=8, sr_blocks=1, condition=cond_spec),
            dtype=torch.float64,
        )
        lr = torch.rand(8, 8, 3, dtype=torch.float64)
        with pytest.raises(ValueError, match="condition"):
            m.step(lr, m.initial_state(1, 8, 8))
        cond = frame_number_channel(5, cond_spec, 8, 8, dtype=torch.float64)
        sr, _ = m.step(lr, m.initial_state(1, 8, 8), cond)
        assert sr.shape == (32, 32, 3)
        plain = tiny_model()
        with pytest.raises(ValueError, match="disabled"):
            plain.step(lr, plain.initial_state(1, 8, 8), cond)

    def test_unrolled_gradient_matches_finite_differences(self):
        # end-to-end analytic gradient over a 3-step unroll, double precision
        m = tiny_model(seed=1)
        torch.manual_seed(11)
        lrs = [torch.rand(8, 8, 3, dtype=torch.float64) for _ in range(3)]
        hrs = [torch.rand(32, 32, 3, dtype=torch.float64) for _ in range(3)]

        def unrolled_loss():
            state = RecurrentState(
                prev_sr=torch.zeros(1, 32, 32, 3, dtype=torch.float64), tag=SENTINEL_INIT
            )
            total = 0.0
            for lr, hr in zip(lrs, hrs):
                sr, state = m.step(lr, state)
                total = total + ((sr - hr) ** 2).mean()
            return total

        loss = unrolled_loss()
        m.zero_grad()
        loss.backward()
        params = list(m.parameters())
        rng = np.random.default_rng(2)
        flat = [(i, j) for i, p in enumerate(params) for j in range(p.numel())]
        picks = rng.choice(len(flat), size=12, replace=False)
        eps = 1e-6
        for pick in picks:
            i, j = flat[pick]
            with torch.no_grad():
                orig = params[i].view(-1)[j].item()
                params[i].view(-1)[j] = orig + eps
                up = unrolled_loss().item()
                params[i].view(-1)[j] = orig - eps
                down = unrolled_loss().item()
                params[i].view(-1)[j] = orig
            fd = (up - down) / (2 * eps)
            an = params[i].grad.view(-1)[j].item()
            rel = abs(fd - an) / max(abs(an), abs(fd), 1e-12)
            assert rel < 1e-4, f"param ({i},{j}): analytic {an} vs fd {fd}"


class TestFrameNumberChannel:
    def test_zero(self):
        spec = ConditionSpec(enabled=True, t_max_norm=300)
        assert torch.all(frame_number_channel(0, spec, 4, 4) == 0.0)

    def test_at_normalizer_is_one(self):
        spec = ConditionSpec(enabled=True, t_max_norm=300)
        assert torch.all(frame_number_channel(300, spec, 4, 4) == 1.0)

    def test_clamps_beyond_normalizer(self):
        spec = ConditionSpec(enabled=True, t_max_norm=300)
        assert torch.all(frame_number_channel(600, spec, 4, 4) == 1.0)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            frame_number_channel(-1, ConditionSpec(enabled=True), 4, 4)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        m = tiny_model(seed=5, dtype=torch.float32)
        save_checkpoint(m, tmp_path / "ck", iteration=17, seed=5)
        loaded, manifest = load_checkpoint(tmp_path / "ck")
        assert manifest["iteration"] == 17
        assert manifest["seed"] == 5
        for a, b in zip(m.state_dict().values(), loaded.state_dict().values()):
            assert torch.equal(a, b)
        lr = torch.rand(8, 8, 3)
        sa, _ = m.step(lr, m.initial_state(1, 8, 8))
        sb, _ = loaded.step(lr, loaded.initial_state(1, 8, 8))
        assert torch.equal(sa, sb)

    def test_manifest_records_architecture(self, tmp_path):
        m = tiny_model(seed=0)
        save_checkpoint(m, tmp_path / "ck")
        _, manifest = load_checkpoint(tmp_path / "ck")
        assert manifest["model"]["sr_width"] == 8
        assert manifest["dtype"] == "float64"
