from dataclasses import replace

import numpy as np
import pytest
import torch

from conftest import tiny_model_config
from sparselift.errors import SparseliftError
from sparselift.network import (ModelConfig, UpliftModel, default_reduction_strides,
                                flops_breakdown, flops_estimate, grad_check, reduction_chain)
from sparselift.sequencing import StrideSchedule, token_layout
from sparselift.training import loss_total


def make_inputs(config, batch=2, seed=0, dtype=torch.float32):
    layout = token_layout(config.schedule)
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(batch, layout.n_in, config.joints, 2, generator=gen, dtype=dtype)
    return x, layout


class TestSpatialStage:
    @pytest.mark.parametrize("n_in", [1, 3, 7])
    def test_token_shape(self, tiny_model, n_in):
        x = torch.randn(2, n_in, 5, 2)
        tokens = tiny_model.spatial_forward(x)
        assert tokens.shape == (2, n_in, 8)

    def test_zero_blocks_reduce_to_embed_and_condense(self):
        torch.manual_seed(0)
        cfg = tiny_model_config(blocks_spatial=0)
        model = UpliftModel(cfg).eval()
        x = torch.randn(1, 3, 5, 2)
        tokens = model.spatial_forward(x)
        embedded = model.joint_embed(x.reshape(3, 5, 2)) + model.spatial_pos
        expected = model.condense(embedded.reshape(1, 3, 5 * cfg.d_joint))
        assert torch.equal(tokens, expected)

    def test_identical_poses_identical_tokens(self, tiny_model):
        tiny_model.eval()
        pose = torch.randn(1, 1, 5, 2)
        x = torch.cat([pose, pose], dim=1)
        tokens = tiny_model.spatial_forward(x)
        assert torch.equal(tokens[0, 0], tokens[0, 1])


class TestAssembly:
    def test_dense_layout_ignores_upsample_token(self, tiny_model):
        layout = token_layout(StrideSchedule(9, 1, 1))
        tokens = torch.randn(1, 9, 8)
        y = tiny_model.assemble_tokens(tokens, layout)
        assert torch.equal(y, tokens + tiny_model.temporal_pos)

    def test_upsample_slots_share_token_bitwise(self, tiny_model):
        with torch.no_grad():
            tiny_model.temporal_pos.zero_()
        layout = token_layout(StrideSchedule(9, 4, 1))
        tokens = torch.randn(1, 3, 8)
        y = tiny_model.assemble_tokens(tokens, layout)
        for slot in layout.upsample_slots:
            assert torch.equal(y[0, slot], tiny_model.upsample_token)
        for slot, token in zip(layout.pose_slots, tokens[0]):
            assert torch.equal(y[0, slot], token)

    def test_token_count_mismatch_rejected(self, tiny_model):
        layout = token_layout(StrideSchedule(9, 4, 1))
        with pytest.raises(SparseliftError):
            tiny_model.assemble_tokens(torch.randn(1, 5, 8), layout)


class TestDuta:
    def test_block1_attention_restricted_to_pose_slots(self):
        torch.manual_seed(3)
        cfg = tiny_model_config(blocks_temporal=2)
        model = UpliftModel(cfg).eval()
        x, layout = make_inputs(cfg)
        out = model(x, layout, collect_attention=True)
        w = out.attention["temporal.0"]
        assert w.shape == (2, cfg.heads_temporal, 9, 9)
        upsample = list(layout.upsample_slots)
        pose = list(layout.pose_slots)
        assert torch.all(w[:, :, :, upsample] == 0)
        sums = w[:, :, :, pose].sum(dim=-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)

    def test_later_blocks_attend_everywhere(self):
        torch.manual_seed(3)
        cfg = tiny_model_config(blocks_temporal=2)
        model = UpliftModel(cfg).eval()
        x, layout = make_inputs(cfg)
        w = model(x, layout, collect_attention=True).attention["temporal.1"]
        assert torch.all(w > 0)

    def test_disabled_duta_attends_to_upsample_slots(self):
        torch.manual_seed(3)
        cfg = tiny_model_config(duta_enabled=False)
        model = UpliftModel(cfg).eval()
        x, layout = make_inputs(cfg)
        w = model(x, layout, collect_attention=True).attention["temporal.0"]
        assert torch.all(w[:, :, :, list(layout.upsample_slots)] > 0)

    def test_dense_layout_makes_duta_a_noop(self):
        torch.manual_seed(3)
        cfg = tiny_model_config(schedule=StrideSchedule(9, 1, 1))
        model = UpliftModel(cfg).eval()
        x, layout = make_inputs(cfg)
        w = model(x, layout, collect_attention=True).attention["temporal.0"]
        assert torch.all(w > 0)

    def test_upsample_token_gradient_blocked_through_block1_kv(self):
        torch.manual_seed(5)
        cfg = tiny_model_config(blocks_temporal=1)
        model = UpliftModel(cfg).eval()
        x, layout = make_inputs(cfg)
        out = model(x, layout)
        # Pose-slot outputs never mix with the upsampling token in block 1:
        # queries come from pose tokens, keys/values only from pose slots.
        target = out.sequence[:, list(layout.pose_slots)].sum()
        grad = torch.autograd.grad(target, model.upsample_token, retain_graph=True,
                                   allow_unused=True)[0]
        assert grad is None or torch.all(grad == 0)
        # The same reduction over upsample slots does depend on the token.
        target_up = out.sequence[:, list(layout.upsample_slots)].sum()
        grad_up = torch.autograd.grad(target_up, model.upsample_token)[0]
        assert torch.any(grad_up != 0)


class TestPositionalEmbedding:
    def test_swapping_upsample_pe_rows_changes_those_outputs(self):
        torch.manual_seed(11)
        cfg = tiny_model_config()
        model = UpliftModel(cfg).eval()
        x, layout = make_inputs(cfg)
        s1, s2 = layout.upsample_slots[0], layout.upsample_slots[1]
        base = model(x, layout).sequence
        assert not torch.allclose(base[:, s1], base[:, s2])
        with torch.no_grad():
            row = model.temporal_pos[0, s1].clone()
            model.temporal_pos[0, s1] = model.temporal_pos[0, s2]
            model.temporal_pos[0, s2] = row
        swapped = model(x, layout).sequence
        assert not torch.allclose(base[:, s1], swapped[:, s1])
        assert not torch.allclose(base[:, s2], swapped[:, s2])


class TestStridedStage:
    @pytest.mark.parametrize("n_out,strides,expected", [
        (71, (3, 5, 5), [71, 24, 5, 1]),
        (41, (4, 4, 3), [41, 11, 3, 1]),
        (1, (1, 1, 1), [1, 1, 1, 1]),
    ])
    def test_reduction_chain(self, n_out, strides, expected):
        assert reduction_chain(n_out, strides) == expected

    def test_default_strides_presets(self):
        assert default_reduction_strides(71, 3) == (3, 5, 5)
        assert default_reduction_strides(41, 3) == (4, 4, 3)

    def test_default_strides_always_reach_one(self):
        for n_out in range(1, 130):
            for blocks in (1, 2, 3, 4):
                strides = default_reduction_strides(n_out, blocks)
                assert len(strides) == blocks
                assert reduction_chain(n_out, strides)[-1] == 1

    def test_invalid_strides_rejected_at_config_time(self):
        with pytest.raises(SparseliftError):
            tiny_model_config(reduction_strides=(2,)).validate()

    def test_passthrough_length_one(self):
        torch.manual_seed(0)
        cfg = tiny_model_config(schedule=StrideSchedule(1, 1, 1), reduction_strides=(1,))
        model = UpliftModel(cfg).eval()
        x, layout = make_inputs(cfg)
        out = model(x, layout)
        assert out.sequence.shape == (2, 1, 5, 3)
        assert out.center.shape == (2, 5, 3)


class TestFullForward:
    def test_eval_mode_deterministic_bitwise(self):
        torch.manual_seed(2)
        cfg = tiny_model_config(drop_path_rate=0.2)
        model = UpliftModel(cfg).eval()
        x, layout = make_inputs(cfg)
        a = model(x, layout)
        b = model(x, layout)
        assert torch.equal(a.sequence, b.sequence)
        assert torch.equal(a.center, b.center)

    def test_train_mode_stochastic_depth_varies(self):
        torch.manual_seed(2)
        cfg = tiny_model_config(drop_path_rate=0.5, blocks_temporal=2, blocks_spatial=2)
        model = UpliftModel(cfg).train()
        x, layout = make_inputs(cfg)
        outs = [model(x, layout).sequence for _ in range(6)]
        assert any(not torch.equal(outs[0], o) for o in outs[1:])

    def test_output_shapes(self, tiny_model):
        x, layout = make_inputs(tiny_model.config, batch=3)
        out = tiny_model(x, layout)
        assert out.sequence.shape == (3, 9, 5, 3)
        assert out.center.shape == (3, 5, 3)

    def test_disabling_strided_stage_takes_center_slot(self):
        torch.manual_seed(4)
        cfg = tiny_model_config()
        model = UpliftModel(cfg).eval()
        x, layout = make_inputs(cfg)
        base = model(x, layout)
        ablated = UpliftModel(replace(cfg, strided_enabled=False)).eval()
        ablated.load_state_dict(model.state_dict())
        out = ablated(x, layout)
        assert torch.equal(out.sequence, base.sequence)
        assert torch.equal(out.center, out.sequence[:, layout.center_slot])

    def test_disabling_temporal_routes_tokens_to_strided(self):
        torch.manual_seed(4)
        cfg = tiny_model_config()
        model = UpliftModel(cfg).eval()
        ablated = UpliftModel(replace(cfg, temporal_enabled=False)).eval()
        ablated.load_state_dict(model.state_dict())
        x, layout = make_inputs(cfg)
        tokens = ablated.spatial_forward(x)
        y = ablated.assemble_tokens(tokens, layout)
        expected_center = ablated.strided_forward(y)
        out = ablated(x, layout)
        assert torch.equal(out.center, expected_center)


class TestFlops:
    def test_preset_within_band_of_reference(self):
        cfg = ModelConfig(joints=17, schedule=StrideSchedule(351, 20, 5))
        assert 966e6 * 0.7 <= flops_estimate(cfg) <= 966e6 * 1.3

    def test_monotone_in_depth_window_width(self):
        base = ModelConfig(joints=17, schedule=StrideSchedule(351, 20, 5))
        for k in range(1, 6):
            a = flops_estimate(replace(base, blocks_temporal=k))
            b = flops_estimate(replace(base, blocks_temporal=k + 1))
            assert b > a
        for d1, d2 in [(174, 348), (348, 522), (522, 696)]:
            assert (flops_estimate(replace(base, d_temp=d2))
                    > flops_estimate(replace(base, d_temp=d1)))
        windows = [81, 161, 351]
        values = [flops_estimate(ModelConfig(joints=17, schedule=StrideSchedule(n, 20, 5)))
                  for n in windows]
        assert values[0] < values[1] < values[2]

    def test_sequence_head_counts_linear_map_convention(self):
        # With no temporal blocks the temporal share is exactly the head:
        # one linear map d_in -> d_out over length L costs 2*L*d_in*d_out.
        cfg = tiny_model_config(blocks_temporal=0)
        share = flops_breakdown(cfg)["temporal"]
        assert share == 2 * 9 * 8 * (5 * 3)

    def test_spatial_cost_scales_with_input_count_only(self):
        dense = ModelConfig(joints=17, schedule=StrideSchedule(81, 2, 2))
        sparse = ModelConfig(joints=17, schedule=StrideSchedule(81, 20, 2))
        bd, bs = flops_breakdown(dense), flops_breakdown(sparse)
        assert bd["spatial"] > bs["spatial"]
        assert bd["strided"] == bs["strided"]
        # Temporal costs differ only through the DUTA key/value restriction.
        assert bd["temporal"] >= bs["temporal"]


class TestGradCheck:
    def test_tiny_config_matches_finite_differences(self):
        torch.manual_seed(7)
        cfg = tiny_model_config()
        model = UpliftModel(cfg).double().eval()
        x, layout = make_inputs(cfg, dtype=torch.float64, seed=1)
        gen = torch.Generator().manual_seed(2)
        gt_seq = 100.0 * torch.randn(2, layout.n_out, cfg.joints, 3, generator=gen, dtype=torch.float64)
        gt_center = gt_seq[:, layout.center_slot]

        def loss_fn(m):
            out = m(x, layout)
            return loss_total(out.sequence, out.center, gt_seq, gt_center, 0, 0.5, 0.5)

        result = grad_check(model, loss_fn, probes=60, epsilon=1e-4, seed=0)
        assert result.max_rel_error < 1e-3
        assert result.failures == []

    def test_rejects_single_precision(self, tiny_model):
        with pytest.raises(SparseliftError):
            grad_check(tiny_model, lambda m: torch.tensor(0.0), probes=1)
