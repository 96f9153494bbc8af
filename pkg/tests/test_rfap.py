"""Tests for the receptive-field consistency checks."""

import numpy as np
import pytest

from mvcache.core.errors import InvalidArgumentError
from mvcache.core.motion import AccumMV, MVField, accumulate, downsample_field
from mvcache.core.network import build_network
from mvcache.core.rfap import (
    InjectionPlan,
    first_spatial_layer,
    merge_rfap,
    per_layer_flags_at_input,
    receptive_reach,
    rfap_input_check,
    rfap_per_layer_check,
)
from mvcache.core.tensor import RecomputeMask


def _random_net(rng: np.random.Generator, size: int) -> str:
    lines = [f"seed={int(rng.integers(0, 1000))}", f"input={size}x{size}x2"]
    channels = 2
    grid = size
    for _ in range(int(rng.integers(1, 5))):
        kind = rng.choice(["conv", "pointwise", "relu", "pool"])
        if kind == "conv":
            k = int(rng.choice([1, 2, 3, 5]))
            s = 2 if grid % 2 == 0 and grid > 4 and rng.random() < 0.5 else 1
            channels = int(rng.integers(1, 4))
            lines.append(f"conv k={k} s={s} out={channels}")
            grid //= s
        elif kind == "pointwise":
            channels = int(rng.integers(1, 4))
            lines.append(f"pointwise out={channels}")
        elif kind == "pool" and grid % 2 == 0 and grid > 4:
            lines.append("pool k=2")
            grid //= 2
        else:
            lines.append("relu")
    return "\n".join(lines) + "\n"


def _random_field(rng: np.random.Generator, size: int, block: int) -> AccumMV:
    acc = AccumMV.zeros(size, size)
    for _ in range(int(rng.integers(1, 4))):
        grid = size // block
        choices = np.array([-4, -2, 0, 2, 4, 8])
        dy = rng.choice(choices, size=(grid, grid))
        dx = rng.choice(choices, size=(grid, grid))
        if rng.random() < 0.5:
            dy[:] = dy[0, 0]
            dx[:] = dx[0, 0]
        acc = accumulate(acc, MVField(block, dy, dx))
    return acc


class TestInputCheck:
    """Tests for the compacted input-level check."""

    def test_zero_field_flags_nothing(self):
        """Test a static field is fully consistent."""
        assert not rfap_input_check(AccumMV.zeros(32, 32), 9, 4).any()

    def test_uniform_divisible_field(self):
        """Test a uniform divisible pan flags only around the invalid strip and borders."""
        field = AccumMV.uniform(32, 32, 0, 4)
        flags = rfap_input_check(field, 9, 4)
        assert flags.bits[:, :4].all()
        assert not flags.bits[5:27, 9:28].any()

    def test_indivisible_field_flags_everything(self):
        """Test displacements not divisible by S_max are flagged."""
        field = AccumMV.uniform(32, 32, 0, 2)
        assert rfap_input_check(field, 9, 4).all()

    def test_motion_boundary(self):
        """Test pixels within R_max/2 of a motion boundary are flagged."""
        dx = np.zeros((32, 32), dtype=np.int32)
        dx[:, 16:] = 4
        field = AccumMV(np.zeros((32, 32)), dx, np.ones((32, 32), bool))
        flags = rfap_input_check(field, 9, 4)
        assert flags.bits[10:20, 12:20].all()
        assert not flags.bits[10:20, 5:12].any()
        assert not flags.bits[10:20, 20:27].any()

    def test_reach_of_default_net(self, small_net):
        """Test odd kernels give the centred half extent on both sides."""
        half = small_net.r_max // 2
        assert receptive_reach(small_net) == (half, half)

    def test_even_kernel_leans_forward(self):
        """Test an even pool after a stride reaches only forward."""
        net = build_network("seed=1\ninput=16x16x1\nconv k=1 s=2 out=1\npool k=2\n")
        assert receptive_reach(net) == (0, 2)
        field = AccumMV(np.zeros((16, 16), int), np.zeros((16, 16), int), np.ones((16, 16), bool))
        field.dx[:, 10:] = 4
        flags = rfap_input_check(field, net.r_max, net.s_max, receptive_reach(net))
        assert flags.bits[:, 8].all()
        assert not flags.bits[:, 7].any()
        assert per_layer_flags_at_input(field, net).bits[0, 8]

    def test_bad_geometry(self):
        """Test R_max and S_max must be positive."""
        with pytest.raises(InvalidArgumentError):
            rfap_input_check(AccumMV.zeros(4, 4), 0, 1)


class TestPerLayerCheck:
    """Tests for the per-layer check."""

    def test_coherent_stride_two(self):
        """Test a divisible uniform field passes away from borders."""
        net = build_network("seed=0\ninput=16x16x1\nconv k=3 s=2 out=1\n")
        field = AccumMV(np.zeros((16, 16)), np.full((16, 16), 2), np.ones((16, 16), bool))
        flags = rfap_per_layer_check(field, downsample_field(field, 2), net.layers[0])
        assert flags.shape == (8, 8)
        assert not flags.bits[1:7, 1:7].any()

    def test_indivisible_anchor(self):
        """Test an odd displacement fails at stride 2."""
        net = build_network("seed=0\ninput=16x16x1\nconv k=3 s=2 out=1\n")
        field = AccumMV(np.zeros((16, 16)), np.full((16, 16), 1), np.ones((16, 16), bool))
        flags = rfap_per_layer_check(field, downsample_field(field, 2), net.layers[0])
        assert flags.all()

    def test_grid_mismatch(self):
        """Test fields must fit the stride."""
        net = build_network("seed=0\ninput=16x16x1\nconv k=3 s=2 out=1\n")
        with pytest.raises(InvalidArgumentError):
            rfap_per_layer_check(AccumMV.zeros(16, 16), AccumMV.zeros(16, 16), net.layers[0])


class TestDominance:
    """The compacted check covers every per-layer check."""

    def test_default_net_two_region(self, small_net, two_region_sequence):
        """Test dominance on accumulated scenario motion."""
        acc = AccumMV.zeros(64, 64)
        for mv in two_region_sequence.motion[1:5]:
            acc = accumulate(acc, mv)
            compact = rfap_input_check(acc, small_net.r_max, small_net.s_max)
            per_layer = per_layer_flags_at_input(acc, small_net)
            assert not (per_layer.bits & ~compact.bits).any()

    def test_random_nets_and_fields(self):
        """Test dominance by brute force on random small nets and fields."""
        rng = np.random.default_rng(99)
        for _ in range(100):
            net = build_network(_random_net(rng, 32))
            acc = _random_field(rng, 32, 8)
            compact = rfap_input_check(acc, net.r_max, net.s_max, receptive_reach(net))
            per_layer = per_layer_flags_at_input(acc, net)
            assert not (per_layer.bits & ~compact.bits).any()


class TestMergeRfap:
    """Tests for mapping flags onto spatial layers."""

    def test_masks_per_spatial_layer(self, small_net):
        """Test flags are OR-reduced onto each spatial layer's input grid."""
        flags = RecomputeMask.empty(64, 64)
        flags.bits[5, 6] = True
        plan = merge_rfap(RecomputeMask.empty(64, 64), flags, small_net)
        assert plan.layer_index == first_spatial_layer(small_net) == 0
        assert sorted(plan.masks) == [0, 2, 6]
        assert plan.mask_for(2).count() == 1
        assert plan.mask_for(6).shape == (32, 32)
        assert plan.mask_for(6).bits[2, 3]
        assert plan.flagged == 1
        assert plan.mask_for(4) is None

    def test_network_without_spatial_layers(self):
        """Test an all-pointwise network has nothing to inject."""
        net = build_network("seed=0\ninput=8x8x1\npointwise out=2\nrelu\n")
        plan = merge_rfap(RecomputeMask.empty(8, 8), RecomputeMask.full(8, 8), net)
        assert plan.layer_index is None
        assert plan.is_empty()
        assert InjectionPlan.empty().mask is None

    def test_grid_mismatch(self, small_net):
        """Test masks must cover the network input."""
        with pytest.raises(InvalidArgumentError):
            merge_rfap(RecomputeMask.empty(8, 8), RecomputeMask.empty(8, 8), small_net)
