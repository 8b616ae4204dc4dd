"""Unit tests for depth-partitioned networks and sub-network extraction."""

import numpy as np
import pytest

from odn.network import (
    DepthError,
    arch_block_specs,
    build_network,
    extract_odn,
    stem_channels,
)


def small_net(arch="resnet18", wm=0.25, classes=4, seed=0):
    return build_network(arch, 1, classes, wm, seed=seed)


class TestArchLayout:
    @pytest.mark.parametrize("arch,expected", [("resnet18", 8), ("resnet34", 16), ("resnet50", 16)])
    def test_depth_partition_counts(self, arch, expected):
        assert len(arch_block_specs(arch, stem_channels(arch))) == expected

    def test_resnet18_channels_and_strides(self):
        specs = arch_block_specs("resnet18", 64)
        assert [s.out_channels for s in specs] == [64, 64, 128, 128, 256, 256, 512, 512]
        assert [s.stride for s in specs] == [1, 1, 2, 1, 2, 1, 2, 1]
        assert all(s.kind == "basic" for s in specs)

    def test_resnet34_stage_pattern(self):
        specs = arch_block_specs("resnet34", 64)
        assert [s.out_channels for s in specs] == [64] * 3 + [128] * 4 + [256] * 6 + [512] * 3
        assert [i for i, s in enumerate(specs) if s.stride == 2] == [3, 7, 13]

    def test_resnet50_bottleneck_expansion(self):
        specs = arch_block_specs("resnet50", 64)
        assert all(s.kind == "bottleneck" for s in specs)
        assert [s.out_channels for s in specs] == [256] * 3 + [512] * 4 + [1024] * 6 + [2048] * 3
        assert specs[0].mid_channels == 64 and specs[-1].mid_channels == 512

    def test_projection_rule(self):
        specs = arch_block_specs("resnet18", 64)
        # projection iff stride != 1 or channel change
        assert [s.has_projection for s in specs] == [False, False, True, False,
                                                     True, False, True, False]
        # resnet50 block 1: stride 1 but 64 -> 256 channels still projects
        assert arch_block_specs("resnet50", 64)[0].has_projection

    def test_unknown_arch(self):
        with pytest.raises(ValueError, match="unknown arch_id"):
            arch_block_specs("vgg16", 64)

    def test_width_multiplier_scales_channels(self):
        specs = arch_block_specs("resnet18", 16, width_multiplier=0.25)
        assert [s.out_channels for s in specs] == [16, 16, 32, 32, 64, 64, 128, 128]


class TestDepthSemantics:
    def test_active_depth_round_trip(self):
        net = small_net()
        for d in range(1, net.depth_max + 1):
            net.activate_depth(d)
            assert net.active_depth == d

    @pytest.mark.parametrize("bad", [0, 9, -1, 100])
    def test_depth_out_of_range(self, bad):
        with pytest.raises(DepthError):
            small_net().activate_depth(bad)

    def test_forward_shape_per_depth(self, rng):
        net = small_net(classes=5)
        x = rng.normal(size=(3, 1, 16, 16)).astype(np.float32)
        for d in (1, 4, 8):
            assert net.forward_at_depth(x, d, training=True).shape == (3, 5)

    def test_forward_all_heads_matches_per_depth(self, rng):
        net = small_net()
        x = rng.normal(size=(2, 1, 16, 16)).astype(np.float32)
        all_logits = net.forward_all_heads(x, training=True)
        assert len(all_logits) == net.depth_max
        for d in (1, 3, 8):
            single = net.forward_at_depth(x, d, training=True)
            np.testing.assert_allclose(all_logits[d - 1].data, single.data,
                                       rtol=1e-5, atol=1e-6)

    def test_gradients_stop_at_active_depth(self, rng):
        net = small_net()
        x = rng.normal(size=(2, 1, 16, 16)).astype(np.float32)
        d = 3
        from odn.tensor import cross_entropy
        loss = cross_entropy(net.forward_at_depth(x, d, training=True), [0, 1])
        loss.backward()
        named = net.named_parameters()
        for name, p in named.items():
            touched = p.value.grad is not None
            in_prefix = (name.startswith("stem.")
                         or any(name.startswith(f"block{i:02d}.") for i in range(1, d + 1))
                         or name.startswith(f"head{d:02d}."))
            assert touched == in_prefix, name

    def test_trainable_parameters_are_prefix_plus_one_head(self):
        net = small_net()
        names = {p.name for p in net.trainable_parameters(2)}
        assert any(n.startswith("stem.") for n in names)
        assert any(n.startswith("block01.") for n in names)
        assert any(n.startswith("block02.") for n in names)
        assert any(n.startswith("head02.") for n in names)
        assert not any(n.startswith("block03.") for n in names)
        assert not any(n.startswith("head01.") for n in names)

    def test_trainable_capacity_grows_with_depth(self):
        net = build_network("resnet18", 3, 10)
        counts = [sum(p.value.size for p in net.trainable_parameters(d))
                  for d in range(1, 9)]
        assert counts == sorted(counts) and counts[0] < counts[-1]


class TestInitialization:
    def test_seed_reproducibility(self, rng):
        a, b = small_net(seed=7), small_net(seed=7)
        for name, p in a.named_parameters().items():
            np.testing.assert_array_equal(p.value.data, b.named_parameters()[name].value.data)

    def test_different_seeds_differ(self):
        a, b = small_net(seed=1), small_net(seed=2)
        assert not np.array_equal(a.stem_conv.weight.value.data,
                                  b.stem_conv.weight.value.data)

    def test_bn_init_and_buffers(self):
        net = small_net()
        np.testing.assert_array_equal(net.stem_bn.gamma.value.data, 1.0)
        np.testing.assert_array_equal(net.stem_bn.beta.value.data, 0.0)
        bufs = net.named_buffers()
        np.testing.assert_array_equal(bufs["stem.bn.running_mean"], 0.0)
        np.testing.assert_array_equal(bufs["stem.bn.running_var"], 1.0)

    def test_eval_mode_works_untrained(self, rng):
        # fresh buffers (0 mean, 1 var) make eval usable before any training
        net = small_net()
        out = net.forward_at_depth(rng.normal(size=(1, 1, 16, 16)).astype(np.float32),
                                   2, training=False)
        assert np.isfinite(out.data).all()

    def test_conv_init_scale(self):
        # fan-out std sqrt(2 / (9 * 64)) for the full-width stem
        net = build_network("resnet18", 3, 10, seed=3)
        w = net.stem_conv.weight.value.data
        assert abs(w.std() - np.sqrt(2.0 / (9 * 64))) < 0.005


class TestStateDict:
    def test_round_trip(self, rng):
        net = small_net(seed=5)
        state = net.state_dict()
        # scribble, then restore
        for p in net.all_parameters():
            p.value.data += 1.0
        net.load_state_dict(state)
        for name, p in net.named_parameters().items():
            np.testing.assert_array_equal(p.value.data, state[name])

    def test_state_dict_is_a_copy(self):
        net = small_net()
        state = net.state_dict()
        state["stem.conv.weight"] += 99.0
        assert not np.array_equal(net.stem_conv.weight.value.data, state["stem.conv.weight"])

    def test_unknown_key_rejected(self):
        with pytest.raises(KeyError):
            small_net().load_state_dict({"nonexistent.weight": np.zeros(1)})

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            small_net().load_state_dict({"stem.conv.weight": np.zeros((1, 1))})


class TestExtraction:
    def test_eval_logits_bit_identical(self, rng):
        net = small_net(seed=11)
        # push non-trivial running stats through first
        net.forward_at_depth(rng.normal(size=(8, 1, 16, 16)).astype(np.float32), 3, training=True)
        odn = extract_odn(net, 3)
        x = rng.normal(size=(5, 1, 16, 16)).astype(np.float32)
        parent = net.forward_at_depth(x, 3, training=False).data
        child = odn.forward(x, training=False).data
        assert np.array_equal(parent, child)

    def test_extraction_is_independent_copy(self, rng):
        net = small_net()
        odn = extract_odn(net, 2)
        x = rng.normal(size=(2, 1, 16, 16)).astype(np.float32)
        before = odn.forward(x, training=False).data.copy()
        net.stem_conv.weight.value.data += 10.0
        np.testing.assert_array_equal(odn.forward(x, training=False).data, before)

    def test_extracted_tensor_names_match_parent_prefix(self):
        net = small_net()
        odn = extract_odn(net, 2)
        names = set(odn.named_parameters())
        parent_names = set(net.named_parameters())
        assert names < parent_names
        assert all(n.split(".")[0] in ("stem", "block01", "block02", "head02") for n in names)

    def test_extract_depth_validated(self):
        with pytest.raises(DepthError):
            extract_odn(small_net(), 9)
