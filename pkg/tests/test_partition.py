import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hfvit.errors import ContractError, DataError
from hfvit.partition import (CuNode, PartitionLabel, decode_label, decode_prediction, derive_mask, derive_masks,
                             encode_tree, enumerate_trees, format_line, parse_line, rasterize, read_partition_file,
                             tree_from_bits, tree_roundtrip, validate_tree)

RASTER = ((0, 0), (1, 0), (0, 1), (1, 1))


def leaf(x, y, s):
    return CuNode(x, y, s)


def split(x, y, s, kids):
    return CuNode(x, y, s, tuple(kids))


def independent_trees():
    """Build every legal tree node by node (no bit strings involved)."""
    def options32(x, y):
        yield leaf(x, y, 32)
        for pattern in itertools.product((False, True), repeat=4):
            kids = []
            for (dx, dy), s in zip(RASTER, pattern):
                cx, cy = x + 16 * dx, y + 16 * dy
                kids.append(split(cx, cy, 16, [leaf(cx + 8 * ex, cy + 8 * ey, 8) for ex, ey in RASTER])
                            if s else leaf(cx, cy, 16))
            yield split(x, y, 32, kids)

    yield leaf(0, 0, 64)
    per_quadrant = [list(options32(32 * dx, 32 * dy)) for dx, dy in RASTER]
    for combo in itertools.product(*per_quadrant):
        yield split(0, 0, 64, combo)


def closed_form_masks(labels):
    y0 = labels[:, 0]
    cols = [np.ones_like(y0)] + [y0] * 4 + [y0 & labels[:, 1 + i] for i in range(4) for _ in range(4)]
    return np.stack(cols, axis=1)


labels_st = st.lists(st.integers(0, 1), min_size=21, max_size=21)


class TestLabel:
    def test_string_round_trip(self):
        s = "110010000100000000001"
        assert str(PartitionLabel.from_string(s)) == s

    @pytest.mark.parametrize("bad", ["0" * 20, "0" * 22, "2" + "0" * 20, "a" * 21])
    def test_bad_strings(self, bad):
        with pytest.raises(DataError):
            PartitionLabel.from_string(bad)

    def test_levels(self):
        label = PartitionLabel.from_string("1" + "1010" + "0" * 15 + "1")
        assert label.y0 == 1 and label.y1 == (1, 0, 1, 0) and label.y2[-1] == 1


class TestMasks:
    def test_unsplit_root(self):
        assert derive_mask(PartitionLabel((0,) * 21)).bits == (1,) + (0,) * 20

    def test_all_ones(self):
        assert derive_mask(PartitionLabel((1,) * 21)).bits == (1,) * 21

    def test_first_quadrant_only(self):
        mask = derive_mask(PartitionLabel.from_string("1" + "1000" + "0" * 16))
        assert mask.bits[5:] == (1, 1, 1, 1) + (0,) * 12

    def test_million_random_labels_match_closed_form(self):
        labels = np.random.default_rng(7).integers(0, 2, size=(1_000_000, 21), dtype=np.uint8)
        assert np.array_equal(derive_masks(labels), closed_form_masks(labels))

    @given(labels_st)
    def test_mask_ignores_own_level_values(self, bits):
        arr = np.array(bits, dtype=np.uint8)
        flipped = arr.copy()
        flipped[5:] ^= 1  # level-3 bits never influence any mask position
        assert np.array_equal(derive_masks(arr), derive_masks(flipped))


class TestTrees:
    def test_single_leaf(self):
        tree = leaf(0, 0, 64)
        assert encode_tree(tree).bits == (0,) * 21 and tree_roundtrip(tree) == tree

    def test_full_depth(self):
        tree = tree_from_bits([1] * 21)
        assert encode_tree(tree).bits == (1,) * 21
        assert sum(1 for _ in tree.leaves()) == 64 and tree_roundtrip(tree) == tree

    def test_exhaustive_round_trip(self):
        count = 0
        labels = set()
        for tree in independent_trees():
            label = encode_tree(tree)
            assert decode_label(label) == tree
            labels.add(label.bits)
            count += 1
        assert count == len(labels) == 1 + 17 ** 4 == 83_522

    def test_library_enumeration_agrees(self):
        assert sum(1 for _ in enumerate_trees()) == 83_522

    def test_illegal_trees(self):
        with pytest.raises(ContractError):
            validate_tree(split(0, 0, 64, [leaf(0, 0, 32)] * 4))  # misplaced children
        eights = [leaf(x, y, 4) for x, y in RASTER]
        with pytest.raises(ContractError):
            validate_tree(split(0, 0, 8, eights))

    @given(labels_st)
    def test_canonical_bits_idempotent(self, bits):
        canon = encode_tree(tree_from_bits(bits))
        assert encode_tree(decode_label(canon)) == canon
        # a canonical label never has set bits at masked positions
        assert np.all(canon.array() <= derive_mask(canon).array())


class TestDecodePrediction:
    def test_all_low(self):
        assert decode_prediction(np.full(21, 0.4)) == leaf(0, 0, 64)

    def test_root_only(self):
        tree = decode_prediction(np.array([0.9] + [0.1] * 20))
        assert [(n.x, n.y, n.size) for n in tree.leaves()] == [(0, 0, 32), (32, 0, 32), (0, 32, 32), (32, 32, 32)]

    def test_children_ignored_under_unsplit_parent(self):
        assert decode_prediction(np.array([0.2] + [0.99] * 20)) == leaf(0, 0, 64)

    def test_threshold_inclusive(self):
        assert decode_prediction(np.array([0.5] + [0.0] * 20)).children is not None

    def test_non_finite(self):
        with pytest.raises(DataError):
            decode_prediction(np.array([np.nan] * 21))


class TestRasterize:
    def test_single_cu_border(self):
        boundary, sizes = rasterize(leaf(0, 0, 64))
        expected = np.zeros((64, 64), dtype=bool)
        expected[0, :] = expected[-1, :] = expected[:, 0] = expected[:, -1] = True
        assert np.array_equal(boundary, expected) and np.all(sizes == 64)

    def test_full_split_grid(self):
        boundary, sizes = rasterize(tree_from_bits([1] * 21))
        edge = np.isin(np.arange(64) % 8, (0, 7))
        assert np.array_equal(boundary, edge[:, None] | edge[None, :]) and np.all(sizes == 8)

    def test_mixed_fixture(self):
        # root split; top-left 32 split; its top-right 16 split into 8s
        bits = "1" + "1000" + "0100" + "0" * 12
        boundary, sizes = rasterize(decode_label(PartitionLabel.from_string(bits)))
        expected_sizes = np.full((64, 64), 32)
        expected_sizes[:32, :32] = 16
        expected_sizes[:16, 16:32] = 8
        assert np.array_equal(sizes, expected_sizes)
        expected = np.zeros((64, 64), dtype=bool)
        for x, y, s in [(32, 0, 32), (0, 32, 32), (32, 32, 32), (0, 0, 16), (0, 16, 16), (16, 16, 16),
                        (16, 0, 8), (24, 0, 8), (16, 8, 8), (24, 8, 8)]:
            expected[y, x:x + s] = expected[y + s - 1, x:x + s] = True
            expected[y:y + s, x] = expected[y:y + s, x + s - 1] = True
        assert np.array_equal(boundary, expected)


class TestTextFormat:
    def test_line_round_trip(self):
        line = format_line(128, 64, [1] * 21)
        assert line == "128 64 : " + "1" * 21
        x, y, label = parse_line(line)
        assert (x, y, label.bits) == (128, 64, (1,) * 21)

    def test_malformed(self):
        with pytest.raises(DataError):
            parse_line("12 : 0")

    def test_file(self, tmp_path):
        path = tmp_path / "p.txt"
        path.write_text("0 0 : " + "0" * 21 + "\n\n64 0 : " + "1" * 21 + "\n")
        assert [(x, y) for x, y, _ in read_partition_file(path)] == [(0, 0), (64, 0)]
