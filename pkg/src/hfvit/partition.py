"""Quad-tree split labels, validity masks and CU trees.

Label layout (21 bits): ``y0`` (64x64), ``y1[0..3]`` (32x32, raster),
``y2[4*i + j]`` (16x16 child ``j`` of 32x32 block ``i``, raster within raster).
"""

from __future__ import annotations

import itertools
from collections.abc import Iterator
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DataError

NUM_BITS = 21
LEVEL_SLICES = (slice(0, 1), slice(1, 5), slice(5, 21))
CTU = 64
MIN_CU = 8

# raster offsets of the four children inside a parent, in units of the child size
_CHILD_OFFSETS = ((0, 0), (1, 0), (0, 1), (1, 1))  # (dx, dy)


@dataclass(frozen=True)
class PartitionLabel:
    bits: tuple[int, ...]

    def __post_init__(self):
        if len(self.bits) != NUM_BITS or any(b not in (0, 1) for b in self.bits):
            raise DataError(f"a label needs 21 bits in {{0, 1}}, got {self.bits!r}")

    @classmethod
    def from_array(cls, arr) -> "PartitionLabel":
        return cls(tuple(int(b) for b in np.asarray(arr).reshape(-1)))

    @classmethod
    def from_string(cls, s: str) -> "PartitionLabel":
        s = s.strip()
        if len(s) != NUM_BITS or set(s) - {"0", "1"}:
            raise DataError(f"expected 21 binary digits, got {s!r}")
        return cls(tuple(int(c) for c in s))

    @property
    def y0(self) -> int:
        return self.bits[0]

    @property
    def y1(self) -> tuple[int, ...]:
        return self.bits[1:5]

    @property
    def y2(self) -> tuple[int, ...]:
        return self.bits[5:21]

    def array(self) -> np.ndarray:
        return np.array(self.bits, dtype=np.uint8)

    def __str__(self) -> str:
        return "".join(map(str, self.bits))


@dataclass(frozen=True)
class ValidityMask:
    bits: tuple[int, ...]

    def array(self) -> np.ndarray:
        return np.array(self.bits, dtype=np.uint8)


def derive_masks(labels: np.ndarray) -> np.ndarray:
    """Vectorized mask derivation for an ``N x 21`` bit array."""
    labels = np.asarray(labels, dtype=np.uint8)
    mask = np.empty_like(labels)
    mask[..., 0] = 1
    mask[..., 1:5] = labels[..., :1]
    mask[..., 5:21] = np.repeat(labels[..., :1] & labels[..., 1:5], 4, axis=-1)
    return mask


def derive_mask(label: PartitionLabel) -> ValidityMask:
    return ValidityMask(tuple(int(b) for b in derive_masks(label.array())))


# ----------------------------------------------------------------------------
# trees


@dataclass(frozen=True)
class CuNode:
    x: int
    y: int
    size: int
    children: tuple["CuNode", ...] | None = None

    @property
    def is_leaf(self) -> bool:
        return self.children is None

    def leaves(self) -> Iterator["CuNode"]:
        if self.children is None:
            yield self
        else:
            for child in self.children:
                yield from child.leaves()


PartitionTree = CuNode


def _child_nodes(node: CuNode, children_of) -> tuple[CuNode, ...]:
    half = node.size // 2
    return tuple(children_of(i, node.x + dx * half, node.y + dy * half, half)
                 for i, (dx, dy) in enumerate(_CHILD_OFFSETS))


def validate_tree(tree: CuNode) -> None:
    """Raise :class:`ContractError` unless ``tree`` is a legal 64->8 quad-tree."""

    def check(node, x, y, size):
        if (node.x, node.y, node.size) != (x, y, size):
            raise ContractError(f"node at ({node.x}, {node.y}) size {node.size} is misplaced")
        if node.children is None:
            return
        if size <= MIN_CU:
            raise ContractError(f"{size}x{size} CU cannot split")
        if len(node.children) != 4:
            raise ContractError("a split node needs exactly four children")
        half = size // 2
        for child, (dx, dy) in zip(node.children, _CHILD_OFFSETS):
            check(child, x + dx * half, y + dy * half, half)

    check(tree, 0, 0, CTU)


def tree_from_bits(bits, origin: tuple[int, int] = (0, 0)) -> CuNode:
    """Build the tree implied by split bits; bits under unsplit parents are ignored."""
    bits = [int(b) for b in bits]
    ox, oy = origin

    def node16(p, c, x, y, size):
        split = bits[5 + 4 * p + c]
        if not split:
            return CuNode(x, y, size)
        return CuNode(x, y, size, _child_nodes(CuNode(x, y, size), lambda i, cx, cy, s: CuNode(cx, cy, s)))

    def node32(i, x, y, size):
        if not bits[1 + i]:
            return CuNode(x, y, size)
        return CuNode(x, y, size, _child_nodes(CuNode(x, y, size),
                                               lambda j, cx, cy, s: node16(i, j, cx, cy, s)))

    root = CuNode(ox, oy, CTU)
    if not bits[0]:
        return root
    return CuNode(ox, oy, CTU, _child_nodes(root, node32))


def encode_tree(tree: CuNode) -> PartitionLabel:
    """Split bits of a legal tree; positions under unsplit parents encode as 0."""
    validate_tree(_at_origin(tree))
    bits = [0] * NUM_BITS
    if tree.children is not None:
        bits[0] = 1
        for i, c32 in enumerate(tree.children):
            if c32.children is not None:
                bits[1 + i] = 1
                for j, c16 in enumerate(c32.children):
                    bits[5 + 4 * i + j] = int(c16.children is not None)
    return PartitionLabel(tuple(bits))


def decode_label(label: PartitionLabel) -> CuNode:
    return tree_from_bits(label.bits)


def _at_origin(tree: CuNode) -> CuNode:
    if (tree.x, tree.y) == (0, 0):
        return tree

    def shift(n: CuNode) -> CuNode:
        kids = None if n.children is None else tuple(shift(c) for c in n.children)
        return CuNode(n.x - tree.x, n.y - tree.y, n.size, kids)

    return shift(tree)


def decode_prediction(yhat, threshold: float = 0.5) -> CuNode:
    """Threshold probabilities top-down; a node splits iff its score clears the
    threshold and its parent split, so the result is always legal."""
    yhat = np.asarray(yhat.data if hasattr(yhat, "data") else yhat, dtype=np.float64).reshape(-1)
    if yhat.shape != (NUM_BITS,):
        raise DataError(f"expected 21 scores, got {yhat.shape}")
    if not np.all(np.isfinite(yhat)):
        raise DataError("prediction contains non-finite values")
    return tree_from_bits(yhat >= threshold)


def threshold_bits(yhat, threshold: float = 0.5) -> np.ndarray:
    """Raw thresholded bits (no hierarchy enforcement), ``... x 21`` uint8."""
    return (np.asarray(yhat) >= threshold).astype(np.uint8)


def tree_roundtrip(tree: CuNode) -> CuNode:
    return decode_label(encode_tree(tree))


def enumerate_trees() -> Iterator[CuNode]:
    """All 1 + 17**4 = 83,522 legal trees."""
    yield CuNode(0, 0, CTU)
    # per 32x32 block: unsplit, or split with any of 16 child patterns
    options = [None] + list(itertools.product((0, 1), repeat=4))
    for combo in itertools.product(options, repeat=4):
        bits = [1] + [0] * 20
        for i, choice in enumerate(combo):
            if choice is not None:
                bits[1 + i] = 1
                bits[5 + 4 * i: 9 + 4 * i] = choice
        yield tree_from_bits(bits)


# ----------------------------------------------------------------------------
# rasterization and text export


def rasterize(tree: CuNode) -> tuple[np.ndarray, np.ndarray]:
    """Boundary bitmap (CU edge pixels set) and per-pixel CU size for one CTU."""
    tree = _at_origin(tree)
    boundary = np.zeros((CTU, CTU), dtype=bool)
    sizes = np.zeros((CTU, CTU), dtype=np.int32)
    for leaf in tree.leaves():
        ys, xs = slice(leaf.y, leaf.y + leaf.size), slice(leaf.x, leaf.x + leaf.size)
        sizes[ys, xs] = leaf.size
        boundary[leaf.y, xs] = boundary[leaf.y + leaf.size - 1, xs] = True
        boundary[ys, leaf.x] = boundary[ys, leaf.x + leaf.size - 1] = True
    return boundary, sizes


def format_line(x: int, y: int, bits) -> str:
    """``x y : <21 bits, y0 first>``."""
    return f"{x} {y} : {''.join(str(int(b)) for b in bits)}"


def parse_line(line: str) -> tuple[int, int, PartitionLabel]:
    try:
        coords, bits = line.split(":")
        x, y = (int(v) for v in coords.split())
    except ValueError as exc:
        raise DataError(f"malformed partition line {line!r}") from exc
    return x, y, PartitionLabel.from_string(bits)


def read_partition_file(path) -> list[tuple[int, int, PartitionLabel]]:
    with open(path) as fh:
        return [parse_line(line) for line in fh if line.strip()]
