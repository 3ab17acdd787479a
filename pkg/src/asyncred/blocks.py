"""Block decomposition of the variable space.

A :class:`Partition` splits ``R^n`` into ``b`` contiguous coordinate blocks.
Flat vectors are stored block-major (all of block 0, then block 1, ...), so
per-block reads and writes touch disjoint contiguous memory ranges.
:class:`GridPartition` maps a 2D pixel grid onto such a partition, one block
per rectangular tile, and keeps the permutation between row-major images and
block-major vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Partition",
    "GridPartition",
    "make_uniform_partition",
]


@dataclass(frozen=True)
class Partition:
    """Decomposition of ``R^n`` into ``b`` contiguous blocks.

    ``offsets`` has ``b + 1`` strictly increasing entries with
    ``offsets[0] == 0`` and ``offsets[b] == n``; block ``i`` owns
    coordinates ``offsets[i]:offsets[i+1]``. Immutable and safe to share
    across threads.
    """

    n: int
    b: int
    offsets: np.ndarray

    def __post_init__(self):
        offsets = np.asarray(self.offsets, dtype=np.int64)
        object.__setattr__(self, "offsets", offsets)
        if self.b < 1 or self.b > self.n:
            raise ValueError(f"need 1 <= b <= n, got b={self.b}, n={self.n}")
        if offsets.shape != (self.b + 1,):
            raise ValueError("offsets must have b+1 entries")
        if offsets[0] != 0 or offsets[-1] != self.n:
            raise ValueError("offsets must start at 0 and end at n")
        if np.any(np.diff(offsets) < 1):
            raise ValueError("offsets must be strictly increasing")

    @property
    def block_sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    def block_slice(self, i: int) -> slice:
        if not 0 <= i < self.b:
            raise IndexError(f"block index {i} out of range [0, {self.b})")
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    def extract(self, x: np.ndarray, i: int) -> np.ndarray:
        """Return the coordinates of block ``i`` (a copy)."""
        x = np.asarray(x)
        if x.shape != (self.n,):
            raise ValueError(f"expected vector of length {self.n}, got {x.shape}")
        return x[self.block_slice(i)].copy()

    def inject(self, v: np.ndarray, i: int) -> np.ndarray:
        """Embed a block vector ``v`` into ``R^n``, zero elsewhere."""
        sl = self.block_slice(i)
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (sl.stop - sl.start,):
            raise ValueError(
                f"block {i} has size {sl.stop - sl.start}, got vector of shape {v.shape}"
            )
        out = np.zeros(self.n)
        out[sl] = v
        return out


def make_uniform_partition(n: int, b: int) -> Partition:
    """Split ``n`` coordinates into ``b`` nearly equal blocks.

    Sizes differ by at most one; the remainder goes to the earliest blocks.
    """
    if b < 1 or b > n:
        raise ValueError(f"need 1 <= b <= n, got b={b}, n={n}")
    base, rem = divmod(n, b)
    sizes = np.full(b, base, dtype=np.int64)
    sizes[:rem] += 1
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    return Partition(n=n, b=b, offsets=offsets)


@dataclass(frozen=True)
class GridPartition:
    """Tiling of a ``height x width`` pixel grid into equal rectangular blocks.

    Block dimensions must divide the image dimensions exactly (non-dividing
    shapes are rejected, not padded). The flat solver vector is block-major:
    tile ``(bi, bj)`` occupies one contiguous slice, row-major within the
    tile. ``to_block_major`` / ``to_row_major`` convert between that layout
    and ordinary row-major images.
    """

    height: int
    width: int
    block_h: int
    block_w: int
    partition: Partition = field(init=False)
    # permutation arrays between layouts; filled in __post_init__
    _rm_of_bm: np.ndarray = field(init=False, repr=False)
    _bm_of_rm: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.height % self.block_h or self.width % self.block_w:
            raise ValueError(
                f"block shape {self.block_h}x{self.block_w} does not divide "
                f"image shape {self.height}x{self.width}"
            )
        gh = self.height // self.block_h
        gw = self.width // self.block_w
        n = self.height * self.width
        block_n = self.block_h * self.block_w
        part = make_uniform_partition(n, gh * gw)
        # row-major index of each block-major position: reshape the index
        # grid into tiles and flatten tile-by-tile
        idx = np.arange(n).reshape(self.height, self.width)
        idx = idx.reshape(gh, self.block_h, gw, self.block_w)
        rm_of_bm = idx.transpose(0, 2, 1, 3).reshape(-1)
        bm_of_rm = np.empty(n, dtype=np.int64)
        bm_of_rm[rm_of_bm] = np.arange(n)
        assert part.block_sizes[0] == block_n
        object.__setattr__(self, "partition", part)
        object.__setattr__(self, "_rm_of_bm", rm_of_bm)
        object.__setattr__(self, "_bm_of_rm", bm_of_rm)

    @property
    def n(self) -> int:
        return self.height * self.width

    @property
    def b(self) -> int:
        return self.partition.b

    @property
    def grid_shape(self) -> tuple[int, int]:
        return (self.height // self.block_h, self.width // self.block_w)

    @property
    def row_major_of_block_major(self) -> np.ndarray:
        """Permutation p with ``x_row_major = x_block_major[inverse]``;
        ``p[j]`` is the row-major pixel index stored at block-major slot j."""
        return self._rm_of_bm

    def to_block_major(self, image_flat: np.ndarray) -> np.ndarray:
        image_flat = np.asarray(image_flat)
        if image_flat.shape != (self.n,):
            raise ValueError(f"expected flat image of length {self.n}")
        return image_flat[self._rm_of_bm]

    def to_row_major(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.shape != (self.n,):
            raise ValueError(f"expected block-major vector of length {self.n}")
        return x[self._bm_of_rm]
