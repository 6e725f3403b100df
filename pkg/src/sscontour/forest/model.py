"""Forest container and its binary serialisation.

File layout (little-endian)::

    magic "SSCFORST" | u16 version | u16 T | u16 m | 8-byte feature-config digest
    u32 len + feature config JSON | u32 len + training meta JSON
    per tree: u32 node count, then nodes in preorder, each a tag byte:
        0 internal: u32 feature, f64 threshold
        1 leaf:     u32 support, bit-packed m*m mask
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import FormatError
from ..features import FeatureConfig
from .tree import Tree

FOREST_MAGIC = b"SSCFORST"
FOREST_VERSION = 1
TAG_INTERNAL = 0
TAG_LEAF = 1


@dataclass
class Forest:
    trees: list[Tree]
    feature_config: FeatureConfig
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.trees:
            raise ValueError("a forest needs at least one tree")
        m = self.feature_config.patch_size
        for t in self.trees:
            if t.leaf_masks.shape[1:] != (m, m):
                raise ValueError("tree leaf masks do not match the patch size")

    @property
    def m(self) -> int:
        return self.feature_config.patch_size

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def subset(self, which) -> "Forest":
        return Forest([self.trees[i] for i in which], self.feature_config, dict(self.meta))

    def to_bytes(self) -> bytes:
        m = self.m
        nbytes = (m * m + 7) // 8
        buf = io.BytesIO()
        buf.write(FOREST_MAGIC)
        buf.write(struct.pack("<HHH", FOREST_VERSION, self.n_trees, m))
        buf.write(self.feature_config.digest())
        for text in (self.feature_config.to_json(), json.dumps(self.meta, sort_keys=True)):
            raw = text.encode()
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
        for tree in self.trees:
            buf.write(struct.pack("<I", tree.n_nodes))
            packed = np.packbits(tree.leaf_masks.reshape(tree.n_leaves, -1), axis=1)
            for i in range(tree.n_nodes):
                if tree.feature[i] >= 0:
                    buf.write(struct.pack("<BId", TAG_INTERNAL, int(tree.feature[i]), float(tree.threshold[i])))
                else:
                    leaf = tree.leaf_index[i]
                    buf.write(struct.pack("<BI", TAG_LEAF, int(tree.support[leaf])))
                    buf.write(packed[leaf, :nbytes].tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Forest":
        if data[:8] != FOREST_MAGIC:
            raise FormatError("not a forest model file")
        version, n_trees, m = struct.unpack_from("<HHH", data, 8)
        if version != FOREST_VERSION:
            raise FormatError(f"forest model version {version}, expected {FOREST_VERSION}")
        digest = data[14:22]
        pos = 22
        texts = []
        for _ in range(2):
            (length,) = struct.unpack_from("<I", data, pos)
            pos += 4
            texts.append(data[pos:pos + length].decode())
            pos += length
        config = FeatureConfig.from_json(texts[0])
        if config.digest() != digest or config.patch_size != m:
            raise FormatError("feature configuration digest mismatch")
        meta = json.loads(texts[1])
        nbytes = (m * m + 7) // 8
        trees = []
        for _ in range(n_trees):
            (n_nodes,) = struct.unpack_from("<I", data, pos)
            pos += 4
            feature = np.full(n_nodes, -1, dtype=np.int64)
            threshold = np.zeros(n_nodes)
            left = np.full(n_nodes, -1, dtype=np.int64)
            right = np.full(n_nodes, -1, dtype=np.int64)
            leaf_index = np.full(n_nodes, -1, dtype=np.int64)
            masks, support = [], []
            pending = []  # internal nodes still waiting for a right child
            for i in range(n_nodes):
                if i > 0:
                    prev = i - 1
                    if feature[prev] >= 0:
                        left[prev] = i
                    else:
                        right[pending.pop()] = i
                tag = data[pos]
                if tag == TAG_INTERNAL:
                    _, k, tau = struct.unpack_from("<BId", data, pos)
                    pos += 13
                    feature[i], threshold[i] = k, tau
                    pending.append(i)
                elif tag == TAG_LEAF:
                    _, sup = struct.unpack_from("<BI", data, pos)
                    pos += 5
                    bits = np.frombuffer(data, dtype=np.uint8, count=nbytes, offset=pos)
                    pos += nbytes
                    leaf_index[i] = len(masks)
                    masks.append(np.unpackbits(bits, count=m * m).reshape(m, m).astype(bool))
                    support.append(sup)
                else:
                    raise FormatError(f"corrupt forest file: unknown node tag {tag}")
            trees.append(Tree(feature, threshold, left, right, leaf_index,
                              np.array(masks, dtype=bool).reshape(-1, m, m),
                              np.array(support, dtype=np.int64)))
        return cls(trees, config, meta)


def save_forest(path, forest: Forest) -> None:
    Path(path).write_bytes(forest.to_bytes())


def load_forest(path) -> Forest:
    return Forest.from_bytes(Path(path).read_bytes())
