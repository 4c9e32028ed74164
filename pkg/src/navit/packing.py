"""Tokenization, greedy first-fit sequence packing, masks and padding accounting."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, IntegrityError, OversizeError
from .sampling import resize_preserving_aspect

PAD = -1
PAD_U32 = 0xFFFFFFFF


@dataclass
class TokenizedExample:
    """Kept patch tokens of one image with their ``(x, y)`` grid coordinates."""

    id: int
    coords: np.ndarray  # [n, 2] ints, columns (x, y)
    rows: int
    cols: int
    patches: np.ndarray | None = field(default=None, repr=False)  # [n, P*P*C]
    label: int | None = None
    image: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        n = len(self.coords)
        if not 1 <= n <= self.rows * self.cols:
            raise ValueError(f"example {self.id}: {n} tokens on a {self.rows}x{self.cols} grid")
        x, y = self.coords[:, 0], self.coords[:, 1]
        if x.min() < 0 or y.min() < 0 or x.max() >= self.cols or y.max() >= self.rows:
            raise ValueError(f"example {self.id}: coordinates outside the {self.rows}x{self.cols} grid")
        if len(np.unique(y * self.cols + x)) != n:
            raise ValueError(f"example {self.id}: duplicate coordinates")
        if self.patches is not None and len(self.patches) != n:
            raise ValueError(f"example {self.id}: {len(self.patches)} patches for {n} coordinates")

    def __len__(self):
        return len(self.coords)

    def subset(self, index):
        patches = None if self.patches is None else self.patches[index]
        return TokenizedExample(self.id, self.coords[index], self.rows, self.cols,
                                patches, self.label, self.image)


def grid_coords(rows, cols):
    """Row-major ``(x, y)`` coordinates of every cell of a grid."""
    y, x = np.divmod(np.arange(rows * cols), cols)
    return np.stack([x, y], axis=1)


def resize_pixels(pixels, height, width):
    """Bilinear resample of an ``[H, W, C]`` array (half-pixel centres, edge clamp)."""
    src_h, src_w = pixels.shape[:2]

    def axis_weights(n_out, n_in):
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, wy = axis_weights(height, src_h)
    x0, x1, wx = axis_weights(width, src_w)
    top = pixels[y0][:, x0] * (1 - wx)[None, :, None] + pixels[y0][:, x1] * wx[None, :, None]
    bottom = pixels[y1][:, x0] * (1 - wx)[None, :, None] + pixels[y1][:, x1] * wx[None, :, None]
    return (top * (1 - wy)[:, None, None] + bottom * wy[:, None, None]).astype(np.float32)


def patchify(pixels, patch):
    """Split ``[H, W, C]`` into row-major flattened ``patch x patch`` blocks."""
    h, w, c = pixels.shape
    rows, cols = h // patch, w // patch
    blocks = pixels[: rows * patch, : cols * patch].reshape(rows, patch, cols, patch, c)
    return blocks.transpose(0, 2, 1, 3, 4).reshape(rows * cols, patch * patch * c)


def tokenize(img, side, patch, with_pixels=True):
    """Resize ``img`` to effective side ``side`` (aspect preserved) and cut it into patches."""
    height, width = resize_preserving_aspect(img, side, patch)
    rows, cols = height // patch, width // patch
    patches = None
    if with_pixels and img.pixels is not None:
        patches = patchify(resize_pixels(img.pixels, height, width), patch)
    return TokenizedExample(img.id, grid_coords(rows, cols), rows, cols, patches, img.label, img)


def tokenize_square(img, side, patch, with_pixels=True):
    """Plain ViT preprocessing: resize to ``side x side`` ignoring the aspect ratio."""
    side = max(patch, round(side / patch) * patch)
    rows = cols = side // patch
    patches = None
    if with_pixels and img.pixels is not None:
        patches = patchify(resize_pixels(img.pixels, side, side), patch)
    return TokenizedExample(img.id, grid_coords(rows, cols), rows, cols, patches, img.label, img)


# -- packing ------------------------------------------------------------------


@dataclass(frozen=True)
class PackedBatch:
    """Fixed-shape batch of ``B`` sequences of length ``L``.

    ``owner[b, t]`` is the example slot owning token ``t`` of sequence ``b``
    (``PAD`` for padding). Slots ``0 .. len(examples[b]) - 1`` are real; a
    foreign batch may carry owners ``>= max_examples`` whose tokens were
    encoded but whose pooled output is dropped (counted in ``dropped``).
    """

    seq_len: int
    max_examples: int
    owner: np.ndarray  # [B, L] int32
    coords: np.ndarray  # [B, L, 2] int64
    patches: np.ndarray | None  # [B, L, F] float32
    examples: tuple  # per sequence, tuple of TokenizedExample in slot order
    dropped: int = 0

    @property
    def num_sequences(self):
        return self.owner.shape[0]

    @property
    def padding_tokens(self):
        return (self.owner == PAD).sum(axis=1)

    def slot_grid(self):
        """``[B, E_max, 2]`` array of ``(rows, cols)`` per example slot (zeros for PAD slots)."""
        grid = np.zeros((self.num_sequences, self.max_examples, 2), dtype=np.int64)
        for b, seq in enumerate(self.examples):
            for e, ex in enumerate(seq[: self.max_examples]):
                grid[b, e] = (ex.rows, ex.cols)
        return grid

    def slot_real(self):
        real = np.zeros((self.num_sequences, self.max_examples), dtype=bool)
        for b, seq in enumerate(self.examples):
            real[b, : min(len(seq), self.max_examples)] = True
        return real

    def slot_labels(self, default=0):
        labels = np.full((self.num_sequences, self.max_examples), default, dtype=np.int64)
        for b, seq in enumerate(self.examples):
            for e, ex in enumerate(seq[: self.max_examples]):
                labels[b, e] = default if ex.label is None else ex.label
        return labels


class _FirstFitIndex:
    """Segment tree over sequence capacities answering "lowest index with room for t"."""

    def __init__(self, seq_len, max_examples):
        self.seq_len = seq_len
        self.max_examples = max_examples
        self.size = 1
        self.tree = [-1] * 2
        self.free = []
        self.slots = []

    def _grow(self):
        old = self.tree
        self.size *= 2
        self.tree = [-1] * (2 * self.size)
        half = self.size // 2
        for i, value in enumerate(old[half:2 * half] if half else []):
            self.tree[self.size + i] = value
        for i in range(self.size - 1, 0, -1):
            self.tree[i] = max(self.tree[2 * i], self.tree[2 * i + 1])

    def _set(self, index, value):
        i = index + self.size
        self.tree[i] = value
        i //= 2
        while i:
            self.tree[i] = max(self.tree[2 * i], self.tree[2 * i + 1])
            i //= 2

    def _capacity(self, index):
        return self.free[index] if self.slots[index] > 0 else -1

    def find(self, tokens):
        if self.tree[1] < tokens:
            return None
        i = 1
        while i < self.size:
            i = 2 * i if self.tree[2 * i] >= tokens else 2 * i + 1
        return i - self.size

    def open(self):
        index = len(self.free)
        if index >= self.size:
            self._grow()
        self.free.append(self.seq_len)
        self.slots.append(self.max_examples)
        self._set(index, self._capacity(index))
        return index

    def place(self, index, tokens):
        self.free[index] -= tokens
        self.slots[index] -= 1
        self._set(index, self._capacity(index))


def first_fit_assignment(lengths, seq_len, max_examples, max_sequences=None, ids=None):
    """Sequence index for each length under greedy first fit.

    Returns ``(assignment, placed)``; when ``max_sequences`` is reached the
    scan stops at the first example that fits nowhere and ``placed`` is the
    number of leading examples assigned.
    """
    index = _FirstFitIndex(seq_len, max_examples)
    assignment = []
    for i, tokens in enumerate(lengths):
        if tokens > seq_len:
            raise OversizeError(i if ids is None else ids[i], tokens, seq_len)
        target = index.find(tokens)
        if target is None:
            if max_sequences is not None and len(index.free) >= max_sequences:
                return assignment, i
            target = index.open()
        index.place(target, tokens)
        assignment.append(target)
    return assignment, len(assignment)


def layout(groups, seq_len, max_examples, num_sequences=None, dropped=0):
    """Materialize a :class:`PackedBatch` from per-sequence example lists.

    Examples are laid out contiguously in slot order; the remaining token
    slots are padding with zero payload and coordinates ``(0, 0)``.
    """
    num_sequences = max(len(groups), num_sequences or 0)
    groups = list(groups) + [[] for _ in range(num_sequences - len(groups))]
    features = next((ex.patches.shape[1] for seq in groups for ex in seq if ex.patches is not None), None)
    owner = np.full((num_sequences, seq_len), PAD, dtype=np.int32)
    coords = np.zeros((num_sequences, seq_len, 2), dtype=np.int64)
    patches = None if features is None else np.zeros((num_sequences, seq_len, features), dtype=np.float32)
    for b, seq in enumerate(groups):
        pos = 0
        for e, ex in enumerate(seq):
            n = len(ex)
            if pos + n > seq_len:
                raise OversizeError(ex.id, pos + n, seq_len)
            owner[b, pos:pos + n] = e
            coords[b, pos:pos + n] = ex.coords
            if patches is not None:
                patches[b, pos:pos + n] = ex.patches
            pos += n
    examples = tuple(tuple(seq[:max_examples]) for seq in groups)
    return PackedBatch(seq_len, max_examples, owner, coords, patches, examples, dropped)


def pack_first_fit(examples, seq_len, max_examples, num_sequences=None, shuffle_seed=None):
    """Greedy first-fit packing in input order.

    Each example goes to the lowest-index sequence that has enough free tokens
    and a free example slot; a new sequence is opened when none does.
    ``shuffle_seed`` permutes the scan order first. ``num_sequences`` pads the
    batch with empty sequences up to a fixed count.
    """
    examples = list(examples)
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(examples))
        examples = [examples[i] for i in order]
    assignment, _ = first_fit_assignment([len(ex) for ex in examples], seq_len, max_examples,
                                         ids=[ex.id for ex in examples])
    groups = [[] for _ in range(max(assignment, default=-1) + 1)]
    for ex, target in zip(examples, assignment):
        groups[target].append(ex)
    if num_sequences is not None and len(groups) > num_sequences:
        raise ValueError(f"needed {len(groups)} sequences, batch allows {num_sequences}")
    return layout(groups, seq_len, max_examples, num_sequences)


def fill_batch(examples, seq_len, max_examples, num_sequences):
    """First-fit into at most ``num_sequences`` sequences.

    Scanning stops at the first example that fits nowhere; returns the batch
    and the unconsumed remainder of ``examples``.
    """
    examples = list(examples)
    assignment, placed = first_fit_assignment([len(ex) for ex in examples], seq_len, max_examples,
                                              max_sequences=num_sequences,
                                              ids=[ex.id for ex in examples])
    groups = [[] for _ in range(num_sequences)]
    for ex, target in zip(examples[:placed], assignment):
        groups[target].append(ex)
    return layout(groups, seq_len, max_examples, num_sequences), examples[placed:]


# -- masks & statistics -------------------------------------------------------


def build_masks(batch: PackedBatch):
    """Attention masks ``[B, L, L]``, pooling masks ``[B, E_max, L]`` and PAD-slot flags ``[B, E_max]``."""
    owner = batch.owner
    real = owner != PAD
    attention = (owner[:, :, None] == owner[:, None, :]) & real[:, :, None] & real[:, None, :]
    slots = np.arange(batch.max_examples)
    pooling = owner[:, None, :] == slots[None, :, None]
    pad_slots = ~batch.slot_real()
    pooling &= ~pad_slots[:, :, None]
    return attention, pooling, pad_slots


def check_masks(batch: PackedBatch, attention, pooling):
    """Raise :class:`IntegrityError` unless the masks agree with the batch."""
    b, length = batch.owner.shape
    if attention.shape != (b, length, length) or pooling.shape != (b, batch.max_examples, length):
        raise IntegrityError(f"mask shapes {attention.shape}/{pooling.shape} do not match batch "
                             f"({b} x {length}, E_max={batch.max_examples})")
    expected_attention, expected_pooling, _ = build_masks(batch)
    if not (np.array_equal(attention, expected_attention) and np.array_equal(pooling, expected_pooling)):
        raise IntegrityError("masks disagree with token ownership")


@dataclass(frozen=True)
class PaddingStats:
    padding_fraction: float
    mean_images_per_sequence: float
    sequences: int
    padding_tokens: int
    images: int
    images_per_sequence_hist: dict


def padding_stats(batch: PackedBatch) -> PaddingStats:
    pad = int(batch.padding_tokens.sum())
    per_seq = [len(seq) for seq in batch.examples]
    hist = {}
    for n in per_seq:
        hist[n] = hist.get(n, 0) + 1
    total = batch.num_sequences * batch.seq_len
    return PaddingStats(
        padding_fraction=pad / total,
        mean_images_per_sequence=sum(per_seq) / batch.num_sequences,
        sequences=batch.num_sequences,
        padding_tokens=pad,
        images=sum(per_seq),
        images_per_sequence_hist=dict(sorted(hist.items())),
    )


# -- binary interchange -------------------------------------------------------

BATCH_MAGIC = b"NVPB"
BATCH_VERSION = 1
_BATCH_HEADER = struct.Struct("<4sIIIII")
_DESCRIPTOR = struct.Struct("<QIIi")


def write_batch(batch: PackedBatch, path):
    """Serialize a batch.

    Layout (little-endian): ``NVPB`` | version u32 | B u32 | L u32 | E_max u32 |
    F u32; then per sequence: example count u32, one descriptor per example
    (id u64 | rows u32 | cols u32 | label i32), owner slots u32[L] with PAD as
    0xFFFFFFFF, coords u32[L, 2] as (x, y), payload f32[L, F].
    """
    features = 0 if batch.patches is None else batch.patches.shape[2]
    with open(path, "wb") as fh:
        fh.write(_BATCH_HEADER.pack(BATCH_MAGIC, BATCH_VERSION, batch.num_sequences,
                                    batch.seq_len, batch.max_examples, features))
        for b, seq in enumerate(batch.examples):
            fh.write(struct.pack("<I", len(seq)))
            for ex in seq:
                fh.write(_DESCRIPTOR.pack(ex.id, ex.rows, ex.cols, -1 if ex.label is None else ex.label))
            owner = batch.owner[b].astype(np.int64)
            fh.write(np.where(owner == PAD, PAD_U32, owner).astype("<u4").tobytes())
            fh.write(batch.coords[b].astype("<u4").tobytes())
            if features:
                fh.write(batch.patches[b].astype("<f4").tobytes())


def read_batch(path, max_examples=None) -> PackedBatch:
    """Load a serialized batch, enforcing ``max_examples`` pooled slots per sequence.

    Examples beyond the limit keep their tokens (the encoder still attends
    over them) but lose their pooled slot; their number is ``dropped``.
    """
    buf = open(path, "rb").read()
    if len(buf) < _BATCH_HEADER.size:
        raise FormatError("truncated header", len(buf))
    magic, version, b, length, e_max, features = _BATCH_HEADER.unpack_from(buf, 0)
    if magic != BATCH_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != BATCH_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    e_max = max_examples or e_max
    offset = _BATCH_HEADER.size
    owner = np.full((b, length), PAD, dtype=np.int32)
    coords = np.zeros((b, length, 2), dtype=np.int64)
    patches = np.zeros((b, length, features), dtype=np.float32) if features else None
    sequences, dropped = [], 0

    def need(nbytes, what):
        if offset + nbytes > len(buf):
            raise FormatError(f"truncated {what}", offset)

    for s in range(b):
        need(4, "example count")
        (count,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        descriptors = []
        for _ in range(count):
            need(_DESCRIPTOR.size, "example descriptor")
            descriptors.append(_DESCRIPTOR.unpack_from(buf, offset))
            offset += _DESCRIPTOR.size
        need(4 * length * 3 + 4 * length * features, "sequence payload")
        raw_owner = np.frombuffer(buf, "<u4", length, offset).astype(np.int64)
        offset += 4 * length
        seq_coords = np.frombuffer(buf, "<u4", 2 * length, offset).reshape(length, 2).astype(np.int64)
        offset += 8 * length
        if features:
            patches[s] = np.frombuffer(buf, "<f4", length * features, offset).reshape(length, features)
            offset += 4 * length * features
        seq_owner = np.where(raw_owner == PAD_U32, PAD, raw_owner)
        if seq_owner.max(initial=PAD) >= count:
            raise FormatError(f"sequence {s} references an undeclared example", offset)
        owner[s] = seq_owner
        coords[s] = seq_coords
        examples = []
        for e, (ex_id, rows, cols, label) in enumerate(descriptors[:e_max]):
            sel = seq_owner == e
            examples.append(TokenizedExample(
                ex_id, seq_coords[sel], rows, cols,
                None if patches is None else patches[s][sel].copy(),
                None if label == -1 else label,
            ))
        dropped += max(0, count - e_max)
        sequences.append(tuple(examples))
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes", offset)
    return PackedBatch(length, e_max, owner, coords, patches, tuple(sequences), dropped)
