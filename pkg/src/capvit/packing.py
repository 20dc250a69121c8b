"""Sequence assembly, packing, prefix-LM masks, and rotary position ids.

A sample becomes [img_0 .. img_M, txt_0 .. txt_L, EOS]; multiple samples
are first-fit packed into a fixed-length token stream with a Pad tail.
Attention rule inside a pack:

  allowed(q, k) <=> same sample AND k is not Pad AND
                    (q image and k image, or q text and index(k) <= index(q))

Pad rows attend only to themselves (keeps softmax support non-empty).
Position triples (t, h, w): image tokens get t=0 and (h, w) walking the
patch grid row-major; text tokens get t=h=w counting up from one past the
largest image coordinate of their sample. Coordinates restart at every
sample so a packed sample computes exactly what it would alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .imaging import PatchGrid


class TokenKind(IntEnum):
    IMAGE = 0
    TEXT = 1
    PAD = 2


PAD_SAMPLE = -1  # sample_id carried by Pad positions


@dataclass
class PackedSequence:
    """One or more samples laid out in a single token stream.

    token_ids holds vocab ids at Text/Pad positions and row indices into
    `patches` at Image positions.
    """

    token_ids: np.ndarray
    kinds: np.ndarray
    sample_ids: np.ndarray
    positions: np.ndarray          # [n, 3] = (t, h, w)
    loss_mask: np.ndarray
    patches: np.ndarray            # [n_patches_total, 3*p*p]
    sample_boundaries: list = field(default_factory=list)   # (start, end) per sample
    refs: list = field(default_factory=list)                # sample id strings

    def __len__(self):
        return len(self.token_ids)

    def targets(self) -> np.ndarray:
        """Next-token target ids; valid wherever loss_mask is True."""
        t = np.zeros(len(self), dtype=np.int64)
        if len(self) > 1:
            t[:-1] = self.token_ids[1:]
        return t


def build_sequence(patches: np.ndarray, grid: PatchGrid, text_ids,
                   eos_id: int, ref: str = "s0",
                   append_eos: bool = True) -> PackedSequence:
    """Assemble a single-sample sequence with positions and loss mask.

    Empty text yields an image-only sequence (vision-encoder mode) with no
    EOS and an all-false loss mask. Otherwise loss supervision runs from
    the last image token (which predicts txt_0) through the token
    predicting EOS.
    """
    m = patches.shape[0]
    if m == 0:
        raise ValueError("sequence needs at least one image patch")
    if m != grid.tokens:
        raise ValueError(f"patch count {m} does not match grid {grid.rows}x{grid.cols}")
    text_ids = list(text_ids)
    if text_ids and append_eos:
        text_ids = text_ids + [eos_id]
    n_txt = len(text_ids)
    n = m + n_txt

    token_ids = np.empty(n, dtype=np.int64)
    token_ids[:m] = np.arange(m)
    token_ids[m:] = text_ids
    kinds = np.empty(n, dtype=np.uint8)
    kinds[:m] = TokenKind.IMAGE
    kinds[m:] = TokenKind.TEXT
    sample_ids = np.zeros(n, dtype=np.int64)

    positions = np.zeros((n, 3), dtype=np.int64)
    hh, ww = np.divmod(np.arange(m), grid.cols)
    positions[:m, 1] = hh
    positions[:m, 2] = ww
    text_base = int(positions[:m].max()) + 1
    for j in range(n_txt):
        positions[m + j] = text_base + j

    loss_mask = np.zeros(n, dtype=bool)
    if n_txt:
        loss_mask[m - 1:n - 1] = True

    return PackedSequence(token_ids=token_ids, kinds=kinds, sample_ids=sample_ids,
                          positions=positions, loss_mask=loss_mask,
                          patches=np.asarray(patches),
                          sample_boundaries=[(0, n)], refs=[ref])


def pack(sequences, max_len: int, pad_id: int) -> list[PackedSequence]:
    """First-fit pack single-sample sequences into max_len streams.

    Arrival order is preserved within each pack; no sample is split; the
    tail is filled with Pad tokens (loss mask false, attend-nothing).
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    bins: list[list[PackedSequence]] = []
    fill: list[int] = []
    for seq in sequences:
        n = len(seq)
        if n > max_len:
            raise ValueError(f"sample {seq.refs[0]!r} of length {n} exceeds max_len {max_len}")
        for i, used in enumerate(fill):
            if used + n <= max_len:
                bins[i].append(seq)
                fill[i] += n
                break
        else:
            bins.append([seq])
            fill.append(n)
    return [_merge(group, max_len, pad_id) for group in bins]


def _merge(group, max_len, pad_id) -> PackedSequence:
    n_used = sum(len(s) for s in group)
    n = max_len
    token_ids = np.full(n, pad_id, dtype=np.int64)
    kinds = np.full(n, TokenKind.PAD, dtype=np.uint8)
    sample_ids = np.full(n, PAD_SAMPLE, dtype=np.int64)
    positions = np.zeros((n, 3), dtype=np.int64)
    loss_mask = np.zeros(n, dtype=bool)
    boundaries = []
    refs = []
    patch_parts = []
    cursor = 0
    patch_base = 0
    for si, seq in enumerate(group):
        ln = len(seq)
        sl = slice(cursor, cursor + ln)
        token_ids[sl] = seq.token_ids
        img = seq.kinds == TokenKind.IMAGE
        token_ids[cursor:cursor + ln][img] += patch_base
        kinds[sl] = seq.kinds
        sample_ids[sl] = si
        positions[sl] = seq.positions
        loss_mask[sl] = seq.loss_mask
        boundaries.append((cursor, cursor + ln))
        refs.append(seq.refs[0])
        patch_parts.append(seq.patches)
        patch_base += seq.patches.shape[0]
        cursor += ln
    assert cursor == n_used
    patches = np.concatenate(patch_parts, axis=0) if patch_parts else np.zeros((0, 0))
    return PackedSequence(token_ids=token_ids, kinds=kinds, sample_ids=sample_ids,
                          positions=positions, loss_mask=loss_mask, patches=patches,
                          sample_boundaries=boundaries, refs=refs)


def prefix_lm_mask(packed: PackedSequence) -> np.ndarray:
    """Vectorized allowed(q, k) matrix for one packed stream."""
    kinds = packed.kinds
    sids = packed.sample_ids
    n = len(packed)
    idx = np.arange(n)
    same = (sids[:, None] == sids[None, :]) & (sids[:, None] != PAD_SAMPLE)
    k_img = kinds[None, :] == TokenKind.IMAGE
    q_img = kinds[:, None] == TokenKind.IMAGE
    q_txt = kinds[:, None] == TokenKind.TEXT
    k_pad = kinds[None, :] == TokenKind.PAD
    causal = idx[None, :] <= idx[:, None]
    allowed = same & ~k_pad & ((q_img & k_img) | (q_txt & causal))
    pad_rows = kinds == TokenKind.PAD
    allowed[pad_rows] = False
    allowed[pad_rows, idx[pad_rows]] = True
    return allowed


def oracle_mask(packed: PackedSequence) -> np.ndarray:
    """Naive per-cell evaluation of the attention rule (test oracle).

    Deliberately a separate code path from prefix_lm_mask: plain double
    loop over python ints.
    """
    kinds = [int(k) for k in packed.kinds]
    sids = [int(s) for s in packed.sample_ids]
    n = len(packed)
    out = np.zeros((n, n), dtype=bool)
    for q in range(n):
        if kinds[q] == TokenKind.PAD:
            out[q, q] = True
            continue
        for k in range(n):
            if kinds[k] == TokenKind.PAD:
                continue
            if sids[q] != sids[k]:
                continue
            if kinds[q] == TokenKind.IMAGE:
                ok = kinds[k] == TokenKind.IMAGE
            else:
                ok = k <= q
            out[q, k] = ok
    return out


def render_mask(mask: np.ndarray, kinds=None) -> str:
    """ASCII grid: '#' allowed, '.' blocked; optional kind header row."""
    lines = []
    letters = {TokenKind.IMAGE: "I", TokenKind.TEXT: "T", TokenKind.PAD: "P"}
    if kinds is not None:
        lines.append("  " + "".join(letters[TokenKind(int(k))] for k in kinds))
    for q in range(mask.shape[0]):
        prefix = letters[TokenKind(int(kinds[q]))] + " " if kinds is not None else ""
        lines.append(prefix + "".join("#" if v else "." for v in mask[q]))
    return "\n".join(lines)
