"""Row-by-row merging of embedding matrices keyed on token membership.

For every output token the first applicable rule wins:

1. token known to the pre-trained base -> its base-model row
   (skipped entirely for the linear method, which does not use the base)
2. token known to exactly one fine-tuned model -> that model's row
3. token known to both fine-tuned models -> unweighted mean of the two rows

The output vocabulary is the LVLM vocabulary in order, followed by RM-only
tokens in RM order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import VocabError
from .merging import MergeMethod


@dataclass(frozen=True)
class AlignedToken:
    token: str
    pre_row: int | None
    lvlm_row: int | None
    rm_row: int | None


@dataclass
class AlignedVocab:
    rows: list[AlignedToken]

    def output_vocab(self) -> dict[str, int]:
        return {entry.token: i for i, entry in enumerate(self.rows)}


def _check_rows(label: str, vocab: dict[str, int]) -> None:
    indices = list(vocab.values())
    if len(set(indices)) != len(indices):
        raise VocabError(f"{label} vocabulary maps multiple tokens to the same row")
    if any(i < 0 for i in indices):
        raise VocabError(f"{label} vocabulary contains a negative row index")


def align_vocab(
    pre_vocab: dict[str, int], lvlm_vocab: dict[str, int], rm_vocab: dict[str, int]
) -> AlignedVocab:
    """Union of the two fine-tuned vocabularies with per-model row indices.

    Base-model membership is recorded so rule 1 can fire; tokens known only to
    the base model are excluded from the output.
    """
    for label, vocab in (("pre", pre_vocab), ("lvlm", lvlm_vocab), ("rm", rm_vocab)):
        _check_rows(label, vocab)
    rows = []
    for token in sorted(lvlm_vocab, key=lvlm_vocab.get):
        rows.append(
            AlignedToken(
                token=token,
                pre_row=pre_vocab.get(token),
                lvlm_row=lvlm_vocab[token],
                rm_row=rm_vocab.get(token),
            )
        )
    for token in sorted(rm_vocab, key=rm_vocab.get):
        if token not in lvlm_vocab:
            rows.append(
                AlignedToken(
                    token=token,
                    pre_row=pre_vocab.get(token),
                    lvlm_row=None,
                    rm_row=rm_vocab[token],
                )
            )
    return AlignedVocab(rows=rows)


def merge_embedding_rows(
    aligned: AlignedVocab,
    pre_emb: np.ndarray,
    lvlm_emb: np.ndarray,
    rm_emb: np.ndarray,
    method: MergeMethod,
) -> np.ndarray:
    """Build the merged embedding matrix, one output row per aligned token."""
    width = lvlm_emb.shape[1]
    if rm_emb.shape[1] != width or pre_emb.shape[1] != width:
        raise VocabError(
            f"embedding width mismatch: pre {pre_emb.shape[1]}, "
            f"lvlm {width}, rm {rm_emb.shape[1]}"
        )
    pre_emb = pre_emb.astype(np.float32, copy=False)
    lvlm_emb = lvlm_emb.astype(np.float32, copy=False)
    rm_emb = rm_emb.astype(np.float32, copy=False)

    def row_index(source: np.ndarray, label: str, idx: int | None) -> int | None:
        if idx is not None and idx >= source.shape[0]:
            raise VocabError(f"{label} row index {idx} out of range ({source.shape[0]} rows)")
        return idx

    n = len(aligned.rows)
    pre_idx = np.full(n, -1, dtype=np.int64)
    lv_idx = np.full(n, -1, dtype=np.int64)
    rm_idx = np.full(n, -1, dtype=np.int64)
    for i, entry in enumerate(aligned.rows):
        if entry.lvlm_row is None and entry.rm_row is None:
            raise VocabError(f"token {entry.token!r} is in neither fine-tuned vocabulary")
        if (p := row_index(pre_emb, "pre", entry.pre_row)) is not None:
            pre_idx[i] = p
        if (l := row_index(lvlm_emb, "lvlm", entry.lvlm_row)) is not None:
            lv_idx[i] = l
        if (r := row_index(rm_emb, "rm", entry.rm_row)) is not None:
            rm_idx[i] = r

    use_pre = (pre_idx >= 0) & (method is not MergeMethod.LINEAR)
    both = ~use_pre & (lv_idx >= 0) & (rm_idx >= 0)
    only_lv = ~use_pre & (lv_idx >= 0) & (rm_idx < 0)
    only_rm = ~use_pre & (lv_idx < 0) & (rm_idx >= 0)

    out = np.empty((n, width), dtype=np.float32)
    out[use_pre] = pre_emb[pre_idx[use_pre]]
    out[only_lv] = lvlm_emb[lv_idx[only_lv]]
    out[only_rm] = rm_emb[rm_idx[only_rm]]
    out[both] = (lvlm_emb[lv_idx[both]] + rm_emb[rm_idx[both]]) * np.float32(0.5)
    return out
