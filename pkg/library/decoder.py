"""
CTC output decoding (best-path and prefix beam search) and edit-distance scoring.
"""
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from library.errors import ConfigurationError
from library.losses import BLANK, NEG_INF, log_add, sequence_log_likelihood

DEFAULT_BEAM = 12


@dataclass
class Hypothesis:
    labels: Tuple[int, ...]
    score: float


@dataclass
class EditStats:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_length: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def error_rate(self) -> float:
        return self.errors / max(self.ref_length, 1)

    def __add__(self, other: "EditStats") -> "EditStats":
        return EditStats(self.substitutions + other.substitutions, self.deletions + other.deletions,
                         self.insertions + other.insertions, self.ref_length + other.ref_length)


def collapse(path: Iterable[int], blank: int = BLANK) -> Tuple[int, ...]:
    """ Merge repeated symbols, then drop blanks """
    out = []
    prev = None
    for symbol in path:
        symbol = int(symbol)
        if symbol != prev and symbol != blank:
            out.append(symbol)
        prev = symbol
    return tuple(out)


def greedy_decode(logprobs: np.ndarray) -> Tuple[int, ...]:
    return collapse(np.argmax(logprobs, axis=1))


def _prefix_beams(logprobs: np.ndarray, width: int):
    """
    One prefix beam pass at a fixed width. Returns the surviving prefixes with their
    (blank, label) log-probabilities and whether any step had to prune.
    """
    steps, vocab = logprobs.shape
    beams = {(): (0.0, NEG_INF)}
    pruned = False
    for t in range(steps):
        row = logprobs[t]
        nxt = defaultdict(lambda: [NEG_INF, NEG_INF])
        for prefix, (p_blank, p_label) in beams.items():
            p_total = log_add(p_blank, p_label)
            entry = nxt[prefix]
            entry[0] = log_add(entry[0], p_total + row[BLANK])
            if prefix:
                # repeated label without a blank in between stays on the same prefix
                entry[1] = log_add(entry[1], p_label + row[prefix[-1]])
            for symbol in range(vocab):
                if symbol == BLANK:
                    continue
                extended = prefix + (symbol,)
                source = p_blank if prefix and prefix[-1] == symbol else p_total
                entry = nxt[extended]
                entry[1] = log_add(entry[1], source + row[symbol])
        scored = [(prefix, probs) for prefix, probs in nxt.items() if log_add(probs[0], probs[1]) > NEG_INF]
        ranked = sorted(scored, key=lambda item: (-log_add(item[1][0], item[1][1]), item[0]))
        pruned = pruned or len(ranked) > width
        beams = {prefix: (pb, pl) for prefix, (pb, pl) in ranked[:width]}
    return beams, pruned


def prefix_beam_search(logprobs: np.ndarray, beam: int = DEFAULT_BEAM) -> List[Hypothesis]:
    """
    LM-free CTC prefix beam search.

    Each prefix carries two log-probabilities: paths ending in blank and paths
    ending in its last label. The search runs at every width from 1 to `beam`
    (stopping early once a pass never prunes) and the union of the surviving
    prefixes is rescored with the full CTC forward pass. The candidate set only
    grows with `beam`, so the best score never drops when the beam is widened.
    Ties are broken by the label tuple so the output order is deterministic.
    """
    if beam < 1:
        raise ConfigurationError(f"beam must be >= 1, got {beam}")
    candidates = set()
    for width in range(1, beam + 1):
        beams, pruned = _prefix_beams(logprobs, width)
        candidates.update(beams)
        if not pruned:
            break
    hyps = [Hypothesis(prefix, sequence_log_likelihood(logprobs, prefix)) for prefix in candidates]
    hyps.sort(key=lambda h: (-h.score, h.labels))
    return hyps[:beam]


def edit_distance(ref: Sequence[int], hyp: Sequence[int]) -> EditStats:
    """
    Minimal edit alignment with unit costs. Among minimal alignments the one with
    the fewest substitutions is reported; deletions and insertions then follow
    from the length difference, so swapping ref and hyp swaps D and I.
    """
    ref = list(ref)
    hyp = list(hyp)
    n, m = len(ref), len(hyp)
    # (edits, substitutions) compared lexicographically
    previous = [(j, 0) for j in range(m + 1)]
    for i in range(1, n + 1):
        current = [(i, 0)] + [(0, 0)] * m
        for j in range(1, m + 1):
            if ref[i - 1] == hyp[j - 1]:
                diagonal = previous[j - 1]
            else:
                diagonal = (previous[j - 1][0] + 1, previous[j - 1][1] + 1)
            deletion = (previous[j][0] + 1, previous[j][1])
            insertion = (current[j - 1][0] + 1, current[j - 1][1])
            current[j] = min(diagonal, deletion, insertion)
        previous = current
    errors, substitutions = previous[m]
    indels = errors - substitutions
    deletions = (indels + n - m) // 2
    return EditStats(substitutions, deletions, indels - deletions, n)


def format_nbest(utt_id: str, hyps: Sequence[Hypothesis]) -> List[str]:
    """ One line per hypothesis: `utt_id rank score label1 label2 ...` """
    lines = []
    for rank, hyp in enumerate(hyps, start=1):
        fields = [utt_id, str(rank), f"{hyp.score:.6f}"] + [str(label) for label in hyp.labels]
        lines.append(" ".join(fields))
    return lines
