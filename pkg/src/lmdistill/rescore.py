"""N-best list rescoring and word-error-rate scoring.

N-best files are TSV: utt_id, rank, acoustic_score, firstpass_lm_score, then
the hypothesis words in one space-separated field (possibly empty). Each
hypothesis is scored with a fresh zero LM state: inputs are [eos, w1..wn] and
targets [w1..wn, eos], so an n-word hypothesis contributes n+1 log-prob terms.
The combined score is acoustic + lm_weight * lm_logprob + wip * word_count;
the first-pass LM column is carried through but takes no part in combination.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import UNK, Vocabulary
from .errors import ConfigError, DataError, FormatError
from .model import LmModel, model_forward

__all__ = ["NbestEntry", "RescoreConfig", "parse_nbest", "score_hypothesis",
           "combine_and_select", "rescore_nbest", "WerReport", "wer",
           "edit_ops", "parse_refs"]

OOV_MODES = ("rnn_unk", "skip", "penalty")


@dataclass
class NbestEntry:
    utt_id: str
    rank: int
    acoustic_score: float
    firstpass_lm_score: float
    words: list[str]


@dataclass
class RescoreConfig:
    lm_weight: float = 1.0
    word_insertion_penalty: float = 0.0
    oov_mode: str = "rnn_unk"
    oov_penalty: float = -10.0  # log-prob charged per OOV word in penalty mode

    def __post_init__(self):
        if self.lm_weight < 0:
            raise ConfigError(f"lm_weight must be >= 0, got {self.lm_weight}")
        if self.oov_mode not in OOV_MODES:
            raise ConfigError(f"oov_mode must be one of {', '.join(OOV_MODES)}, "
                              f"got {self.oov_mode!r}")


def parse_nbest(lines, source: str = "<nbest>") -> dict[str, list[NbestEntry]]:
    """Parse N-best TSV lines into {utt_id: entries ordered by rank}."""
    by_utt: dict[str, list[NbestEntry]] = {}
    seen: set[tuple[str, int]] = set()
    for lineno, line in enumerate(lines, 1):
        line = line.rstrip("\n")
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) not in (4, 5):
            raise FormatError(f"{source}:{lineno}: expected 4 or 5 tab-separated "
                              f"fields, got {len(parts)}")
        utt = parts[0]
        try:
            rank = int(parts[1])
        except ValueError:
            raise FormatError(f"{source}:{lineno}: bad rank {parts[1]!r}") from None
        try:
            acoustic = float(parts[2])
            firstpass = float(parts[3])
        except ValueError:
            raise FormatError(f"{source}:{lineno}: bad score field") from None
        if (utt, rank) in seen:
            raise FormatError(f"{source}:{lineno}: duplicate rank {rank} for "
                              f"utterance {utt!r}")
        seen.add((utt, rank))
        words = parts[4].split() if len(parts) == 5 else []
        by_utt.setdefault(utt, []).append(
            NbestEntry(utt, rank, acoustic, firstpass, words))
    if not by_utt:
        raise FormatError(f"{source}: no hypotheses found")
    for entries in by_utt.values():
        entries.sort(key=lambda e: e.rank)
    return by_utt


def parse_refs(lines, source: str = "<refs>") -> dict[str, list[str]]:
    """Parse reference transcripts: utt_id<TAB>words per line."""
    refs: dict[str, list[str]] = {}
    for lineno, line in enumerate(lines, 1):
        line = line.rstrip("\n")
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) not in (1, 2):
            raise FormatError(f"{source}:{lineno}: expected utt_id<TAB>words")
        if parts[0] in refs:
            raise FormatError(f"{source}:{lineno}: duplicate utterance {parts[0]!r}")
        refs[parts[0]] = parts[1].split() if len(parts) == 2 else []
    if not refs:
        raise FormatError(f"{source}: no references found")
    return refs


def score_hypothesis(model: LmModel, vocab: Vocabulary, words: list[str],
                     oov_mode: str = "rnn_unk", oov_penalty: float = -10.0) -> float:
    """Total natural-log probability of words + eos from a fresh zero state.

    OOV words (those the vocabulary can only map to unk) are handled per
    oov_mode: scored as rnn_unk, skipped (fed as context but not scored), or
    charged a fixed penalty log-prob. The first input is always eos.
    """
    if oov_mode not in OOV_MODES:
        raise ConfigError(f"oov_mode must be one of {', '.join(OOV_MODES)}, "
                          f"got {oov_mode!r}")
    if model.config.vocab_size != vocab.size:
        raise ConfigError(f"model was built for {model.config.vocab_size} words "
                          f"but the vocabulary has {vocab.size}")
    ids = []
    oov = []
    for w in words:
        idx = vocab.lookup(w)
        if idx == vocab.unk_id and w != UNK:
            oov.append(True)
            ids.append(vocab.rnn_unk_id)  # context token for the unknown word
        else:
            oov.append(False)
            ids.append(idx)
    targets = np.asarray(ids + [vocab.eos_id], dtype=np.int64)
    inputs = np.asarray([vocab.eos_id] + ids, dtype=np.int64)
    out = model_forward(model, inputs[None, :], model.init_state(1))
    logp = out.log_probs.data[np.arange(targets.shape[0]), targets]
    oov = np.asarray(oov + [False])
    if oov_mode == "rnn_unk":
        return float(logp.sum())
    if oov_mode == "skip":
        return float(logp[~oov].sum())
    return float(logp[~oov].sum()) + float(oov.sum()) * oov_penalty


def combine_and_select(entries: list[NbestEntry], lm_scores: list[float],
                       cfg: RescoreConfig) -> NbestEntry:
    """Pick the entry maximizing acoustic + lm_weight*lm + wip*len(words).

    Ties go to the lowest first-pass rank.
    """
    if not entries:
        raise DataError("empty hypothesis list")
    if len(entries) != len(lm_scores):
        raise DataError(f"{len(entries)} hypotheses but {len(lm_scores)} LM scores")
    best = None
    best_total = -np.inf
    for entry, lm in sorted(zip(entries, lm_scores), key=lambda p: p[0].rank):
        total = (entry.acoustic_score + cfg.lm_weight * lm
                 + cfg.word_insertion_penalty * len(entry.words))
        if total > best_total:
            best, best_total = entry, total
    return best


def rescore_nbest(model: LmModel, vocab: Vocabulary,
                  nbest: dict[str, list[NbestEntry]],
                  cfg: RescoreConfig) -> dict[str, NbestEntry]:
    """Score every hypothesis and select per utterance."""
    out = {}
    for utt, entries in nbest.items():
        lms = [score_hypothesis(model, vocab, e.words, cfg.oov_mode, cfg.oov_penalty)
               for e in entries]
        out[utt] = combine_and_select(entries, lms, cfg)
    return out


# ---------------------------------------------------------------------------
# word error rate


@dataclass
class WerReport:
    substitutions: int
    insertions: int
    deletions: int
    ref_words: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer_percent(self) -> float:
        # An empty reference with errors is reported against a denominator of 1
        # (the percentage is then just the raw error count times 100).
        return 100.0 * self.errors / max(self.ref_words, 1)

    def line(self) -> str:
        return (f"WER={self.wer_percent:.2f}% S={self.substitutions} "
                f"I={self.insertions} D={self.deletions} N={self.ref_words}")


def edit_ops(ref: list[str], hyp: list[str]) -> tuple[int, int, int]:
    """(substitutions, insertions, deletions) of one minimal edit alignment."""
    nr, nh = len(ref), len(hyp)
    # cost[i][j]: edit distance between ref[:i] and hyp[:j]
    cost = np.zeros((nr + 1, nh + 1), dtype=np.int64)
    cost[:, 0] = np.arange(nr + 1)
    cost[0, :] = np.arange(nh + 1)
    for i in range(1, nr + 1):
        for j in range(1, nh + 1):
            same = ref[i - 1] == hyp[j - 1]
            cost[i, j] = min(cost[i - 1, j - 1] + (0 if same else 1),
                             cost[i - 1, j] + 1,   # delete ref word
                             cost[i, j - 1] + 1)   # insert hyp word
    subs = ins = dels = 0
    i, j = nr, nh
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i, j] == cost[i - 1, j - 1] and ref[i - 1] == hyp[j - 1]:
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and cost[i, j] == cost[i - 1, j - 1] + 1:
            subs += 1
            i, j = i - 1, j - 1
        elif i > 0 and cost[i, j] == cost[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return subs, ins, dels


def wer(refs: dict[str, list[str]], hyps: dict[str, list[str]]) -> WerReport:
    """Aggregate WER of hypotheses against references, matched by utterance id."""
    s = i = d = n = 0
    for utt in sorted(hyps):
        if utt not in refs:
            raise DataError(f"hypothesis for unknown utterance {utt!r}")
        ds, di, dd = edit_ops(refs[utt], hyps[utt])
        s += ds
        i += di
        d += dd
        n += len(refs[utt])
    return WerReport(s, i, d, n)
