"""Token error rate and router accuracy, broken down per language."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence


def edit_distance(hyp: Sequence[int], ref: Sequence[int]) -> tuple[int, int, int]:
    """Minimal Levenshtein alignment as ``(substitutions, insertions, deletions)``.

    Insertions are extra hypothesis tokens, deletions are missed reference
    tokens.  Among alignments of equal total cost the one with the most
    substitutions wins.
    """
    n, m = len(hyp), len(ref)
    # cell: (total, ins+del, subs, ins, dels)
    prev = [(j, j, 0, 0, j) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, i, 0, i, 0)]
        for j in range(1, m + 1):
            t, g, s, a, d = prev[j - 1]
            if hyp[i - 1] == ref[j - 1]:
                best = (t, g, s, a, d)
            else:
                best = (t + 1, g, s + 1, a, d)
            t, g, s, a, d = prev[j]
            best = min(best, (t + 1, g + 1, s, a + 1, d))
            t, g, s, a, d = cur[j - 1]
            best = min(best, (t + 1, g + 1, s, a, d + 1))
            cur.append(best)
        prev = cur
    _, _, s, a, d = prev[m]
    return s, a, d


@dataclass
class LanguageStats:
    utterances: int = 0
    ref_tokens: int = 0
    subs: int = 0
    ins: int = 0
    dels: int = 0
    routed: int = 0
    routed_correct: int = 0

    @property
    def errors(self) -> int:
        return self.subs + self.ins + self.dels

    @property
    def ter(self) -> float:
        return self.errors / self.ref_tokens if self.ref_tokens else math.nan

    @property
    def router_acc(self) -> float:
        return self.routed_correct / self.routed if self.routed else math.nan


@dataclass
class MetricsReport:
    languages: tuple[str, ...]
    stats: dict[str, LanguageStats]
    excluded: dict[str, int] = field(default_factory=dict)

    @property
    def ter(self) -> dict[str, float]:
        return {k: s.ter for k, s in self.stats.items()}

    @property
    def router_acc(self) -> dict[str, float]:
        return {k: s.router_acc for k, s in self.stats.items()}

    @property
    def ter_micro(self) -> float:
        ref = sum(s.ref_tokens for s in self.stats.values())
        return sum(s.errors for s in self.stats.values()) / ref if ref else math.nan

    @property
    def ter_macro(self) -> float:
        vals = [s.ter for s in self.stats.values() if s.ref_tokens]
        return sum(vals) / len(vals) if vals else math.nan

    @property
    def router_acc_avg(self) -> float:
        n = sum(s.routed for s in self.stats.values())
        return sum(s.routed_correct for s in self.stats.values()) / n if n else math.nan

    def to_dict(self) -> dict:
        return {
            "languages": list(self.languages),
            "ter": self.ter,
            "ter_micro": self.ter_micro,
            "ter_macro": self.ter_macro,
            "router_acc": self.router_acc,
            "router_acc_avg": self.router_acc_avg,
            "excluded": dict(self.excluded),
            "stats": {k: asdict(v) for k, v in self.stats.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=True) + "\n"

    def table(self) -> str:
        """Plain-text table in the column order languages..., Avg(micro), Avg(macro)."""
        def pct(x):
            return "-" if math.isnan(x) else f"{100 * x:.2f}"

        head = ["", *self.languages, "Avg", "Avg(macro)"]
        ter_row = ["TER %", *(pct(self.stats[l].ter) for l in self.languages),
                   pct(self.ter_micro), pct(self.ter_macro)]
        acc_row = ["router acc %", *(pct(self.stats[l].router_acc) for l in self.languages),
                   pct(self.router_acc_avg), ""]
        rows = [head, ter_row, acc_row]
        widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
        lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows]
        if any(self.excluded.values()):
            lines.append("excluded (pruned language): " +
                         ", ".join(f"{k}={v}" for k, v in self.excluded.items() if v))
        return "\n".join(lines) + "\n"


def token_error_rate(pairs: Iterable[tuple[Sequence[int], Sequence[int], str]],
                     languages: Sequence[str],
                     routed: Iterable[tuple[int, int]] | None = None,
                     excluded: dict[str, int] | None = None) -> MetricsReport:
    """Aggregate ``(hyp, ref, language)`` triples.

    ``routed`` optionally holds ``(chosen_expert, true_language_index)`` per
    utterance for the router-accuracy columns.
    """
    stats = {l: LanguageStats() for l in languages}
    n = 0
    for hyp, ref, lang in pairs:
        s, i, d = edit_distance(hyp, ref)
        st = stats[lang]
        st.utterances += 1
        st.ref_tokens += len(ref)
        st.subs += s
        st.ins += i
        st.dels += d
        n += 1
    if n == 0 or sum(s.ref_tokens for s in stats.values()) == 0:
        raise ValueError("token_error_rate needs at least one non-empty reference")
    for chosen, true in routed or ():
        st = stats[languages[true]]
        st.routed += 1
        st.routed_correct += int(chosen == true)
    return MetricsReport(tuple(languages), stats, dict(excluded or {}))
