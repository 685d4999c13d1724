"""Weighted context-free grammars: parsing grammar files and sampling strings.

Grammar file format (UTF-8 text)::

    # comment
    Name -> Sym Sym 'lit' [0.7] | Other [0.3]

One nonterminal per logical block; a block continues on following lines
until the next ``Name ->`` header.  Alternatives are separated by ``|`` and
each ends with its probability in brackets.  Symbols are whitespace
separated: capitalized bare words are nonterminals, quoted symbols and bare
single characters are terminals.  The start symbol is the first rule's
left-hand side.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources

__all__ = [
    "GrammarError",
    "DerivationBudget",
    "Pcfg",
    "parse_pcfg",
    "sample_derivation",
    "load_default_grammar",
    "default_grammar_text",
]

# a row may be renormalized if its probability sum is off by at most this
PROB_SUM_TOLERANCE = 1e-2
PROB_SUM_EXACT = 1e-9

_RULE_HEAD = re.compile(r"^\s*([A-Z][A-Za-z0-9_]*)\s*->")
_PROB = re.compile(r"\[\s*([0-9.eE+-]+)\s*\]\s*$")


class GrammarError(ValueError):
    """Raised for malformed grammar files (position carried in the message)."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


@dataclass(frozen=True)
class DerivationBudget:
    """Caps on a single derivation; exceeding either is a soft failure."""

    max_expansion_depth: int = 64
    max_output_chars: int = 64

    def __post_init__(self):
        if self.max_expansion_depth <= 0 or self.max_output_chars <= 0:
            raise ValueError("budget limits must be strictly positive")


@dataclass
class Pcfg:
    """A validated weighted grammar.

    rules maps each nonterminal to a list of (production, probability)
    where production is a tuple of symbol names.  Probabilities of each
    rule list sum to 1.
    """

    nonterminals: set
    rules: dict
    start_symbol: str
    _samplers: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for nt, alts in self.rules.items():
            total = sum(p for _, p in alts)
            if abs(total - 1.0) > PROB_SUM_EXACT:
                raise GrammarError(f"probabilities for {nt} sum to {total!r}, not 1")
        if self.start_symbol not in self.rules or not self.rules[self.start_symbol]:
            raise GrammarError(f"start symbol {self.start_symbol} has no rules")
        for nt, alts in self.rules.items():
            for prod, _ in alts:
                for sym in prod:
                    if sym in self.nonterminals and sym not in self.rules:
                        raise GrammarError(f"undefined nonterminal {sym} in rule for {nt}")
        # cumulative-probability tables for the sampler
        for nt, alts in self.rules.items():
            cum = []
            acc = 0.0
            for _, p in alts:
                acc += p
                cum.append(acc)
            cum[-1] = 1.0
            self._samplers[nt] = (cum, [prod for prod, _ in alts])

    def is_terminal(self, symbol):
        return symbol not in self.rules


def _classify_symbol(token, line):
    """Return (symbol, is_nonterminal)."""
    if len(token) >= 2 and token[0] == token[-1] and token[0] in ("'", '"'):
        inner = token[1:-1]
        if not inner:
            raise GrammarError("empty quoted terminal", line)
        return inner, False
    if token[0].isupper():
        return token, True
    if len(token) == 1:
        return token, False
    raise GrammarError(f"bare symbol {token!r} is neither a single character "
                       "nor a capitalized nonterminal", line)


def parse_pcfg(spec_text):
    """Parse grammar-file text into a validated :class:`Pcfg`."""
    # group physical lines into logical blocks, one per nonterminal
    blocks = []  # (lhs, text, first_line)
    for lineno, raw in enumerate(spec_text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        m = _RULE_HEAD.match(line)
        if m:
            blocks.append([m.group(1), line[m.end():], lineno])
        elif blocks:
            blocks[-1][1] += " " + line.strip()
        else:
            raise GrammarError(f"expected 'Name ->' rule header, got {line.strip()!r}",
                               lineno)
    if not blocks:
        raise GrammarError("grammar file contains no rules")

    rules = {}
    order = []
    for lhs, body, lineno in blocks:
        if lhs in rules:
            raise GrammarError(f"duplicate rule block for {lhs}", lineno)
        alts = []
        for alt in body.split("|"):
            alt = alt.strip()
            if not alt:
                raise GrammarError(f"empty alternative in rule for {lhs}", lineno)
            pm = _PROB.search(alt)
            if not pm:
                raise GrammarError(f"alternative {alt!r} lacks a [probability]", lineno)
            try:
                prob = float(pm.group(1))
            except ValueError:
                raise GrammarError(f"bad probability {pm.group(1)!r}", lineno) from None
            if not (0.0 <= prob <= 1.0):
                raise GrammarError(f"probability {prob} outside [0, 1]", lineno)
            symbols = tuple(_classify_symbol(tok, lineno)[0]
                            for tok in alt[:pm.start()].split())
            if not symbols:
                raise GrammarError(f"alternative in rule for {lhs} has no symbols", lineno)
            alts.append((symbols, prob))
        total = sum(p for _, p in alts)
        if abs(total - 1.0) > PROB_SUM_TOLERANCE:
            raise GrammarError(
                f"probabilities for {lhs} sum to {total:g}, not 1", lineno)
        if abs(total - 1.0) > PROB_SUM_EXACT:
            # rows like nine 0.1111 entries are accepted and renormalized
            alts = [(prod, p / total) for prod, p in alts]
        rules[lhs] = alts
        order.append(lhs)

    nonterms = set(rules)
    for lhs, body, lineno in blocks:
        for alt in body.split("|"):
            pm = _PROB.search(alt.strip())
            if pm is None:
                continue
            for tok in alt.strip()[:pm.start()].split():
                sym, is_nt = _classify_symbol(tok, lineno)
                if is_nt and sym not in rules:
                    raise GrammarError(f"undefined nonterminal {sym}", lineno)

    return Pcfg(nonterminals=nonterms, rules=rules, start_symbol=order[0])


def sample_derivation(pcfg, budget, rng, rule_trace=None):
    """Sample one string by leftmost expansion.

    Returns the terminal string, or None when the derivation exceeds the
    budget (callers count and resample).  ``rng`` needs only a ``random()``
    method; pass ``random.Random(seed)`` or a numpy generator.  When
    ``rule_trace`` is a list, (nonterminal, alternative_index) pairs are
    appended for every expansion made, including those of abandoned
    derivations.
    """
    out = []
    out_len = 0
    # stack of (symbol, depth), leftmost symbol on top
    stack = [(pcfg.start_symbol, 0)]
    samplers = pcfg._samplers
    max_depth = budget.max_expansion_depth
    max_chars = budget.max_output_chars
    while stack:
        symbol, depth = stack.pop()
        prods = samplers.get(symbol)
        if prods is None:
            out.append(symbol)
            out_len += len(symbol)
            if out_len > max_chars:
                return None
            continue
        if depth >= max_depth:
            return None
        cum, productions = prods
        u = rng.random()
        idx = 0
        while cum[idx] < u:
            idx += 1
        if rule_trace is not None:
            rule_trace.append((symbol, idx))
        child_depth = depth + 1
        for sym in reversed(productions[idx]):
            stack.append((sym, child_depth))
    return "".join(out)


def default_grammar_text():
    """Text of the bundled integer-expression grammar."""
    return (resources.files("rewardmatch.assets")
            .joinpath("integer_expressions.cfg").read_text(encoding="utf-8"))


def load_default_grammar():
    """The bundled integer-expression grammar, parsed."""
    return parse_pcfg(default_grammar_text())
