"""Stochastic L-system engine.

A grammar is a tuple ``(alphabet, axiom, rules)``. Symbols are single
characters; a symbol is a *variable* when it heads at least one production
and a *constant* otherwise. Rewriting is parallel: in one pass every
variable occurrence is replaced by a rule body sampled by probability, and
constants copy through.

Sampling consumes exactly one uniform draw per variable occurrence, in
left-to-right order within a pass and pass after pass, from a Philox stream
keyed by the seed. The output is therefore a pure function of
``(grammar, iterations, seed)``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .seeding import make_rng

DEFAULT_LENGTH_CAP = 10**7
PROB_TOL = 1e-9


class GrammarError(ValueError):
    """Grammar failed validation."""


class ExpansionLimitError(RuntimeError):
    """Expanded string exceeded the configured length cap."""

    def __init__(self, iteration: int, length: int, cap: int):
        self.iteration = iteration
        self.length = length
        self.cap = cap
        super().__init__(
            f"expansion length {length} exceeds cap {cap} at iteration {iteration}"
        )


@dataclass(frozen=True)
class ProductionRule:
    head: str
    body: str
    probability: float = 1.0


@dataclass(frozen=True)
class Grammar:
    """Alphabet of single-character symbols, axiom and production rules.

    ``variables`` and ``constants`` partition the alphabet.
    """

    variables: frozenset[str]
    constants: frozenset[str]
    axiom: str
    rules: tuple[ProductionRule, ...]

    @property
    def alphabet(self) -> frozenset[str]:
        return self.variables | self.constants

    @classmethod
    def from_rules(
        cls, axiom: str, rules, constants: str | set[str] = ""
    ) -> "Grammar":
        """Build a grammar; variables are the rule heads.

        ``rules`` is an iterable of ``(head, body, probability)`` triples or
        ``ProductionRule`` objects. Any symbol used in the axiom or a body
        that is not a head is added to the constants.
        """
        parsed = tuple(
            r if isinstance(r, ProductionRule) else ProductionRule(*r) for r in rules
        )
        variables = frozenset(r.head for r in parsed)
        used = set(axiom).union(*(set(r.body) for r in parsed)) if parsed else set(axiom)
        consts = frozenset(set(constants) | (used - variables))
        return cls(variables, consts, axiom, parsed)


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate_grammar(g: Grammar) -> ValidationReport:
    """Check every grammar invariant; violations are returned, not raised."""
    report = ValidationReport()
    v = report.violations
    alphabet = g.alphabet
    for sym in sorted(g.variables & g.constants):
        v.append(f"symbol {sym!r} declared as both variable and constant")
    for sym in sorted(alphabet):
        if len(sym) != 1:
            v.append(f"symbol {sym!r} is not a single character")
    if not g.axiom:
        v.append("axiom is empty")
    for sym in sorted(set(g.axiom) - alphabet):
        v.append(f"axiom symbol {sym!r} not in alphabet")

    sums: dict[str, float] = {}
    for i, rule in enumerate(g.rules):
        label = f"rule {i} ({rule.head}->{rule.body})"
        if rule.head not in g.variables:
            kind = "constant" if rule.head in g.constants else "undeclared symbol"
            v.append(f"{label}: head {rule.head!r} is a {kind}")
        if not rule.body:
            v.append(f"{label}: body is empty")
        for sym in sorted(set(rule.body) - alphabet):
            v.append(f"{label}: body symbol {sym!r} not in alphabet")
        if not (0.0 < rule.probability <= 1.0):
            v.append(f"{label}: probability {rule.probability} outside (0, 1]")
        sums[rule.head] = sums.get(rule.head, 0.0) + rule.probability
    for head in sorted(g.variables):
        if head not in sums:
            v.append(f"variable {head!r} has no rules")
        elif abs(sums[head] - 1.0) > PROB_TOL:
            v.append(f"probabilities for head {head} sum to {sums[head]:.12g}")
    return report


class _Table:
    """Per-head cumulative probabilities and bodies for fast sampling."""

    def __init__(self, g: Grammar):
        bodies: dict[str, list[str]] = {}
        probs: dict[str, list[float]] = {}
        for r in g.rules:
            bodies.setdefault(r.head, []).append(r.body)
            probs.setdefault(r.head, []).append(r.probability)
        self.bodies = bodies
        self.cum = {}
        for head, p in probs.items():
            c = np.cumsum(p, dtype=float)
            c /= c[-1]
            c[-1] = np.inf
            self.cum[head] = c


def expand(
    g: Grammar,
    iterations: int,
    seed: int,
    *,
    length_cap: int = DEFAULT_LENGTH_CAP,
    check: bool = True,
) -> str:
    """Apply ``iterations`` parallel rewriting passes to the axiom."""
    if iterations < 0:
        raise ValueError("iterations must be non-negative")
    if check:
        report = validate_grammar(g)
        if not report.ok:
            raise GrammarError("; ".join(report.violations))
    table = _Table(g)
    rng = make_rng(seed)
    splitter = re.compile("([" + re.escape("".join(sorted(g.variables))) + "])")
    s = g.axiom
    for it in range(1, iterations + 1):
        # odd indices of the split are the variable occurrences, left to right
        parts = splitter.split(s)
        draws = rng.random(len(parts) // 2)
        for k, i in enumerate(range(1, len(parts), 2)):
            head = parts[i]
            idx = int(np.searchsorted(table.cum[head], draws[k], side="right"))
            parts[i] = table.bodies[head][idx]
        s = "".join(parts)
        if len(s) > length_cap:
            raise ExpansionLimitError(it, len(s), length_cap)
    return s


def fibonacci_grammar() -> Grammar:
    return Grammar.from_rules("a", [("a", "ab", 1.0), ("b", "a", 1.0)])


def load_grammar(path: str | Path) -> Grammar:
    """Load a grammar from a YAML file.

    Schema::

        alphabet: "XF+-[]"     # optional; every character is a symbol
        axiom: X
        rules:
          - {head: X, body: FX, p: 0.8}
          - {head: X, body: +FX, p: 0.1}
          - {head: X, body: -FX, p: 0.1}

    Variables are the rule heads; the remaining alphabet symbols are
    constants. Validation is left to :func:`validate_grammar`.
    """
    doc = yaml.safe_load(Path(path).read_text())
    return grammar_from_dict(doc)


def grammar_from_dict(doc: dict) -> Grammar:
    rules = [
        ProductionRule(str(r["head"]), str(r["body"]), float(r.get("p", 1.0)))
        for r in doc.get("rules", [])
    ]
    heads = frozenset(r.head for r in rules)
    alphabet = set(str(doc.get("alphabet", "")))
    if not alphabet:
        alphabet = set(str(doc["axiom"])).union(*(set(r.body) for r in rules))
    alphabet |= heads
    return Grammar(heads, frozenset(alphabet - heads), str(doc["axiom"]), tuple(rules))
