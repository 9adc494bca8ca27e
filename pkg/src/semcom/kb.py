"""Symbolic knowledge bases with fuzzy real-valued semantics.

A knowledge base holds entities, predicates, relations, facts (head,
relation, tail triples) and a list of logical formulas. A grounding maps
entities to real vectors and predicates/relations to truth functions with
values in [0, 1]. A theory bundles a knowledge base with its grounding; its
information content is the summed negative log (base 2) of the aggregated
truth of each formula, so a theory whose formulas are all fully true carries
zero bits.

Connectives use the product t-norm family: negation 1-a, conjunction a*b,
disjunction a+b-a*b, Reichenbach implication 1-a+a*b, and the biconditional
as the conjunction of both implications.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence, Union

import numpy as np

__all__ = [
    "KbError",
    "TruthDomainError",
    "UnboundVariableError",
    "UngroundedSymbolError",
    "InfiniteContentError",
    "Symbol",
    "Fact",
    "Atom",
    "Not",
    "And",
    "Or",
    "Implies",
    "Iff",
    "Aggregate",
    "Formula",
    "KnowledgeBase",
    "Grounding",
    "Theory",
    "eval_connective",
    "eval_formula",
    "aggregate",
    "formula_truth",
    "semantic_content",
    "update_semantic_content",
    "formula_to_prefix",
    "formula_from_prefix",
    "kb_to_json",
    "kb_from_json",
    "save_kb",
    "load_kb",
]

VARIABLE_PREFIX = "?"

ENTITY = "entity"
PREDICATE = "predicate"
RELATION = "relation"
FUNCTION = "function"

AGGREGATORS = ("mean", "minimum", "harmonic")


class KbError(ValueError):
    """Base class for knowledge-base errors."""


class TruthDomainError(KbError):
    """A truth value fell outside [0, 1]."""


class UnboundVariableError(KbError):
    """A formula variable had no binding at evaluation time."""


class UngroundedSymbolError(KbError):
    """A symbol referenced by a formula has no grounding entry."""


class InfiniteContentError(KbError):
    """A formula aggregated to truth 0, giving unbounded content."""


# ---------------------------------------------------------------------------
# Symbols, facts, formulas
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Symbol:
    """A named element of the language.

    ``signature`` lists domain names: for entities a single domain, for
    predicates and relations the input domains, for functions the input
    domains followed by the output domain.
    """

    id: str
    kind: str
    signature: tuple[str, ...] = ("thing",)

    def __post_init__(self):
        if self.kind not in (ENTITY, PREDICATE, RELATION, FUNCTION):
            raise KbError(f"unknown symbol kind {self.kind!r}")
        if self.kind in (PREDICATE, RELATION) and len(self.signature) < 1:
            raise KbError(f"{self.kind} {self.id!r} must declare arity >= 1")


@dataclass(frozen=True)
class Fact:
    """A (head, relation, tail) triple."""

    head: str
    relation: str
    tail: str


@dataclass(frozen=True)
class Atom:
    predicate: str
    args: tuple[str, ...]


@dataclass(frozen=True)
class Not:
    child: "Formula"


@dataclass(frozen=True)
class And:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Or:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Implies:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Iff:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Aggregate:
    """A quantifier-style wrapper: aggregate ``body`` over ``instances``.

    ``var`` must start with '?' and is bound to each instance in turn.
    """

    kind: str
    var: str
    instances: tuple[str, ...]
    body: "Formula"

    def __post_init__(self):
        if self.kind not in AGGREGATORS:
            raise KbError(f"unknown aggregator {self.kind!r}")
        if not self.var.startswith(VARIABLE_PREFIX):
            raise KbError(f"aggregation variable {self.var!r} must start with '?'")


Formula = Union[Atom, Not, And, Or, Implies, Iff, Aggregate]

_BINARY_NODES = {And: "and", Or: "or", Implies: "implies", Iff: "iff"}
_BINARY_BY_NAME = {name: cls for cls, name in _BINARY_NODES.items()}


def _check_wellformed(f: Formula, bound: frozenset[str]) -> None:
    if isinstance(f, Atom):
        for a in f.args:
            if a.startswith(VARIABLE_PREFIX) and a not in bound:
                raise KbError(f"variable {a!r} used outside its quantifier")
    elif isinstance(f, Not):
        _check_wellformed(f.child, bound)
    elif isinstance(f, (And, Or, Implies, Iff)):
        _check_wellformed(f.left, bound)
        _check_wellformed(f.right, bound)
    elif isinstance(f, Aggregate):
        if f.var in bound:
            raise KbError(f"variable {f.var!r} bound twice")
        _check_wellformed(f.body, bound | {f.var})
    else:
        raise KbError(f"not a formula node: {f!r}")


# ---------------------------------------------------------------------------
# Knowledge base, grounding, theory
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KnowledgeBase:
    """Entities, predicates, relations, facts and formulas, closed under reference."""

    entities: tuple[Symbol, ...] = ()
    predicates: tuple[Symbol, ...] = ()
    relations: tuple[Symbol, ...] = ()
    facts: tuple[Fact, ...] = ()
    formulas: tuple[Formula, ...] = ()

    def __post_init__(self):
        ids: set[str] = set()
        for sym in (*self.entities, *self.predicates, *self.relations):
            if sym.id in ids:
                raise KbError(f"duplicate symbol id {sym.id!r}")
            ids.add(sym.id)
        entity_ids = {s.id for s in self.entities}
        rel_ids = {s.id for s in self.relations}
        pred_ids = {s.id for s in self.predicates}
        for fact in self.facts:
            if fact.head not in entity_ids or fact.tail not in entity_ids:
                raise KbError(f"fact {fact} references an unknown entity")
            if fact.relation not in rel_ids:
                raise KbError(f"fact {fact} references unknown relation {fact.relation!r}")
        callable_ids = pred_ids | rel_ids
        for f in self.formulas:
            _check_wellformed(f, frozenset())
            for atom in _iter_atoms(f):
                if atom.predicate not in callable_ids:
                    raise KbError(f"formula references unknown predicate {atom.predicate!r}")
                for a in atom.args:
                    if not a.startswith(VARIABLE_PREFIX) and a not in entity_ids:
                        raise KbError(f"formula references unknown entity {a!r}")

    def entity_ids(self) -> tuple[str, ...]:
        return tuple(s.id for s in self.entities)


def _iter_atoms(f: Formula) -> Iterable[Atom]:
    if isinstance(f, Atom):
        yield f
    elif isinstance(f, Not):
        yield from _iter_atoms(f.child)
    elif isinstance(f, (And, Or, Implies, Iff)):
        yield from _iter_atoms(f.left)
        yield from _iter_atoms(f.right)
    elif isinstance(f, Aggregate):
        yield from _iter_atoms(f.body)


TruthFn = Callable[..., float]


@dataclass(frozen=True)
class Grounding:
    """Real-valued interpretation of the symbols.

    ``entity_vectors`` maps entity id to a vector; vectors sharing a domain
    must share a dimension. ``truth_fns`` maps predicate/relation id to a
    function of the bound entity ids returning a truth value in [0, 1];
    functions may look up ``entity_vectors`` through the grounding closure.
    ``params`` holds any learned parameters behind those functions.
    """

    entity_vectors: Mapping[str, np.ndarray] = field(default_factory=dict)
    truth_fns: Mapping[str, TruthFn] = field(default_factory=dict)
    params: Mapping[str, object] = field(default_factory=dict)

    def entity_vector(self, entity_id: str) -> np.ndarray:
        try:
            return self.entity_vectors[entity_id]
        except KeyError:
            raise UngroundedSymbolError(f"no vector grounding for entity {entity_id!r}")

    def truth_fn(self, symbol_id: str) -> TruthFn:
        try:
            return self.truth_fns[symbol_id]
        except KeyError:
            raise UngroundedSymbolError(f"no truth function for {symbol_id!r}")


@dataclass(frozen=True)
class Theory:
    """A knowledge base together with its grounding and parameters."""

    kb: KnowledgeBase
    grounding: Grounding
    params: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        dims: dict[str, int] = {}
        for sym in self.kb.entities:
            if sym.id not in self.grounding.entity_vectors:
                raise UngroundedSymbolError(f"entity {sym.id!r} has no grounding entry")
            vec = np.asarray(self.grounding.entity_vectors[sym.id])
            domain = sym.signature[0]
            if domain in dims and dims[domain] != vec.size:
                raise KbError(
                    f"entities of domain {domain!r} ground to different dimensions"
                )
            dims[domain] = vec.size
        for sym in (*self.kb.predicates, *self.kb.relations):
            if sym.id not in self.grounding.truth_fns:
                raise UngroundedSymbolError(f"{sym.kind} {sym.id!r} has no truth function")


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _check_truth(value: float, what: str) -> float:
    v = float(value)
    if math.isnan(v) or v < 0.0 or v > 1.0:
        raise TruthDomainError(f"{what} produced truth value {value!r} outside [0, 1]")
    return v


def eval_connective(op: str, args: Sequence[float]) -> float:
    """Evaluate one fuzzy connective on truth values in [0, 1]."""
    vals = [_check_truth(a, f"argument to {op!r}") for a in args]
    if op == "not":
        if len(vals) != 1:
            raise KbError("negation takes exactly one argument")
        return 1.0 - vals[0]
    if len(vals) != 2:
        raise KbError(f"connective {op!r} takes exactly two arguments")
    a, b = vals
    if op == "and":
        return a * b
    if op == "or":
        return a + b - a * b
    if op == "implies":
        return 1.0 - a + a * b
    if op == "iff":
        fwd = 1.0 - a + a * b
        bwd = 1.0 - b + b * a
        return fwd * bwd
    raise KbError(f"unknown connective {op!r}")


def _resolve_term(term: str, bindings: Mapping[str, str]) -> str:
    if term.startswith(VARIABLE_PREFIX):
        try:
            return bindings[term]
        except KeyError:
            raise UnboundVariableError(f"unbound variable {term!r}")
    return term


def eval_formula(f: Formula, theory: Theory, bindings: Mapping[str, str] | None = None) -> float:
    """Recursively evaluate a formula to a truth value in [0, 1]."""
    bindings = bindings or {}
    if isinstance(f, Atom):
        entities = tuple(_resolve_term(a, bindings) for a in f.args)
        fn = theory.grounding.truth_fn(f.predicate)
        return _check_truth(fn(*entities), f"predicate {f.predicate!r}")
    if isinstance(f, Not):
        return eval_connective("not", [eval_formula(f.child, theory, bindings)])
    if isinstance(f, (And, Or, Implies, Iff)):
        op = _BINARY_NODES[type(f)]
        return eval_connective(
            op,
            [eval_formula(f.left, theory, bindings), eval_formula(f.right, theory, bindings)],
        )
    if isinstance(f, Aggregate):
        return aggregate(f, theory, bindings=bindings)
    raise KbError(f"not a formula node: {f!r}")


def aggregate(
    f: Aggregate,
    theory: Theory,
    instances: Sequence[str] | None = None,
    agg: str | None = None,
    bindings: Mapping[str, str] | None = None,
) -> float:
    """Aggregate the body of a quantified formula over an instance set.

    ``instances`` and ``agg`` default to the ones stored on the formula.
    """
    if not isinstance(f, Aggregate):
        raise KbError("aggregate expects a quantified formula")
    inst = tuple(instances) if instances is not None else f.instances
    kind = agg if agg is not None else f.kind
    if kind not in AGGREGATORS:
        raise KbError(f"unknown aggregator {kind!r}")
    if not inst:
        raise KbError("aggregation over an empty instance set")
    base = dict(bindings or {})
    vals = []
    for e in inst:
        base[f.var] = e
        vals.append(eval_formula(f.body, theory, base))
    if kind == "mean":
        return float(np.mean(vals))
    if kind == "minimum":
        return float(np.min(vals))
    # harmonic mean; any zero truth pins the aggregate at zero
    if any(v == 0.0 for v in vals):
        return 0.0
    return float(len(vals) / np.sum([1.0 / v for v in vals]))


def formula_truth(f: Formula, theory: Theory) -> float:
    """Aggregated truth of a closed formula (plain evaluation if unquantified)."""
    if isinstance(f, Aggregate):
        return aggregate(f, theory)
    return eval_formula(f, theory, {})


# ---------------------------------------------------------------------------
# Semantic content
# ---------------------------------------------------------------------------

def semantic_content(
    theory: Theory, *, clamp: bool = False, floor: float = 1e-9
) -> float:
    """Information content of a theory in bits: sum of -log2 of formula truths.

    A formula with aggregated truth 0 raises InfiniteContentError unless
    ``clamp`` is set, in which case truths are floored at ``floor``.
    """
    total = 0.0
    for f in theory.kb.formulas:
        truth = formula_truth(f, theory)
        if truth == 0.0:
            if not clamp:
                raise InfiniteContentError(
                    f"formula {formula_to_prefix(f)!r} has aggregated truth 0"
                )
            truth = floor
        elif clamp:
            truth = max(truth, floor)
        total += -math.log2(truth)
    return total


def update_semantic_content(
    prev: Theory,
    prev_content: float,
    delta: Sequence[Formula],
    *,
    mode: str = "log",
    clamp: bool = False,
    floor: float = 1e-9,
) -> tuple[Theory, float]:
    """Extend a theory with new formulas and return the updated content.

    In the default ``"log"`` mode each added formula contributes
    -log2 of its aggregated truth, so the result equals recomputing
    ``semantic_content`` on the extended theory. The ``"raw"`` mode instead
    adds the plain sum of aggregated truths over the whole extended formula
    set, kept behind this flag because it is not commensurate with the log
    measure.
    """
    if mode not in ("log", "raw"):
        raise KbError(f"unknown update mode {mode!r}")
    new_kb = replace(prev.kb, formulas=prev.kb.formulas + tuple(delta))
    new_theory = replace(prev, kb=new_kb)
    if mode == "raw":
        total = prev_content + sum(
            formula_truth(f, new_theory) for f in new_kb.formulas
        )
        return new_theory, float(total)
    added = 0.0
    for f in delta:
        truth = formula_truth(f, new_theory)
        if truth == 0.0:
            if not clamp:
                raise InfiniteContentError(
                    f"added formula {formula_to_prefix(f)!r} has aggregated truth 0"
                )
            truth = floor
        elif clamp:
            truth = max(truth, floor)
        added += -math.log2(truth)
    return new_theory, float(prev_content + added)


# ---------------------------------------------------------------------------
# Serialization: prefix-notation formulas and a JSON container
# ---------------------------------------------------------------------------

def formula_to_prefix(f: Formula) -> str:
    """Render a formula as a prefix-notation s-expression string."""
    if isinstance(f, Atom):
        return "(" + " ".join((f.predicate, *f.args)) + ")"
    if isinstance(f, Not):
        return f"(not {formula_to_prefix(f.child)})"
    if isinstance(f, (And, Or, Implies, Iff)):
        name = _BINARY_NODES[type(f)]
        return f"({name} {formula_to_prefix(f.left)} {formula_to_prefix(f.right)})"
    if isinstance(f, Aggregate):
        inst = "(" + " ".join(f.instances) + ")"
        return f"(agg {f.kind} {f.var} {inst} {formula_to_prefix(f.body)})"
    raise KbError(f"not a formula node: {f!r}")


def _tokenize(text: str) -> list[str]:
    return text.replace("(", " ( ").replace(")", " ) ").split()


def _parse(tokens: list[str], pos: int):
    if tokens[pos] != "(":
        raise KbError(f"expected '(' at token {pos} of formula")
    pos += 1
    head = tokens[pos]
    pos += 1
    if head == "not":
        child, pos = _parse(tokens, pos)
        node: Formula = Not(child)
    elif head in _BINARY_BY_NAME:
        left, pos = _parse(tokens, pos)
        right, pos = _parse(tokens, pos)
        node = _BINARY_BY_NAME[head](left, right)
    elif head == "agg":
        kind = tokens[pos]
        var = tokens[pos + 1]
        pos += 2
        if tokens[pos] != "(":
            raise KbError("expected instance list after aggregation variable")
        pos += 1
        instances = []
        while tokens[pos] != ")":
            instances.append(tokens[pos])
            pos += 1
        pos += 1
        body, pos = _parse(tokens, pos)
        node = Aggregate(kind, var, tuple(instances), body)
    else:
        args = []
        while tokens[pos] != ")":
            args.append(tokens[pos])
            pos += 1
        return Atom(head, tuple(args)), pos + 1
    if tokens[pos] != ")":
        raise KbError("unbalanced parentheses in formula")
    return node, pos + 1


def formula_from_prefix(text: str) -> Formula:
    """Parse a prefix-notation formula string."""
    tokens = _tokenize(text)
    if not tokens:
        raise KbError("empty formula string")
    node, pos = _parse(tokens, 0)
    if pos != len(tokens):
        raise KbError(f"trailing tokens in formula: {' '.join(tokens[pos:])}")
    return node


def kb_to_json(kb: KnowledgeBase) -> str:
    """Serialize a knowledge base to the documented JSON schema."""
    doc = {
        "entities": [{"id": s.id, "domains": list(s.signature)} for s in kb.entities],
        "predicates": [{"id": s.id, "domains": list(s.signature)} for s in kb.predicates],
        "relations": [{"id": s.id, "domains": list(s.signature)} for s in kb.relations],
        "facts": [[f.head, f.relation, f.tail] for f in kb.facts],
        "formulas": [formula_to_prefix(f) for f in kb.formulas],
    }
    return json.dumps(doc, indent=2)


def kb_from_json(text: str) -> KnowledgeBase:
    doc = json.loads(text)
    def syms(section: str, kind: str) -> tuple[Symbol, ...]:
        return tuple(
            Symbol(item["id"], kind, tuple(item["domains"])) for item in doc.get(section, [])
        )
    return KnowledgeBase(
        entities=syms("entities", ENTITY),
        predicates=syms("predicates", PREDICATE),
        relations=syms("relations", RELATION),
        facts=tuple(Fact(h, r, t) for h, r, t in doc.get("facts", [])),
        formulas=tuple(formula_from_prefix(s) for s in doc.get("formulas", [])),
    )


def save_kb(kb: KnowledgeBase, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(kb_to_json(kb))
        fh.write("\n")


def load_kb(path) -> KnowledgeBase:
    with open(path, "r", encoding="utf-8") as fh:
        return kb_from_json(fh.read())
