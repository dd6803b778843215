"""Integer add/subtract expressions: generation, parsing, rendering, tokenization.

Expressions are fully parenthesized binary trees whose non-leaf operands are
always wrapped in parentheses, e.g. ``(154-38)-(290-67)`` or ``617-(555-602)``.
Every node carries a path label ("" for the root, then "L"/"R" per step) that
is used to address intermediate values and template slots.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Sequence


class ParseError(ValueError):
    """Malformed expression text; ``position`` is the offending character index."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class TokenizationError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class TemplateError(ValueError):
    pass


PLUS = "+"
MINUS = "-"
OPERATORS = (PLUS, MINUS)


@dataclass(frozen=True)
class ExpressionNode:
    kind: str  # "leaf" | "binary"
    value: int | None = None
    operator: str | None = None
    left: "ExpressionNode | None" = None
    right: "ExpressionNode | None" = None
    path: str = ""

    @property
    def is_leaf(self) -> bool:
        return self.kind == "leaf"

    def nodes(self) -> list["ExpressionNode"]:
        """Pre-order list of every node in the tree."""
        out = []
        stack = [self]
        while stack:
            node = stack.pop()
            out.append(node)
            if not node.is_leaf:
                stack.append(node.right)
                stack.append(node.left)
        return out

    def leaves(self) -> list["ExpressionNode"]:
        return [n for n in self.nodes() if n.is_leaf]


def leaf(value: int, path: str = "") -> ExpressionNode:
    return ExpressionNode("leaf", value=int(value), path=path)


def binary(operator: str, left: ExpressionNode, right: ExpressionNode, path: str = "") -> ExpressionNode:
    if operator not in OPERATORS:
        raise ValueError(f"unknown operator {operator!r}")
    return ExpressionNode(
        "binary",
        operator=operator,
        left=_repath(left, path + "L"),
        right=_repath(right, path + "R"),
        path=path,
    )


def _repath(node: ExpressionNode, path: str) -> ExpressionNode:
    if node.path == path:
        return node
    if node.is_leaf:
        return leaf(node.value, path)
    return binary(node.operator, node.left, node.right, path)


def render(node: ExpressionNode) -> str:
    return _render(node, lambda n: str(n.value), top=True)


def _render(node: ExpressionNode, leaf_text, top: bool) -> str:
    if node.is_leaf:
        return leaf_text(node)
    text = (
        _render(node.left, leaf_text, top=False)
        + node.operator
        + _render(node.right, leaf_text, top=False)
    )
    return text if top else f"({text})"


def evaluate(node: ExpressionNode) -> int:
    if node.is_leaf:
        return node.value
    left = evaluate(node.left)
    right = evaluate(node.right)
    return left + right if node.operator == PLUS else left - right


# --------------------------------------------------------------------------
# Parsing

_SLOT_RE = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*):([1-9][0-9]*)\}")


def _lex(text: str, allow_slots: bool = False) -> list[tuple[str, object, int]]:
    tokens = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch.isdigit():
            j = i
            while j < len(text) and text[j].isdigit():
                j += 1
            tokens.append(("num", int(text[i:j]), i))
            i = j
        elif ch in "+-()":
            tokens.append((ch, ch, i))
            i += 1
        elif ch == "{" and allow_slots:
            m = _SLOT_RE.match(text, i)
            if m is None:
                raise ParseError("malformed slot placeholder", i)
            tokens.append(("slot", (m.group(1), int(m.group(2))), i))
            i = m.end()
        else:
            raise ParseError(f"unexpected character {ch!r}", i)
    tokens.append(("end", None, len(text)))
    return tokens


class _Parser:
    # expr := term | expr op term ; term := integer | "(" expr ")"

    def __init__(self, tokens):
        self.tokens = tokens
        self.pos = 0
        self.slots: dict[str, int] = {}  # name -> width, in textual order
        self.saw_number = False

    def peek(self):
        return self.tokens[self.pos]

    def take(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expr(self) -> ExpressionNode:
        node = self.term()
        while self.peek()[0] in OPERATORS:
            op = self.take()[0]
            node = binary(op, node, self.term())
        return node

    def term(self) -> ExpressionNode:
        kind, value, where = self.take()
        if kind == "num":
            self.saw_number = True
            return leaf(value)
        if kind == "slot":
            name, width = value
            if name in self.slots:
                raise ParseError(f"duplicate slot {name!r}", where)
            self.slots[name] = width
            return leaf(0)
        if kind == "(":
            node = self.expr()
            if self.take()[0] != ")":
                raise ParseError("expected ')'", self.tokens[self.pos - 1][2])
            return node
        raise ParseError(f"expected a number or '(' but found {kind!r}", where)

    def parse(self) -> ExpressionNode:
        node = self.expr()
        kind, _, where = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected {kind!r}", where)
        return node


def parse(text: str) -> ExpressionNode:
    """Parse expression text into an AST; unparenthesized chains associate left."""
    return _Parser(_lex(text)).parse()


# --------------------------------------------------------------------------
# Intermediate values and sign algebra


@dataclass(frozen=True)
class IntermediateValue:
    path: str
    label: str
    value: int


def intermediates(node: ExpressionNode, names: Mapping[str, str] | None = None) -> list[IntermediateValue]:
    """One entry per AST node in pre-order; ``names`` maps leaf paths to symbolic labels."""

    def leaf_text(n):
        if names is not None and n.path in names:
            return names[n.path]
        return str(n.value)

    return [
        IntermediateValue(n.path, _render(n, leaf_text, top=True), evaluate(n))
        for n in node.nodes()
    ]


def sign_coefficients(node: ExpressionNode) -> dict[str, int]:
    """Map leaf path -> +1/-1 so that evaluate(node) == sum(sign * leaf value)."""
    coeffs = {}
    stack = [(node, 1)]
    while stack:
        n, sign = stack.pop()
        if n.is_leaf:
            coeffs[n.path] = sign
        else:
            stack.append((n.left, sign))
            stack.append((n.right, -sign if n.operator == MINUS else sign))
    return coeffs


# --------------------------------------------------------------------------
# Tokenization

CLS = "[CLS]"
PAD = "[PAD]"


class Vocabulary:
    """Fixed 26-symbol vocabulary with digit-continuation tokens."""

    SYMBOLS: tuple[str, ...] = (
        (CLS, PAD)
        + tuple(str(d) for d in range(10))
        + tuple(f"##{d}" for d in range(10))
        + ("+", "-", "(", ")")
    )

    def __init__(self):
        self.symbols = list(self.SYMBOLS)
        self.ids = {s: i for i, s in enumerate(self.symbols)}

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def cls_id(self) -> int:
        return self.ids[CLS]

    @property
    def pad_id(self) -> int:
        return self.ids[PAD]

    def id(self, symbol: str) -> int:
        return self.ids[symbol]

    def symbol(self, token_id: int) -> str:
        return self.symbols[token_id]


VOCAB = Vocabulary()


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[int, ...]

    @property
    def length(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def symbols(self) -> list[str]:
        return [VOCAB.symbol(t) for t in self.tokens]


def tokenize(text: str, pad_to: int | None = None) -> TokenSequence:
    ids = [VOCAB.cls_id]
    prev_digit = False
    for i, ch in enumerate(text):
        if ch.isdigit() and ch.isascii():
            ids.append(VOCAB.id(f"##{ch}" if prev_digit else ch))
            prev_digit = True
        elif ch in "+-()":
            ids.append(VOCAB.id(ch))
            prev_digit = False
        else:
            raise TokenizationError(f"character {ch!r} at position {i} is not in the vocabulary")
    if pad_to is not None:
        if pad_to < len(ids):
            raise TokenizationError(f"sequence of length {len(ids)} exceeds pad target {pad_to}")
        ids.extend([VOCAB.pad_id] * (pad_to - len(ids)))
    return TokenSequence(tuple(ids))


def detokenize(seq: TokenSequence | Sequence[int]) -> str:
    tokens = seq.tokens if isinstance(seq, TokenSequence) else seq
    out = []
    for t in tokens:
        sym = VOCAB.symbol(int(t))
        if sym in (CLS, PAD):
            continue
        out.append(sym[2:] if sym.startswith("##") else sym)
    return "".join(out)


# --------------------------------------------------------------------------
# Equations and datasets


@dataclass(frozen=True)
class Equation:
    text: str
    ast: ExpressionNode
    result: int
    intermediates: tuple[IntermediateValue, ...]

    @classmethod
    def from_ast(cls, ast: ExpressionNode, names: Mapping[str, str] | None = None) -> "Equation":
        return cls(render(ast), ast, evaluate(ast), tuple(intermediates(ast, names)))

    @classmethod
    def from_text(cls, text: str) -> "Equation":
        return cls.from_ast(parse(text))

    def tokens(self, pad_to: int | None = None) -> TokenSequence:
        return tokenize(self.text, pad_to)


@dataclass(frozen=True)
class GenerationConfig:
    size: int = 200_000
    eval_size: int = 10_000
    min_ops: int = 1
    max_ops: int = 5
    operand_min: int = 1
    operand_max: int = 1000

    def validate(self) -> None:
        if self.operand_min > self.operand_max:
            raise ConfigError(f"empty operand range [{self.operand_min}, {self.operand_max}]")
        if self.operand_min < 0:
            raise ConfigError("operands must be nonnegative")
        if self.max_ops < 1 or self.min_ops < 1 or self.min_ops > self.max_ops:
            raise ConfigError(f"invalid operation count range [{self.min_ops}, {self.max_ops}]")
        if self.size < 1:
            raise ConfigError("dataset size must be at least 1")
        if not 0 <= self.eval_size < self.size or (self.eval_size == 0 and self.size > 1):
            raise ConfigError(f"eval_size must lie in [1, size) (got {self.eval_size} of {self.size})")


@dataclass
class DatasetSplit:
    train: list[Equation]
    eval: list[Equation]
    config: GenerationConfig = field(default_factory=GenerationConfig)
    seed: int = 0


@lru_cache(maxsize=None)
def _num_shapes(n_ops: int) -> int:
    """Catalan number: full binary trees with ``n_ops`` internal nodes."""
    if n_ops == 0:
        return 1
    return sum(_num_shapes(i) * _num_shapes(n_ops - 1 - i) for i in range(n_ops))


def random_expression(rng: random.Random, n_ops: int, lo: int, hi: int, path: str = "") -> ExpressionNode:
    """Shape uniform over full binary trees with ``n_ops`` operators."""
    if n_ops == 0:
        return leaf(rng.randint(lo, hi), path)
    # P(left subtree has i ops) = C_i C_{n-1-i} / C_n
    pick = rng.randrange(_num_shapes(n_ops))
    for i in range(n_ops):
        weight = _num_shapes(i) * _num_shapes(n_ops - 1 - i)
        if pick < weight:
            break
        pick -= weight
    op = PLUS if rng.random() < 0.5 else MINUS
    left = random_expression(rng, i, lo, hi, path + "L")
    right = random_expression(rng, n_ops - 1 - i, lo, hi, path + "R")
    return ExpressionNode("binary", operator=op, left=left, right=right, path=path)


def random_equation(rng: random.Random, config: GenerationConfig) -> Equation:
    n_ops = rng.randint(config.min_ops, config.max_ops)
    return Equation.from_ast(random_expression(rng, n_ops, config.operand_min, config.operand_max))


def generate_dataset(config: GenerationConfig, seed: int) -> DatasetSplit:
    config.validate()
    rng = random.Random(seed)
    n_train = config.size - config.eval_size
    train = [random_equation(rng, config) for _ in range(n_train)]
    seen = {eq.text for eq in train}
    evals: list[Equation] = []
    attempts = 0
    max_attempts = 100 * max(config.eval_size, 1) + 1000
    while len(evals) < config.eval_size:
        attempts += 1
        if attempts > max_attempts:
            raise ConfigError("cannot draw enough eval equations disjoint from the training split")
        eq = random_equation(rng, config)
        if eq.text not in seen:
            seen.add(eq.text)
            evals.append(eq)
    return DatasetSplit(train, evals, config, seed)


def write_dataset(equations: Iterable[Equation], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for eq in equations:
            f.write(f"{eq.text}\t{eq.result}\n")


def read_dataset(path: str | Path) -> list[Equation]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                text, result = line.split("\t")
                eq = Equation.from_text(text)
            except (ValueError, ParseError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            if eq.result != int(result):
                raise ValueError(f"{path}:{lineno}: stated result {result} != {eq.result}")
            out.append(eq)
    return out


# --------------------------------------------------------------------------
# Templates


def width_range(width: int) -> tuple[int, int]:
    """Inclusive value range of integers written with exactly ``width`` digits."""
    return (0 if width == 1 else 10 ** (width - 1), 10**width - 1)


@dataclass(frozen=True)
class EquationTemplate:
    """Skeleton expression with named fixed-width operand slots, e.g. ``{a:3}-({b:3}-{c:3})``."""

    text: str
    skeleton: ExpressionNode
    slots: dict[str, tuple[str, int]]  # name -> (leaf path, digit width)

    @classmethod
    def parse(cls, text: str) -> "EquationTemplate":
        parser = _Parser(_lex(text.strip(), allow_slots=True))
        raw = parser.parse()
        if not parser.slots:
            raise TemplateError("template has no slots")
        if parser.saw_number:
            raise TemplateError("templates may only contain slot placeholders as operands")
        # Pre-order leaves run left to right, matching the textual slot order.
        leaf_paths = [n.path for n in raw.leaves()]
        slots = {name: (path, width) for (name, width), path in zip(parser.slots.items(), leaf_paths)}
        return cls(text.strip(), raw, slots)

    @property
    def names(self) -> dict[str, str]:
        """Leaf path -> slot name."""
        return {path: name for name, (path, _) in self.slots.items()}

    def slot_range(self, name: str) -> tuple[int, int]:
        return width_range(self._slot(name)[1])

    def _slot(self, name: str) -> tuple[str, int]:
        try:
            return self.slots[name]
        except KeyError:
            raise TemplateError(f"unknown slot {name!r}; template has {sorted(self.slots)}") from None

    def bind(self, bindings: Mapping[str, int]) -> ExpressionNode:
        missing = set(self.slots) - set(bindings)
        extra = set(bindings) - set(self.slots)
        if missing or extra:
            raise TemplateError(f"bindings mismatch: missing {sorted(missing)}, unknown {sorted(extra)}")
        values = {}
        for name, value in bindings.items():
            path, width = self.slots[name]
            lo, hi = width_range(width)
            if not lo <= int(value) <= hi:
                raise TemplateError(f"slot {name!r} needs a {width}-digit value in [{lo}, {hi}], got {value}")
            values[path] = int(value)
        return _fill(self.skeleton, values)

    def token_length(self) -> int:
        return 1 + len(_render(self.skeleton, lambda n: "0" * self.slots[self.names[n.path]][1], top=True))

    def symbolic_labels(self) -> list[str]:
        """Labels of every intermediate value, in the order ``intermediates`` emits them."""
        return [iv.label for iv in intermediates(self.skeleton, self.names)]


def _fill(node: ExpressionNode, values: Mapping[str, int]) -> ExpressionNode:
    if node.is_leaf:
        return leaf(values[node.path], node.path)
    return ExpressionNode(
        "binary",
        operator=node.operator,
        left=_fill(node.left, values),
        right=_fill(node.right, values),
        path=node.path,
    )


def instantiate_template(template: EquationTemplate, bindings: Mapping[str, int]) -> Equation:
    eq = Equation.from_ast(template.bind(bindings), template.names)
    assert len(eq.tokens()) == template.token_length()
    return eq


def invert_for_operand(
    template: EquationTemplate, bindings: Mapping[str, int], target_slot: str, prediction: float
) -> float:
    """Value of ``target_slot`` that makes the expression equal ``prediction``.

    Other slots keep their ``bindings``; the target's own binding (if any) is ignored.
    """
    target_path, _ = template._slot(target_slot)
    coeffs = sign_coefficients(template.skeleton)
    rest = 0
    for name, (path, _) in template.slots.items():
        if name == target_slot:
            continue
        rest += coeffs[path] * int(bindings[name])
    return coeffs[target_path] * (float(prediction) - rest)


def shape_key(node: ExpressionNode) -> str:
    """Rendering with every operand replaced by ``x``; equal keys mean equal tree shape and operators."""
    return _render(node, lambda n: "x", top=True)
