"""Seeded random AST generator shared by the DSL and acceptance tests."""

import numpy as np

from evosteer.reward_dsl import FUNCTIONS, BinOp, Call, Ident, Index, Neg, Num, Vec

NAMES = ("action", "goal", "goal_left", "ee", "w", "x1")


def random_ast(gen: np.random.Generator, depth: int):
    if depth <= 1 or gen.random() < 0.2:
        if gen.random() < 0.5:
            choice = gen.integers(3)
            value = [float(gen.integers(0, 100)), float(gen.random() * 10), float(gen.random()) * 1e-7][choice]
            return Num(value)
        return Ident(NAMES[gen.integers(len(NAMES))])
    sub = lambda: random_ast(gen, depth - 1)  # noqa: E731
    kind = gen.integers(6)
    if kind == 0:
        return BinOp("+-*/"[gen.integers(4)], sub(), sub())
    if kind == 1:
        return Neg(sub())
    if kind == 2:
        return Vec(tuple(sub() for _ in range(1 + gen.integers(3))))
    if kind == 3:
        return Index(sub(), int(gen.integers(3)))
    name = sorted(FUNCTIONS)[gen.integers(len(FUNCTIONS))]
    lo, hi = FUNCTIONS[name]
    count = lo if hi == lo else lo + int(gen.integers(3))
    return Call(name, tuple(sub() for _ in range(count)))


def ast_depth(node) -> int:
    kids = {Neg: lambda n: (n.operand,), BinOp: lambda n: (n.left, n.right),
            Vec: lambda n: n.items, Call: lambda n: n.args, Index: lambda n: (n.target,)}
    if type(node) not in kids:
        return 1
    return 1 + max(ast_depth(k) for k in kids[type(node)](node))


def corpus(n: int = 200, seed: int = 2024, max_depth: int = 8):
    gen = np.random.default_rng(seed)
    return [random_ast(gen, int(gen.integers(1, max_depth + 1))) for _ in range(n)]
