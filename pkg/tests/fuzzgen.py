"""Random RFL program generator for fuzzing."""

import random

MAX_BYTES = 4096

_ATOMS = [
    "0", "1", "-1", "256", "9223372036854775807", '""', '"READ"', '"a\\"b"', "true", "false", "null",
    "idx", "now", "request", "state", "heritage", "request.type", "request.offset", "request.missing",
    "heritage[idx]", "heritage[0].pubkey", "heritage[idx].subject", "state.body", "isLast", "isLast()",
]
_BINOPS = ["||", "&&", "==", "!=", "<", "<=", ">", ">=", "+", "-", "*", "/", "%"]
_CALLS = ["len", "int", "str", "startsWith", "isLast", "nosuch"]
_TOKENS = _ATOMS + _BINOPS + ["(", ")", "[", "]", ".", ",", ";", "?", ":", "!", "var", "if", "else", "=", "x", "{", "}", "//"]


def gen_expr(rng: random.Random, depth: int) -> str:
    if depth <= 0 or rng.random() < 0.25:
        return rng.choice(_ATOMS)
    k = rng.random()
    if k < 0.45:
        return f"{gen_expr(rng, depth - 1)} {rng.choice(_BINOPS)} {gen_expr(rng, depth - 1)}"
    if k < 0.55:
        return f"({gen_expr(rng, depth - 1)})"
    if k < 0.65:
        return f"{rng.choice('!-')}{gen_expr(rng, depth - 1)}"
    if k < 0.75:
        return f"{gen_expr(rng, depth - 1)} ? {gen_expr(rng, depth - 1)} : {gen_expr(rng, depth - 1)}"
    if k < 0.9:
        name = rng.choice(_CALLS)
        n = rng.randint(0, 2)
        return f"{name}({', '.join(gen_expr(rng, depth - 1) for _ in range(n))})"
    return f"{gen_expr(rng, depth - 1)}[{gen_expr(rng, depth - 1)}]"


def gen_program(rng: random.Random) -> str:
    mode = rng.random()
    if mode < 0.5:
        lines = []
        for i in range(rng.randint(0, 4)):
            lines.append(f"var v{i} = {gen_expr(rng, rng.randint(0, 6))};")
        if rng.random() < 0.3:
            lines.append(f"if ({gen_expr(rng, 4)}) {gen_expr(rng, 3)}; else {gen_expr(rng, 3)};")
        else:
            lines.append(gen_expr(rng, rng.randint(0, 8)))
        src = "\n".join(lines)
    elif mode < 0.75:
        src = " ".join(rng.choice(_TOKENS) for _ in range(rng.randint(0, 200)))
    elif mode < 0.9:
        # long flat chains that stress the step budget
        op = rng.choice(["+", "&&", "||", "*"])
        src = op.join(["1"] * rng.randint(100, 1500))
    else:
        src = "".join(chr(rng.randint(0, 0x7F)) for _ in range(rng.randint(0, 400)))
    src = src.encode("utf-8")[:MAX_BYTES].decode("utf-8", "ignore")
    return src
