"""Scalar semantics shared by the interpreter and the expression evaluator.

Integers are 64-bit two's complement; i32 results wrap at 32 bits and are
sign-extended, i1 results are 0 or 1. Pointers are symbolic ``Ptr`` values
(region, offset) so that traces stay comparable across program versions.
"""
from __future__ import annotations

from dataclasses import dataclass

WIDTHS = {"i1": 1, "i32": 32, "i64": 64}
BINOPS = ("add", "sub", "mul", "shl", "shr", "or", "and", "xor")
PREDS = ("eq", "ne", "lt", "le", "gt", "ge", "ult", "ule")
TYPES = ("i32", "i64", "i1", "ptr")


class ScalarError(Exception):
    """Raised for an operation the scalar model cannot perform."""


@dataclass(frozen=True, order=True)
class Ptr:
    region: str
    offset: int = 0

    def __str__(self) -> str:
        return f"{self.region}+{self.offset}"


class _Undef:
    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self) -> str:
        return "undef"


UNDEF = _Undef()


def wrap(value: int, ty: str) -> int:
    if ty == "i1":
        return value & 1
    bits = WIDTHS.get(ty, 64)
    value &= (1 << bits) - 1
    if value >> (bits - 1):
        value -= 1 << bits
    return value


def unsigned(value: int, ty: str) -> int:
    bits = WIDTHS.get(ty, 64)
    return value & ((1 << bits) - 1)


def binop(op: str, ty: str, a, b):
    if isinstance(a, Ptr) or isinstance(b, Ptr):
        return _ptr_binop(op, a, b)
    if a is UNDEF or b is UNDEF:
        raise ScalarError("use of undefined value")
    if op == "add":
        r = a + b
    elif op == "sub":
        r = a - b
    elif op == "mul":
        r = a * b
    elif op == "shl":
        r = a << (b & 63)
    elif op == "shr":
        # logical shift at the operand width
        r = unsigned(a, ty) >> (b & 63)
    elif op == "or":
        r = a | b
    elif op == "and":
        r = a & b
    elif op == "xor":
        r = a ^ b
    else:
        raise ScalarError(f"unknown binop {op}")
    return wrap(r, "i64" if ty == "ptr" else ty)


def _ptr_binop(op: str, a, b):
    if op == "add" and isinstance(a, Ptr) and isinstance(b, int):
        return Ptr(a.region, a.offset + b)
    if op == "add" and isinstance(b, Ptr) and isinstance(a, int):
        return Ptr(b.region, b.offset + a)
    if op == "sub" and isinstance(a, Ptr) and isinstance(b, int):
        return Ptr(a.region, a.offset - b)
    if op == "sub" and isinstance(a, Ptr) and isinstance(b, Ptr) and a.region == b.region:
        return a.offset - b.offset
    raise ScalarError(f"unsupported pointer arithmetic: {op} {a} {b}")


def compare(pred: str, ty: str, a, b) -> int:
    if isinstance(a, Ptr) or isinstance(b, Ptr):
        if pred in ("eq", "ne"):
            return int((a == b) == (pred == "eq"))
        if not (isinstance(a, Ptr) and isinstance(b, Ptr)) or a.region != b.region:
            raise ScalarError(f"ordered comparison of unrelated pointers {a}, {b}")
        a, b = a.offset, b.offset
    elif a is UNDEF or b is UNDEF:
        raise ScalarError("use of undefined value")
    if pred in ("ult", "ule"):
        a, b = unsigned(a, ty), unsigned(b, ty)
        return int(a < b if pred == "ult" else a <= b)
    return int(
        {
            "eq": a == b,
            "ne": a != b,
            "lt": a < b,
            "le": a <= b,
            "gt": a > b,
            "ge": a >= b,
        }[pred]
    )


def render(value) -> str | int:
    """JSON-friendly form of a scalar."""
    if isinstance(value, Ptr):
        return str(value)
    if value is UNDEF:
        return "undef"
    return value
