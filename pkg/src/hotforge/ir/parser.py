"""Tokenizer and recursive-descent parser for the textual IR."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass

from hotforge.ir.model import Instr, IrBlock, IrFunction, IrModule, Str
from hotforge.values import BINOPS, PREDS, TYPES


class ParseError(Exception):
    def __init__(self, message: str, line: int = 0, col: int = 0):
        super().__init__(f"{line}:{col}: {message}" if line else message)
        self.message = message
        self.line = line
        self.col = col


_TOKEN = re.compile(
    r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<comment>\#[^\n]*)
  | (?P<var>%[A-Za-z_][A-Za-z0-9_.]*)
  | (?P<int>-?[0-9]+)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_.]*)
  | (?P<str>"(?:[^"\\\n]|\\.)*")
  | (?P<punct>[(){},:=])
    """,
    re.VERBOSE,
)


@dataclass
class Token:
    kind: str
    text: str
    line: int
    col: int


def tokenize(text: str) -> list[Token]:
    tokens = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        chunk = m.group()
        if kind not in ("ws", "comment"):
            tokens.append(Token(kind, chunk, line, pos - line_start + 1))
        newlines = chunk.count("\n")
        if newlines:
            line += newlines
            line_start = pos + chunk.rindex("\n") + 1
        pos = m.end()
    tokens.append(Token("eof", "", line, pos - line_start + 1))
    return tokens


class _Parser:
    def __init__(self, text: str, strict: bool):
        self.toks = tokenize(text)
        self.pos = 0
        self.strict = strict

    @property
    def tok(self) -> Token:
        return self.toks[self.pos]

    def peek(self, k: int = 1) -> Token:
        return self.toks[min(self.pos + k, len(self.toks) - 1)]

    def error(self, message: str, tok: Token | None = None):
        tok = tok or self.tok
        raise ParseError(message, tok.line, tok.col)

    def next(self) -> Token:
        t = self.tok
        self.pos += 1
        return t

    def expect(self, kind: str, text: str | None = None) -> Token:
        t = self.tok
        if t.kind != kind or (text is not None and t.text != text):
            want = text or kind
            self.error(f"expected {want!r}, found {t.text or 'end of input'!r}")
        return self.next()

    def accept(self, kind: str, text: str | None = None) -> bool:
        if self.tok.kind == kind and (text is None or self.tok.text == text):
            self.pos += 1
            return True
        return False

    # grammar productions

    def module(self, name: str) -> IrModule:
        m = IrModule(name=name)
        seen = set()
        while self.tok.kind != "eof":
            t = self.tok
            if t.kind == "ident" and t.text == "extern":
                self.next()
                ext = self.expect("ident").text
                if ext in seen or ext in m.externs:
                    self.error(f"duplicate function {ext!r}", t)
                m.externs.append(ext)
            elif t.kind == "ident" and t.text == "fn":
                f = self.function()
                if f.name in seen or f.name in m.externs:
                    self.error(f"duplicate function {f.name!r}", t)
                seen.add(f.name)
                m.functions.append(f)
            else:
                self.error(f"expected 'fn' or 'extern', found {t.text!r}")
        return m

    def type_(self) -> str:
        t = self.expect("ident")
        if t.text not in TYPES:
            self.error(f"unknown type {t.text!r}", t)
        return t.text

    def function(self) -> IrFunction:
        self.expect("ident", "fn")
        name = self.expect("ident").text
        self.expect("punct", "(")
        params = []
        if not self.accept("punct", ")"):
            while True:
                pname = self.expect("var").text[1:]
                self.expect("punct", ":")
                params.append((pname, self.type_()))
                if self.accept("punct", ")"):
                    break
                self.expect("punct", ",")
        self.expect("punct", "{")
        f = IrFunction(name, params, [])
        labels = set()
        values = {p for p, _ in params}
        while not self.accept("punct", "}"):
            if self.tok.kind == "eof":
                self.error("unterminated function body")
            start = self.tok
            block = self.block(values)
            if block.label in labels:
                self.error(f"duplicate label {block.label!r}", start)
            labels.add(block.label)
            f.blocks.append(block)
        if not f.blocks:
            self.error(f"function {name!r} has no blocks")
        return f

    def block(self, values: set[str]) -> IrBlock:
        if not (self.tok.kind == "ident" and self.peek().text == ":"):
            self.error(f"expected block label, found {self.tok.text!r}")
        label = self.next().text
        self.next()
        b = IrBlock(label, [])
        while True:
            t = self.tok
            if t.kind == "eof" or (t.kind == "punct" and t.text == "}") or (
                t.kind == "ident" and self.peek().text == ":"
            ):
                self.error(f"unterminated block {label!r}")
            ins = self.instr()
            if ins.dest is not None:
                if self.strict and ins.dest in values:
                    self.error(f"duplicate value name %{ins.dest}", t)
                values.add(ins.dest)
            b.instrs.append(ins)
            if ins.is_terminator:
                return b

    def value(self):
        t = self.tok
        if t.kind == "var":
            self.next()
            return t.text[1:]
        if t.kind == "int":
            self.next()
            return int(t.text)
        self.error(f"expected value, found {t.text!r}")

    def int_(self) -> int:
        return int(self.expect("int").text)

    def call_args(self) -> tuple:
        self.expect("punct", "(")
        args = []
        if self.accept("punct", ")"):
            return ()
        while True:
            if self.tok.kind == "str":
                args.append(Str(json.loads(self.next().text)))
            else:
                args.append(self.value())
            if self.accept("punct", ")"):
                return tuple(args)
            self.expect("punct", ",")

    def instr(self) -> Instr:
        t = self.tok
        if t.kind == "var":
            dest = self.next().text[1:]
            self.expect("punct", "=")
            return self.rhs(dest)
        if t.kind != "ident":
            self.error(f"expected instruction, found {t.text!r}")
        op = self.next().text
        if op == "store":
            v = self.value()
            self.expect("punct", ",")
            return Instr("store", args=(v, self.value()))
        if op == "trampoline":
            return Instr("trampoline", imm=self.int_())
        if op == "call":
            callee = self.expect("ident").text
            return Instr("call", callee=callee, args=self.call_args())
        if op == "ret":
            if self.tok.kind in ("var", "int"):
                return Instr("ret", args=(self.value(),))
            return Instr("ret")
        if op == "br":
            return Instr("br", targets=(self.expect("ident").text,))
        if op == "cond_br":
            c = self.value()
            self.expect("punct", ",")
            a = self.expect("ident").text
            self.expect("punct", ",")
            return Instr("cond_br", args=(c,), targets=(a, self.expect("ident").text))
        self.error(f"unknown instruction {op!r}", t)

    def rhs(self, dest: str) -> Instr:
        t = self.expect("ident")
        op = t.text
        if op == "const":
            ty = self.type_()
            return Instr("const", dest, ty, imm=self.int_())
        if op in BINOPS:
            ty = self.type_()
            a = self.value()
            self.expect("punct", ",")
            return Instr(op, dest, ty, args=(a, self.value()))
        if op == "cmp":
            pred = self.expect("ident")
            if pred.text not in PREDS:
                self.error(f"unknown predicate {pred.text!r}", pred)
            ty = self.type_()
            a = self.value()
            self.expect("punct", ",")
            return Instr("cmp", dest, ty, args=(a, self.value()), pred=pred.text)
        if op == "alloca":
            return Instr("alloca", dest, self.type_())
        if op == "load":
            ty = self.type_()
            return Instr("load", dest, ty, args=(self.value(),))
        if op == "getfield":
            base = self.value()
            self.expect("punct", ",")
            return Instr("getfield", dest, args=(base,), imm=self.int_())
        if op == "call":
            callee = self.expect("ident").text
            return Instr("call", dest, callee=callee, args=self.call_args())
        self.error(f"unknown operation {op!r}", t)


def parse_module(text: str, name: str = "module", strict: bool = True) -> IrModule:
    """Parse IR source into an ``IrModule``.

    With ``strict`` (the default) duplicate value names are rejected here;
    pass ``strict=False`` to defer SSA checking to ``validate``.
    """
    return _Parser(text, strict).module(name)


def parse_function(text: str) -> IrFunction:
    m = parse_module(text)
    if len(m.functions) != 1:
        raise ParseError(f"expected exactly one function, found {len(m.functions)}")
    return m.functions[0]
