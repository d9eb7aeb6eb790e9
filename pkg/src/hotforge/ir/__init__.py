from hotforge.ir.cfg import (
    BranchRegion,
    CfgInfo,
    IrreducibleCFG,
    LoopInfo,
    analyze_cfg,
    condition_closure,
    is_complex,
    pointer_sources,
)
from hotforge.ir.model import Instr, IrBlock, IrFunction, IrModule, Str
from hotforge.ir.parser import ParseError, parse_function, parse_module
from hotforge.ir.printer import format_instr, print_function, print_module
from hotforge.ir.validate import ValidationError, Violation, check, validate

__all__ = [
    "BranchRegion",
    "CfgInfo",
    "Instr",
    "IrBlock",
    "IrFunction",
    "IrModule",
    "IrreducibleCFG",
    "LoopInfo",
    "ParseError",
    "Str",
    "ValidationError",
    "Violation",
    "analyze_cfg",
    "check",
    "condition_closure",
    "format_instr",
    "is_complex",
    "parse_function",
    "parse_module",
    "pointer_sources",
    "print_function",
    "print_module",
    "validate",
]
