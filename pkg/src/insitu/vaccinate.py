"""Rewrites an entry function into a tree of crash-isolated cells.

Decomposition: every loop body and every extractable nested ``def`` body is
lifted, bottom-up, into its own top-level function (a cell). The loop keeps
running in the parent cell; its body becomes one guarded call into the child
cell. A crash therefore surfaces at the innermost enclosing barrier with at
most one unfinished loop iteration in flight.

Reconstruction: variables that belong to the entry scope (or to an extracted
``def`` scope) are redirected through shared dictionaries, so state survives
the loss of any individual stack frame. ``break``/``continue``/``return``
inside a lifted body turn into indicator returns, and each call site reacts
to the indicator it receives.

Generators, async functions, lambdas, and class bodies are left intact:
their code still reads and writes redirected outer variables, but their own
locals stay ordinary locals.
"""

from __future__ import annotations

import ast
import copy
import inspect
import itertools
import re
import textwrap
import threading
from dataclasses import dataclass, field
from typing import Any, Callable

from . import context
from .context import CellCode, RESERVED_PREFIX
from .errors import ParseError, ShadowingError, VaccinationError
from .sourcemodel import (
    ROOT,
    SourceFunction,
    StatementPath,
    blocks_of,
    order_index,
    parse_function,
    walk,
)

_prog_counter = itertools.count(1)


# ------------------------------------------------------------------ names


class NameAllocator:
    """Picks runtime identifiers that cannot collide with user names.

    All generated names are dunder-shaped (``__isr_...__``) so class-body
    name mangling leaves them alone. If the user somehow uses one, the next
    free variant is chosen instead of renaming user code.
    """

    def __init__(self, used: set[str]):
        self.used = set(used)
        self._tmp_counter = itertools.count(1)
        self._frames: dict[int, str] = {}
        self.handle = self._pick("__isr__")
        self.act = self._pick("__isr_act__")
        self.ns = self._pick("__isr_ns__")
        self.ind = self._pick("__isr_ind__")
        self.exc = self._pick("__isr_exc__")
        self.nxt = self._pick("__isr_nxt__")

    def _pick(self, base: str) -> str:
        if base not in self.used:
            self.used.add(base)
            return base
        stem = base[:-2]  # drop trailing dunder
        for i in itertools.count(2):
            cand = f"{stem}{i}__"
            if cand not in self.used:
                self.used.add(cand)
                return cand
        raise ShadowingError(f"cannot allocate a variant of {base}")

    def frame(self, index: int) -> str:
        if index == 0:
            return self.ns
        name = self._frames.get(index)
        if name is None:
            name = self._pick(f"__isr_fr{index}__")
            self._frames[index] = name
        return name

    def tmp(self) -> str:
        return self._pick(f"__isr_tmp{next(self._tmp_counter)}__")


def _used_names(node: ast.AST) -> set[str]:
    used = set()
    for n in ast.walk(node):
        if isinstance(n, ast.Name):
            used.add(n.id)
        elif isinstance(n, ast.arg):
            used.add(n.arg)
        elif isinstance(n, (ast.FunctionDef, ast.AsyncFunctionDef, ast.ClassDef)):
            used.add(n.name)
        elif isinstance(n, ast.alias):
            used.add(n.asname or n.name.split(".")[0])
        elif isinstance(n, ast.ExceptHandler) and n.name:
            used.add(n.name)
        elif isinstance(n, ast.Attribute):
            used.add(n.attr)
    return used


# ------------------------------------------------------------ scope model


@dataclass
class Scope:
    node: Any
    parent: "Scope | None"
    kind: str                       # function | class
    bound: set[str]
    globals_decl: set[str]
    nonlocals_decl: set[str]
    redirected: bool = False
    frame_index: int | None = None


class _EphemeralScope:
    """Lambda or comprehension scope, built on the fly during rewriting."""

    kind = "function"
    redirected = False
    frame_index = None

    def __init__(self, bound: set[str]):
        self.bound = bound
        self.globals_decl: set[str] = set()
        self.nonlocals_decl: set[str] = set()


class _BindScan(ast.NodeVisitor):
    """Collects names bound directly in one function or class scope."""

    def __init__(self):
        self.bound: set[str] = set()
        self.globals_decl: set[str] = set()
        self.nonlocals_decl: set[str] = set()

    def _target(self, node):
        if isinstance(node, ast.Name):
            self.bound.add(node.id)
        elif isinstance(node, (ast.Tuple, ast.List)):
            for elt in node.elts:
                self._target(elt)
        elif isinstance(node, ast.Starred):
            self._target(node.value)
        else:
            self.visit(node)  # Attribute/Subscript: no binding, scan inside

    def visit_Assign(self, node):
        for t in node.targets:
            self._target(t)
        self.visit(node.value)

    def visit_AnnAssign(self, node):
        self._target(node.target)
        if node.value:
            self.visit(node.value)

    def visit_AugAssign(self, node):
        self._target(node.target)
        self.visit(node.value)

    def visit_For(self, node):
        self._target(node.target)
        self.visit(node.iter)
        for s in node.body + node.orelse:
            self.visit(s)

    visit_AsyncFor = visit_For

    def visit_With(self, node):
        for item in node.items:
            self.visit(item.context_expr)
            if item.optional_vars:
                self._target(item.optional_vars)
        for s in node.body:
            self.visit(s)

    visit_AsyncWith = visit_With

    def visit_Import(self, node):
        for a in node.names:
            self.bound.add(a.asname or a.name.split(".")[0])

    def visit_ImportFrom(self, node):
        for a in node.names:
            self.bound.add(a.asname or a.name)

    def visit_Global(self, node):
        self.globals_decl.update(node.names)

    def visit_Nonlocal(self, node):
        self.nonlocals_decl.update(node.names)

    def visit_ExceptHandler(self, node):
        if node.name:
            self.bound.add(node.name)
        if node.type:
            self.visit(node.type)
        for s in node.body:
            self.visit(s)

    def visit_Delete(self, node):
        for t in node.targets:
            if isinstance(t, ast.Name):
                self.bound.add(t.id)
            else:
                self.visit(t)

    def visit_NamedExpr(self, node):
        self.bound.add(node.target.id)
        self.visit(node.value)

    def visit_MatchAs(self, node):
        if node.name:
            self.bound.add(node.name)
        if node.pattern:
            self.visit(node.pattern)

    def visit_MatchStar(self, node):
        if node.name:
            self.bound.add(node.name)

    def visit_MatchMapping(self, node):
        if node.rest:
            self.bound.add(node.rest)
        self.generic_visit(node)

    def visit_FunctionDef(self, node):
        self.bound.add(node.name)
        self._signature_only(node)

    visit_AsyncFunctionDef = visit_FunctionDef

    def visit_ClassDef(self, node):
        self.bound.add(node.name)
        for d in node.decorator_list + node.bases:
            self.visit(d)
        for kw in node.keywords:
            self.visit(kw.value)

    def visit_Lambda(self, node):
        for d in node.args.defaults + [d for d in node.args.kw_defaults if d]:
            self.visit(d)
        # the body is its own scope; walruses inside stay there

    def _signature_only(self, node):
        for d in node.decorator_list:
            self.visit(d)
        a = node.args
        for d in a.defaults + [d for d in a.kw_defaults if d]:
            self.visit(d)
        for arg in a.posonlyargs + a.args + a.kwonlyargs:
            if arg.annotation:
                self.visit(arg.annotation)
        if node.returns:
            self.visit(node.returns)


def _params_of(args: ast.arguments) -> list[str]:
    names = [a.arg for a in args.posonlyargs + args.args]
    if args.vararg:
        names.append(args.vararg.arg)
    names += [a.arg for a in args.kwonlyargs]
    if args.kwarg:
        names.append(args.kwarg.arg)
    return names


def analyze_scopes(entry: ast.FunctionDef) -> dict[int, Scope]:
    """Build Scope records for the entry and every nested def/class."""
    scopes: dict[int, Scope] = {}

    def scan(node, parent: Scope | None, kind: str) -> Scope:
        s = _BindScan()
        body = node.body if isinstance(node.body, list) else [node.body]
        for stmt in body:
            s.visit(stmt)
        bound = set(s.bound)
        if isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef)):
            bound.update(_params_of(node.args))
        bound -= s.globals_decl
        scope = Scope(node, parent, kind, bound, s.globals_decl, s.nonlocals_decl)
        scopes[id(node)] = scope
        for stmt in body:
            _scan_children(stmt, scope)
        return scope

    def _scan_children(stmt, scope):
        # manual walk that stops at scope boundaries
        stack = [stmt]
        while stack:
            n = stack.pop()
            if isinstance(n, (ast.FunctionDef, ast.AsyncFunctionDef)):
                scan(n, scope, "function")
                continue
            if isinstance(n, ast.ClassDef):
                scan(n, scope, "class")
                continue
            if isinstance(n, ast.Lambda):
                continue
            stack.extend(ast.iter_child_nodes(n))

    scan(entry, None, "function")
    scopes[id(entry)].redirected = True
    scopes[id(entry)].frame_index = 0
    return scopes


def _is_barrier_loop(stmt: ast.stmt) -> bool:
    """True for the retry construct barriers emit (``while True: try ...``).

    Recognized structurally so that re-decomposing already-transformed
    source leaves barriers alone instead of lifting them as user loops.
    """
    if not (isinstance(stmt, ast.While) and isinstance(stmt.test, ast.Constant)
            and stmt.test.value is True and len(stmt.body) == 1
            and isinstance(stmt.body[0], ast.Try)):
        return False
    for handler in stmt.body[0].handlers:
        for s in handler.body:
            if (isinstance(s, ast.Assign) and isinstance(s.value, ast.Call)
                    and isinstance(s.value.func, ast.Attribute)
                    and s.value.func.attr == "recover"):
                return True
    return False


def _is_generator(node: ast.FunctionDef) -> bool:
    stack = list(node.body)
    while stack:
        n = stack.pop()
        if isinstance(n, (ast.Yield, ast.YieldFrom)):
            return True
        if isinstance(n, (ast.FunctionDef, ast.AsyncFunctionDef, ast.Lambda)):
            continue
        stack.extend(ast.iter_child_nodes(n))
    return False


# --------------------------------------------------------------- templates


def _mark(stmts: list[ast.stmt], origin: StatementPath | None) -> list[ast.stmt]:
    for s in stmts:
        for n in ast.walk(s):
            n._isr_generated = True
        if origin is not None:
            s._isr_origin = origin
    return stmts


def _tpl(src: str, origin: StatementPath | None) -> list[ast.stmt]:
    return _mark(ast.parse(textwrap.dedent(src)).body, origin)


@dataclass
class _Plan:
    node: Any                        # the For/While/FunctionDef being lifted
    path: StatementPath              # absolute path of that statement
    block_kind: str                  # loop-body | body
    scope_node: Any                  # def whose scope the lifted code runs in
    depth: int                       # scope depth of the lifted code
    cell_id: str = ""
    body: list = field(default_factory=list)
    orig_body: list = field(default_factory=list)


class Decomposer:
    """Finds every liftable block, then wires in barriers bottom-up."""

    def __init__(self, entry: ast.FunctionDef, alloc: NameAllocator,
                 scopes: dict[int, Scope], decompose: bool = True):
        self.entry = entry
        self.alloc = alloc
        self.scopes = scopes
        self.decompose = decompose
        self.plans: list[_Plan] = []

    def run(self, id_for: Callable[["_Plan"], str] | None = None) -> list[_Plan]:
        self._discover_block(self.entry.body, ROOT, "body", self.entry, 0)
        root = _Plan(self.entry, ROOT, "body", self.entry, 0)
        root.orig_body = copy.deepcopy(self.entry.body)
        self.plans.append(root)
        seq = itertools.count(1)
        for plan in self.plans:
            if plan.node is self.entry:
                plan.cell_id = "c0"
            elif id_for is not None:
                plan.cell_id = id_for(plan)
            else:
                plan.cell_id = f"c{next(seq)}"
        for plan in self.plans:
            if plan.node is self.entry:
                plan.body = self.entry.body
            else:
                self._lift(plan)
        return self.plans

    def _discover_block(self, stmts, base, kind, scope_node, depth):
        for i, stmt in enumerate(stmts):
            self._discover_stmt(stmt, base.child(kind, i), scope_node, depth)

    def _discover_stmt(self, stmt, path, scope_node, depth):
        if isinstance(stmt, ast.ClassDef):
            return  # class bodies run once; keep them atomic
        if isinstance(stmt, ast.AsyncFunctionDef):
            return
        if _is_barrier_loop(stmt):
            return  # our own retry construct, not a user loop
        if isinstance(stmt, ast.FunctionDef):
            if _is_generator(stmt) or not self.decompose:
                return
            if any(_is_barrier_loop(s) for s in stmt.body):
                return  # shell left by an earlier pass
            self._discover_block(stmt.body, path, "body", stmt, depth + 1)
            self.plans.append(_Plan(stmt, path, "body", stmt, depth + 1,
                                    orig_body=copy.deepcopy(stmt.body)))
            return
        if isinstance(stmt, (ast.For, ast.While)) and self.decompose:
            if any(_is_barrier_loop(s) for s in stmt.body):
                # already instrumented; only the else block can hold user code
                self._discover_block(stmt.orelse, path, "branch-else",
                                     scope_node, depth)
                return
            orig = copy.deepcopy(stmt.body)
            self._discover_block(stmt.body, path, "loop-body", scope_node, depth)
            self.plans.append(_Plan(stmt, path, "loop-body", scope_node, depth,
                                    orig_body=orig))
            self._discover_block(stmt.orelse, path, "branch-else", scope_node, depth)
            return
        if isinstance(stmt, ast.Try):
            self._discover_block(stmt.body, path, "body", scope_node, depth)
            for j, h in enumerate(stmt.handlers):
                self._discover_block(h.body, path.child("handler", j), "body",
                                     scope_node, depth)
            self._discover_block(stmt.orelse, path, "branch-else", scope_node, depth)
            self._discover_block(stmt.finalbody, path, "final", scope_node, depth)
            return
        for bkind, _f, sub in blocks_of(stmt):
            self._discover_block(sub, path, bkind, scope_node, depth)

    def _call_args(self, depth: int) -> str:
        parts = [self.alloc.act, self.alloc.ns]
        parts += [self.alloc.frame(k) for k in range(1, depth + 1)]
        return ", ".join(parts)

    def barrier(self, cell_id: str, depth: int, origin: StatementPath,
                in_loop: bool) -> list[ast.stmt]:
        a = self.alloc
        args = self._call_args(depth)
        # recover() hands back a continuation; calling it on the next pass
        # keeps retries out of the except clause, so the same barrier catches
        # a repeat crash instead of stacking frames
        lines = [
            f"{a.nxt} = {a.act}.cells[{cell_id!r}]",
            f"while True:",
            f"    try:",
            f"        {a.ind} = {a.nxt}({args})",
            f"        break",
            f"    except Exception as {a.exc}:",
            f"        {a.nxt} = {a.act}.recover({cell_id!r}, ({args},), {a.exc})",
        ]
        if in_loop:
            lines += [
                f"if {a.ind} is not None:",
                f"    if {a.ind} is {a.handle}.BREAK:",
                f"        break",
                f"    elif {a.ind} is {a.handle}.CONTINUE:",
                f"        continue",
                f"    else:",
                f"        return {a.ind}",
            ]
        else:
            lines += [
                f"if type({a.ind}) is {a.handle}.Return:",
                f"    return {a.ind}.value",
            ]
        return _tpl("\n".join(lines), origin)

    def _lift(self, plan: _Plan) -> None:
        node = plan.node
        if isinstance(node, (ast.For, ast.While)):
            plan.body = node.body
            node.body = self.barrier(plan.cell_id, plan.depth, plan.path, in_loop=True)
            return
        # extracted def: body moves to the cell; a shell with the original
        # signature builds the frame dict and calls through the barrier
        plan.body = node.body
        frame_name = self.alloc.frame(plan.depth)
        params = _params_of(node.args)
        pairs = ", ".join(f"{p!r}: {p}" for p in params)
        build = _tpl(f"{frame_name} = {{{pairs}}}", plan.path)
        call = self.barrier(plan.cell_id, plan.depth, plan.path, in_loop=False)
        node.body = build + call
        node._isr_shell = True
        node._isr_generated = True


# ---------------------------------------------------------------- rewriter


class CellRewriter(ast.NodeTransformer):
    """Variable redirection plus cross-cell control flow, for one cell."""

    def __init__(self, alloc: NameAllocator, scopes: dict[int, Scope],
                 scope_node, program_id: str):
        self.alloc = alloc
        self.scopes = scopes
        self.program_id = program_id
        self.stack: list = []
        cur = scopes[id(scope_node)]
        chain = []
        while cur is not None:
            chain.append(cur)
            cur = cur.parent
        self.stack = list(reversed(chain))
        self.loop_depth = 0
        self.kept_depth = 0

    # -- scope helpers

    def _owner(self, name: str):
        for i in range(len(self.stack) - 1, -1, -1):
            sv = self.stack[i]
            current = i == len(self.stack) - 1
            if sv.kind == "class" and not current:
                continue
            if name in sv.globals_decl:
                return None
            if name in sv.nonlocals_decl:
                for j in range(i - 1, -1, -1):
                    up = self.stack[j]
                    if up.kind != "class" and name in up.bound:
                        return up
                return None
            if name in sv.bound:
                return sv
        return None

    def _frame_for(self, scope) -> ast.expr:
        return ast.Name(id=self.alloc.frame(scope.frame_index), ctx=ast.Load())

    def _redirect(self, name: str, ctx) -> ast.expr:
        owner = self._owner(name)
        if owner is None or not owner.redirected:
            return ast.Name(id=name, ctx=ctx)
        return ast.Subscript(
            value=self._frame_for(owner),
            slice=ast.Constant(value=name),
            ctx=ctx,
        )

    def _export(self, name: str, origin) -> list[ast.stmt]:
        owner = self._owner(name)
        if owner is None or not owner.redirected:
            return []
        frame = self.alloc.frame(owner.frame_index)
        return _tpl(f"{frame}[{name!r}] = {name}", origin)

    # -- dispatch guard

    def visit(self, node):
        if getattr(node, "_isr_shell", False):
            return self._visit_shell(node)
        if getattr(node, "_isr_generated", False):
            return node
        return super().visit(node)

    # -- names and expressions

    def visit_Name(self, node):
        if node.id.startswith(RESERVED_PREFIX):
            raise ShadowingError(f"user identifier {node.id!r} uses the reserved prefix")
        return self._redirect(node.id, node.ctx)

    def visit_NamedExpr(self, node):
        value = self.visit(node.value)
        owner = self._owner(node.target.id)
        if owner is not None and owner.redirected:
            return ast.Call(
                func=ast.Attribute(
                    value=ast.Name(id=self.alloc.handle, ctx=ast.Load()),
                    attr="walrus", ctx=ast.Load()),
                args=[self._frame_for(owner), ast.Constant(node.target.id), value],
                keywords=[],
            )
        return ast.NamedExpr(target=node.target, value=value)

    def _visit_comp(self, node):
        gens = node.generators
        gens[0].iter = self.visit(gens[0].iter)
        bound = set()
        scan = _BindScan()
        for g in gens:
            scan._target(g.target)
        bound = set(scan.bound)
        self.stack.append(_EphemeralScope(bound))
        try:
            for i, g in enumerate(gens):
                if i > 0:
                    g.iter = self.visit(g.iter)
                g.ifs = [self.visit(e) for e in g.ifs]
            if isinstance(node, ast.DictComp):
                node.key = self.visit(node.key)
                node.value = self.visit(node.value)
            else:
                node.elt = self.visit(node.elt)
        finally:
            self.stack.pop()
        return node

    visit_ListComp = visit_SetComp = visit_GeneratorExp = visit_DictComp = _visit_comp

    def visit_Lambda(self, node):
        a = node.args
        a.defaults = [self.visit(d) for d in a.defaults]
        a.kw_defaults = [self.visit(d) if d else None for d in a.kw_defaults]
        bound = set(_params_of(a))
        scan = _BindScan()
        scan.visit(node.body)
        bound |= scan.bound
        self.stack.append(_EphemeralScope(bound))
        self.kept_depth += 1
        try:
            node.body = self.visit(node.body)
        finally:
            self.kept_depth -= 1
            self.stack.pop()
        return node

    # -- statements

    def _visit_signature(self, node):
        a = node.args
        a.defaults = [self.visit(d) for d in a.defaults]
        a.kw_defaults = [self.visit(d) if d else None for d in a.kw_defaults]
        for arg in a.posonlyargs + a.args + a.kwonlyargs:
            if arg.annotation:
                arg.annotation = self.visit(arg.annotation)
        if node.returns:
            node.returns = self.visit(node.returns)
        node.decorator_list = [self.visit(d) for d in node.decorator_list]

    def _visit_shell(self, node):
        self._visit_signature(node)
        origin = getattr(node, "_isr_origin", None)
        return [node] + self._export(node.name, origin)

    def visit_FunctionDef(self, node):
        # a kept def: generator or async; runs as a plain closure
        self._visit_signature(node)
        scope = self.scopes[id(node)]
        self.stack.append(scope)
        self.kept_depth += 1
        old_loop, self.loop_depth = self.loop_depth, 0
        try:
            node.body = self._flat(node.body)
        finally:
            self.loop_depth = old_loop
            self.kept_depth -= 1
            self.stack.pop()
        origin = getattr(node, "_isr_origin", None)
        return [node] + self._export(node.name, origin)

    visit_AsyncFunctionDef = visit_FunctionDef

    def visit_ClassDef(self, node):
        node.decorator_list = [self.visit(d) for d in node.decorator_list]
        node.bases = [self.visit(b) for b in node.bases]
        for kw in node.keywords:
            kw.value = self.visit(kw.value)
        scope = self.scopes[id(node)]
        self.stack.append(scope)
        self.kept_depth += 1
        try:
            node.body = self._flat(node.body)
        finally:
            self.kept_depth -= 1
            self.stack.pop()
        origin = getattr(node, "_isr_origin", None)
        return [node] + self._export(node.name, origin)

    def _flat(self, stmts) -> list:
        out = []
        for s in stmts:
            origin = getattr(s, "_isr_origin", None)
            r = self.visit(s)
            results = [] if r is None else (r if isinstance(r, list) else [r])
            for x in results:
                if origin is not None and getattr(x, "_isr_origin", None) is None:
                    x._isr_origin = origin
            out.extend(results)
        return out or [ast.Pass()]

    def visit_If(self, node):
        node.test = self.visit(node.test)
        node.body = self._flat(node.body)
        node.orelse = self._flat(node.orelse) if node.orelse else []
        return node

    def visit_With(self, node):
        for item in node.items:
            item.context_expr = self.visit(item.context_expr)
            if item.optional_vars:
                item.optional_vars = self.visit(item.optional_vars)
        node.body = self._flat(node.body)
        return node

    visit_AsyncWith = visit_With

    def visit_Return(self, node):
        value = self.visit(node.value) if node.value else None
        if self.kept_depth > 0:
            return ast.Return(value=value)
        wrapped = ast.Call(
            func=ast.Attribute(value=ast.Name(id=self.alloc.handle, ctx=ast.Load()),
                               attr="Return", ctx=ast.Load()),
            args=[value if value is not None else ast.Constant(None)],
            keywords=[],
        )
        return ast.Return(value=wrapped)

    def _signal(self, which: str) -> ast.stmt:
        return ast.Return(value=ast.Attribute(
            value=ast.Name(id=self.alloc.handle, ctx=ast.Load()),
            attr=which, ctx=ast.Load()))

    def visit_Break(self, node):
        if self.kept_depth > 0 or self.loop_depth > 0:
            return node
        return self._signal("BREAK")

    def visit_Continue(self, node):
        if self.kept_depth > 0 or self.loop_depth > 0:
            return node
        return self._signal("CONTINUE")

    def visit_For(self, node):
        node.target = self.visit(node.target)
        node.iter = self.visit(node.iter)
        self.loop_depth += 1
        try:
            node.body = self._flat(node.body)
        finally:
            self.loop_depth -= 1
        node.orelse = self._flat(node.orelse) if node.orelse else []
        return node

    visit_AsyncFor = visit_For

    def visit_While(self, node):
        node.test = self.visit(node.test)
        self.loop_depth += 1
        try:
            node.body = self._flat(node.body)
        finally:
            self.loop_depth -= 1
        node.orelse = self._flat(node.orelse) if node.orelse else []
        return node

    def visit_Try(self, node):
        node.body = self._flat(node.body)
        node.orelse = self._flat(node.orelse) if node.orelse else []
        node.finalbody = self._flat(node.finalbody) if node.finalbody else []
        for h in node.handlers:
            if h.type is not None:
                h.type = self.visit(h.type)
            if h.name:
                owner = self._owner(h.name)
            else:
                owner = None
            if h.name and owner is not None and owner.redirected:
                orig_name = h.name
                rep = h.body[0]._isr_origin if hasattr(h.body[0], "_isr_origin") else None
                frame = self.alloc.frame(owner.frame_index)
                tmp = self.alloc.tmp()
                h.name = tmp
                inner = self._flat(h.body)
                binding = _tpl(f"{frame}[{orig_name!r}] = {tmp}", rep)
                drop = ast.Try(
                    body=inner,
                    handlers=[],
                    orelse=[],
                    finalbody=_tpl(f"{frame}.pop({orig_name!r}, None)", rep),
                )
                if rep is not None:
                    drop._isr_origin = rep
                h.body = binding + [drop]
            else:
                h.body = self._flat(h.body)
        return node

    def visit_AnnAssign(self, node):
        # local annotations have no runtime effect inside a function
        if node.value is None:
            return None
        return ast.Assign(targets=[self.visit(node.target)],
                          value=self.visit(node.value))

    def visit_Import(self, node):
        origin = getattr(node, "_isr_origin", None)
        out = [node]
        for a in node.names:
            out += self._export(a.asname or a.name.split(".")[0], origin)
        return out

    def visit_ImportFrom(self, node):
        origin = getattr(node, "_isr_origin", None)
        out = [node]
        for a in node.names:
            out += self._export(a.asname or a.name, origin)
        return out

    def visit_Global(self, node):
        return node

    def visit_Nonlocal(self, node):
        kept = []
        for name in node.names:
            owner = self._owner(name)
            if owner is None or not owner.redirected:
                kept.append(name)
        if not kept:
            return None
        node.names = kept
        return node

    def visit_Match(self, node):
        if self.kept_depth == 0:
            raise VaccinationError("match statements cannot be rewritten; "
                                   "wrap them in a helper function")
        node.subject = self.visit(node.subject)
        for case in node.cases:
            if case.guard:
                case.guard = self.visit(case.guard)
            case.body = self._flat(case.body)
            # patterns bind plain names inside the kept scope; value
            # patterns referencing redirected outer names cannot be fixed up
            for sub in ast.walk(case.pattern):
                if isinstance(sub, ast.MatchValue) and isinstance(sub.value, ast.Name):
                    owner = self._owner(sub.value.id)
                    if owner is not None and owner.redirected:
                        raise VaccinationError(
                            "match pattern reads a rewritten outer variable")
        return node

    def visit_Yield(self, node):
        if self.kept_depth == 0:
            raise VaccinationError("yield cannot appear in rewritten code")
        return self.generic_visit(node)

    visit_YieldFrom = visit_Yield


# ----------------------------------------------------------------- program


@dataclass
class RecoveryOptions:
    """How a crashed activation obtains recovery commands."""

    allowed_commands: tuple = ("pass", "action", "surgery")
    max_retries: int = 8
    script: Any = None            # path or FixProcedure replayed automatically
    source: Any = None            # explicit CommandSource instance
    interactive: str = "auto"     # auto | never | always
    on_unrecoverable: str = "raise"


@dataclass
class CellTree:
    root: str
    nodes: dict[str, CellCode]

    def children(self, cell_id: str) -> list[str]:
        return self.nodes[cell_id].children

    def parent(self, cell_id: str) -> str | None:
        return self.nodes[cell_id].parent

    def preorder(self):
        def rec(cid):
            yield self.nodes[cid]
            for c in self.nodes[cid].children:
                yield from rec(c)

        yield from rec(self.root)

    def shape(self):
        """Structure-only signature, for isomorphism checks."""

        def rec(cid):
            node = self.nodes[cid]
            return (node.block_kind, tuple(sorted(rec(c) for c in node.children)))

        return rec(self.root)

    def __len__(self):
        return len(self.nodes)


class Program:
    """One vaccinated entry function and everything compiled for it."""

    def __init__(self, pid: str, source: SourceFunction, globals_ns: dict,
                 options: RecoveryOptions, decomposed: bool):
        self.id = pid
        self.source = source
        self.globals_ns = globals_ns
        self.options = options
        self.decomposed = decomposed
        self.cells: dict[str, Callable] = {}
        self.meta: dict[str, CellCode] = {}
        self.tree: CellTree | None = None
        self.entry: Callable | None = None
        self.entry_source = ""
        self.activations: dict[str, Any] = {}
        self.generation = 0
        self.history: list[SourceFunction] = [source]
        self.resume_cache: dict = {}
        self.lock = threading.RLock()
        self.cell_seq = itertools.count(1)
        self.alloc: NameAllocator | None = None

    @property
    def name(self) -> str:
        return self.source.name

    def cell_for_abs(self, abs_path: StatementPath) -> CellCode:
        """Deepest cell whose own body region contains ``abs_path``."""
        best = self.meta[self.tree.root]
        for cell in self.meta.values():
            o = cell.origin.steps
            if len(o) >= len(abs_path.steps):
                continue
            if abs_path.steps[:len(o)] != o:
                continue
            if cell.cell_id != self.tree.root and abs_path.steps[len(o)][0] != cell.block_kind:
                continue
            if len(o) >= len(best.origin.steps) or best.cell_id == self.tree.root:
                if len(o) > len(best.origin.steps) or best.cell_id == self.tree.root:
                    best = cell
        return best

    def rendered_source(self) -> str:
        parts = [f"# entry: {self.name}", self.entry_source]
        for cell in self.tree.preorder():
            parts.append(f"\n# cell {cell.cell_id} @ {cell.origin}")
            parts.append(cell.source)
        return "\n".join(parts)

    def __repr__(self):
        return f"<program {self.id} {self.name!r} cells={len(self.cells)}>"


def _cell_kind(plan: _Plan) -> str:
    if isinstance(plan.node, ast.FunctionDef) and plan.path.steps:
        return "funcdef-wrapper"
    stack = list(plan.body)
    while stack:
        n = stack.pop()
        if isinstance(n, (ast.For, ast.While)):
            return "loop-wrapper"
        if isinstance(n, (ast.FunctionDef, ast.AsyncFunctionDef, ast.Lambda, ast.ClassDef)):
            continue
        stack.extend(ast.iter_child_nodes(n))
    return "plain"


def _link_cells(meta: dict[str, CellCode], root_id: str) -> None:
    ordered = sorted(meta.values(), key=lambda c: len(c.origin.steps), reverse=True)
    for cell in meta.values():
        cell.children = []
        cell.parent = None
    for cell in meta.values():
        if cell.cell_id == root_id:
            continue
        parent = None
        for cand in ordered:
            if cand.cell_id == cell.cell_id:
                continue
            o = cand.origin.steps
            if len(o) >= len(cell.origin.steps):
                continue
            if cell.origin.steps[:len(o)] != o:
                continue
            if cand.cell_id != root_id and cell.origin.steps[len(o)][0] != cand.block_kind:
                continue
            parent = cand
            break
        parent = parent or meta[root_id]
        cell.parent = parent.cell_id
        parent.children.append(cell.cell_id)
    for cell in meta.values():
        cell.children.sort(key=lambda cid: meta[cid].origin.steps)


def build_generation(program: Program, sf: SourceFunction,
                     id_for=None) -> tuple[NameAllocator, dict, dict, CellTree]:
    """Compile one source generation into cells; does not install anything."""
    entry_copy = copy.deepcopy(sf.node)
    for path, stmt in walk(entry_copy):
        stmt._isr_origin = path
    used = _used_names(entry_copy)
    for bad in sorted(used):
        if bad.startswith(RESERVED_PREFIX):
            raise ShadowingError(
                f"identifier {bad!r} collides with the reserved prefix {RESERVED_PREFIX!r}")
    _reject_entry_yield(entry_copy)
    alloc = NameAllocator(used)
    scopes = analyze_scopes(entry_copy)
    dec = Decomposer(entry_copy, alloc, scopes, decompose=program.decomposed)
    plans = dec.run(id_for)
    for plan in plans:
        if isinstance(plan.node, ast.FunctionDef) and plan.node is not entry_copy:
            sc = scopes[id(plan.node)]
            sc.redirected = True
            sc.frame_index = plan.depth
    program.globals_ns[alloc.handle] = context
    cells: dict[str, Callable] = {}
    meta: dict[str, CellCode] = {}
    for plan in plans:
        rewriter = CellRewriter(alloc, scopes, plan.scope_node, program.id)
        body = rewriter._flat(plan.body)
        params = [alloc.act, alloc.ns] + [alloc.frame(k) for k in range(1, plan.depth + 1)]
        fn_def = ast.FunctionDef(
            name=f"__isr_cell_{plan.cell_id}__",
            args=ast.arguments(posonlyargs=[], args=[ast.arg(arg=p) for p in params],
                               vararg=None, kwonlyargs=[], kw_defaults=[],
                               defaults=[], kwarg=None),
            body=body,
            decorator_list=[],
            returns=None,
        )
        filename = f"<isr:{program.id}:{plan.cell_id}:g{program.generation}>"
        fn, text, entries = context.materialize(
            fn_def, filename, program.globals_ns, program, plan.cell_id, "cell")
        cells[plan.cell_id] = fn
        chain: dict[int, frozenset] = {}
        sc = scopes[id(plan.scope_node)]
        while sc is not None:
            if sc.redirected:
                chain[sc.frame_index] = frozenset(sc.bound)
            sc = sc.parent
        meta[plan.cell_id] = CellCode(
            cell_id=plan.cell_id,
            origin=plan.path,
            block_kind=plan.block_kind,
            kind=_cell_kind(plan),
            params=tuple(params),
            scope_depth=plan.depth,
            frame_scopes=tuple(chain.get(k, frozenset())
                               for k in range(plan.depth + 1)),
            gen_def=fn_def,
            orig_body=plan.orig_body,
            filename=filename,
            source=text,
            line_entries=entries,
        )
    root_id = next(p.cell_id for p in plans if p.node is entry_copy)
    _link_cells(meta, root_id)
    return alloc, cells, meta, CellTree(root_id, meta)


def _reject_entry_yield(entry: ast.FunctionDef) -> None:
    stack = list(entry.body)
    while stack:
        n = stack.pop()
        if isinstance(n, (ast.Yield, ast.YieldFrom)):
            raise VaccinationError("the entry function cannot be a generator")
        if isinstance(n, (ast.FunctionDef, ast.AsyncFunctionDef, ast.Lambda)):
            continue
        stack.extend(ast.iter_child_nodes(n))


def _build_entry(program: Program, sf: SourceFunction, alloc: NameAllocator,
                 root_id: str) -> Callable:
    a = alloc
    params = _params_of(sf.node.args)
    arg_dict = ", ".join(f"{p!r}: {p}" for p in params)
    body_src = textwrap.dedent(f"""
        {a.act} = {a.handle}.register({a.handle}.get_program({program.id!r}), {{{arg_dict}}})
        {a.ns} = {a.act}.table
        try:
            {a.nxt} = {a.act}.cells[{root_id!r}]
            while True:
                try:
                    {a.ind} = {a.nxt}({a.act}, {a.ns})
                    break
                except Exception as {a.exc}:
                    {a.nxt} = {a.act}.recover({root_id!r}, ({a.act}, {a.ns}), {a.exc})
            if type({a.ind}) is {a.handle}.Return:
                return {a.ind}.value
            return None
        finally:
            {a.act}.finish()
    """)
    body = _tpl(body_src, None)
    fn_def = ast.FunctionDef(
        name=sf.name,
        args=copy.deepcopy(sf.node.args),
        body=body,
        decorator_list=[],
        returns=None,
    )
    filename = f"<isr:{program.id}:entry>"
    fn, text, _entries = context.materialize(
        fn_def, filename, program.globals_ns, program, root_id, "entry")
    program.entry_source = text
    fn.__doc__ = ast.get_docstring(sf.node)
    return fn


def vaccinate_source(source_text: str, name: str, globals_ns: dict | None = None, *,
                     program_id: str | None = None, decompose: bool = True,
                     options: RecoveryOptions | None = None,
                     origin: str = "<string>") -> Program:
    """Compile ``name`` out of ``source_text`` into a resumable program.

    ``globals_ns`` should be the module namespace the function expects; the
    generated code is executed against it so every global keeps resolving
    live.
    """
    sf = parse_function(source_text, name, origin)
    if globals_ns is None:
        globals_ns = {"__builtins__": __builtins__}
    pid = program_id or f"p{next(_prog_counter)}"
    program = Program(pid, sf, globals_ns, options or RecoveryOptions(), decompose)
    context.register_program(program)
    alloc, cells, meta, tree = build_generation(program, sf)
    program.alloc = alloc
    program.cells.update(cells)
    program.meta.update(meta)
    program.tree = tree
    program.entry = _build_entry(program, sf, alloc, tree.root)
    program.entry.__isr_program__ = program
    return program


def vaccinate(fn: Callable | None = None, *, decompose: bool = True,
              options: "RecoveryOptions | None" = None,
              script: Any = None, source: Any = None, interactive: str = "auto",
              max_retries: int = 8,
              allowed_commands: tuple = ("pass", "action", "surgery")):
    """Decorator form: replace a function with its vaccinated equivalent.

    Usable bare (``@vaccinate``) or with options (``@vaccinate(...)``),
    either as a prebuilt ``options=RecoveryOptions(...)`` or as the
    individual keywords. The replacement keeps the original signature,
    defaults, and docstring; the compiled program hangs off
    ``__isr_program__``.
    """

    def wrap(f: Callable) -> Callable:
        try:
            src = textwrap.dedent(inspect.getsource(f))
        except (OSError, TypeError) as exc:
            raise ParseError(f"cannot read source of {f!r}: {exc}") from exc
        opts = options if options is not None else RecoveryOptions(
            allowed_commands=tuple(allowed_commands),
            max_retries=max_retries,
            script=script,
            source=source,
            interactive=interactive,
        )
        try:
            filename = inspect.getsourcefile(f) or "<string>"
        except TypeError:
            filename = "<string>"
        program = vaccinate_source(
            src, f.__name__, f.__globals__, decompose=decompose,
            options=opts, origin=filename)
        entry = program.entry
        entry.__defaults__ = f.__defaults__
        entry.__kwdefaults__ = f.__kwdefaults__
        entry.__qualname__ = f.__qualname__
        entry.__module__ = f.__module__
        if f.__doc__:
            entry.__doc__ = f.__doc__
        return entry

    if fn is not None:
        return wrap(fn)
    return wrap


def decompose_preview(source_text: str, name: str, *, decompose: bool = True):
    """Decomposition only: the cell layout plus its full unparsed form.

    The second element is a module holding one def per cell (the entry's
    residue first). No variable redirection is applied, so each def is
    plain Python and can itself be fed back through here; the test suite
    uses that to check the transformation is a fixpoint.
    """
    sf = parse_function(source_text, name)
    entry_copy = copy.deepcopy(sf.node)
    for path, stmt in walk(entry_copy):
        stmt._isr_origin = path
    alloc = NameAllocator(_used_names(entry_copy))
    scopes = analyze_scopes(entry_copy)
    dec = Decomposer(entry_copy, alloc, scopes, decompose=decompose)
    plans = dec.run()
    meta = {}
    defs = []
    for plan in plans:
        meta[plan.cell_id] = CellCode(
            cell_id=plan.cell_id, origin=plan.path, block_kind=plan.block_kind,
            kind=_cell_kind(plan), params=(), scope_depth=plan.depth,
            orig_body=plan.orig_body)
        params = [alloc.act, alloc.ns] + [alloc.frame(k)
                                          for k in range(1, plan.depth + 1)]
        fn_def = ast.FunctionDef(
            name=f"__isr_cell_{plan.cell_id}__" if plan.node is not entry_copy
                 else name,
            args=ast.arguments(posonlyargs=[],
                               args=[ast.arg(arg=p) for p in params],
                               vararg=None, kwonlyargs=[], kw_defaults=[],
                               defaults=[], kwarg=None),
            body=plan.body if plan.node is not entry_copy else entry_copy.body,
            decorator_list=[], returns=None)
        defs.append((plan.cell_id, fn_def))
    root_id = next(p.cell_id for p in plans if p.node is entry_copy)
    _link_cells(meta, root_id)
    defs.sort(key=lambda item: item[0] != root_id)
    module = ast.Module(body=[d for _cid, d in defs], type_ignores=[])
    ast.fix_missing_locations(module)
    return CellTree(root_id, meta), ast.unparse(module)


def preview_tree_of(module_text: str) -> CellTree:
    """Rebuild the cell layout of a ``decompose_preview`` module.

    Each def is re-decomposed (asserting it stays a single cell) and edges
    are read off the barrier call sites, so a tree equal to the original
    proves the transformation is idempotent.
    """
    mod = ast.parse(textwrap.dedent(module_text))
    cell_defs: dict[str, ast.FunctionDef] = {}
    root_id = None
    root_name = None
    for node in mod.body:
        if not isinstance(node, ast.FunctionDef):
            continue
        m = re.fullmatch(r"__isr_cell_(\w+)__", node.name)
        if m:
            cell_defs[m.group(1)] = node
        elif root_name is None:
            root_name = node.name
            root_id = "c0"
            cell_defs["c0"] = node
    if root_id is None:
        raise ParseError("no entry def found in preview module")
    meta = {}
    for cid, fn_def in cell_defs.items():
        sub_tree, _text = decompose_preview(ast.unparse(fn_def), fn_def.name)
        if len(sub_tree) != 1:
            raise VaccinationError(
                f"cell {cid} decomposed further ({len(sub_tree)} cells); "
                "transformation is not a fixpoint")
        called = []
        for node in ast.walk(fn_def):
            if (isinstance(node, ast.Subscript)
                    and isinstance(node.value, ast.Attribute)
                    and node.value.attr == "cells"
                    and isinstance(node.slice, ast.Constant)):
                called.append(node.slice.value)
        meta[cid] = CellCode(cell_id=cid, origin=ROOT, block_kind="body",
                             kind="plain", params=(), scope_depth=0,
                             children=called)
    return CellTree(root_id, meta)
