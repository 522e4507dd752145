"""Statement-level model of a function's source.

Everything downstream (decomposition, crash mapping, diffing, resume
synthesis) addresses statements through :class:`StatementPath`, a sequence of
``(block-kind, index)`` steps rooted at a function's body. Paths are stable
under reformatting because they are derived from the AST, not from line
numbers.
"""

from __future__ import annotations

import ast
import difflib
from dataclasses import dataclass, field
from typing import Iterator, Literal, Sequence

from .errors import EmptyDiff, FunctionNotFound, ParseError

BlockKind = Literal["body", "loop-body", "branch-then", "branch-else", "handler", "final"]

# Ordered block fields per compound statement type. ``handler`` steps select
# an ExceptHandler node and must be followed by a ``body`` step into it.
_BLOCK_FIELDS: dict[type, tuple[tuple[str, str], ...]] = {
    ast.FunctionDef: (("body", "body"),),
    ast.AsyncFunctionDef: (("body", "body"),),
    ast.ClassDef: (("body", "body"),),
    ast.If: (("body", "branch-then"), ("orelse", "branch-else")),
    ast.For: (("body", "loop-body"), ("orelse", "branch-else")),
    ast.AsyncFor: (("body", "loop-body"), ("orelse", "branch-else")),
    ast.While: (("body", "loop-body"), ("orelse", "branch-else")),
    ast.With: (("body", "body"),),
    ast.AsyncWith: (("body", "body"),),
    ast.Try: (("body", "body"), ("handler", "handler"), ("orelse", "branch-else"), ("finalbody", "final")),
}

_KIND_TO_FIELD = {
    "body": "body",
    "loop-body": "body",
    "branch-then": "body",
    "branch-else": "orelse",
    "final": "finalbody",
}


@dataclass(frozen=True, order=True)
class StatementPath:
    """Address of one statement inside a function body."""

    steps: tuple[tuple[str, int], ...]

    def child(self, kind: str, index: int) -> "StatementPath":
        return StatementPath(self.steps + ((kind, index),))

    @property
    def parent(self) -> "StatementPath":
        return StatementPath(self.steps[:-1])

    @property
    def depth(self) -> int:
        return len(self.steps)

    def __iter__(self) -> Iterator[tuple[str, int]]:
        return iter(self.steps)

    def __str__(self) -> str:
        return "/".join(f"{k}[{i}]" for k, i in self.steps) or "<root>"

    def to_json(self) -> list[list]:
        return [[k, i] for k, i in self.steps]

    @classmethod
    def from_json(cls, data: Sequence[Sequence]) -> "StatementPath":
        return cls(tuple((str(k), int(i)) for k, i in data))


ROOT = StatementPath(())


@dataclass(frozen=True)
class SourceFunction:
    """A parsed function definition plus where it came from."""

    name: str
    params: tuple[str, ...]
    node: ast.FunctionDef
    source_text: str
    origin: str = "<string>"

    @property
    def body(self) -> list[ast.stmt]:
        return self.node.body


@dataclass(frozen=True)
class DiffEdit:
    """One statement-level change.

    ``path`` is the edit's canonical address: new-function coordinates for
    ``added``/``modified``, old-function coordinates for ``removed`` (the
    position the statement used to occupy).
    """

    kind: Literal["added", "removed", "modified"]
    path: StatementPath
    old_path: StatementPath | None = None
    new_path: StatementPath | None = None
    old_node: ast.stmt | None = field(default=None, repr=False, compare=False)
    new_node: ast.stmt | None = field(default=None, repr=False, compare=False)


@dataclass(frozen=True)
class CodeDiff:
    """Statement-level edits between two versions of one function.

    ``edits`` are in program order (pre-order walk, old and new interleaved
    by alignment). ``pairs`` maps every aligned old statement path to its new
    path, including statements inside recursed compound bodies; it is what
    live stack frames use to find themselves in the new function.
    """

    edits: tuple[DiffEdit, ...]
    pairs: tuple[tuple[StatementPath, StatementPath], ...] = ()

    def __bool__(self) -> bool:
        return bool(self.edits)

    @property
    def old_to_new(self) -> dict[StatementPath, StatementPath]:
        return dict(self.pairs)


def blocks_of(node: ast.stmt | ast.FunctionDef) -> list[tuple[str, str, list]]:
    """Yield ``(kind, field, stmt_list)`` for each block a node owns, in order.

    ``handler`` entries return the handler's body list; the path step for a
    statement inside handler ``j`` is ``(handler, j)`` followed by
    ``(body, k)``.
    """
    fields = _BLOCK_FIELDS.get(type(node))
    if fields is None:
        return []
    out = []
    for fname, kind in fields:
        if kind == "handler":
            continue
        stmts = getattr(node, fname, None)
        if stmts:
            out.append((kind, fname, stmts))
    return out


def resolve(func: ast.FunctionDef, path: StatementPath) -> ast.stmt:
    """Return the statement addressed by ``path`` inside ``func``."""
    node: ast.AST = func
    steps = list(path.steps)
    i = 0
    while i < len(steps):
        kind, idx = steps[i]
        if kind == "handler":
            if not isinstance(node, ast.Try) or idx >= len(node.handlers):
                raise LookupError(f"no handler[{idx}] under {path}")
            node = node.handlers[idx]
            i += 1
            if i >= len(steps):
                raise LookupError(f"path {path} ends on a handler, not a statement")
            kind2, idx2 = steps[i]
            if kind2 != "body" or idx2 >= len(node.body):
                raise LookupError(f"bad handler step in {path}")
            node = node.body[idx2]
            i += 1
            continue
        fname = _KIND_TO_FIELD[kind]
        stmts = getattr(node, fname, None)
        if stmts is None or idx >= len(stmts):
            raise LookupError(f"path {path} does not exist (at step {i})")
        node = stmts[idx]
        i += 1
    if isinstance(node, ast.FunctionDef) and node is func:
        raise LookupError("empty path addresses the function, not a statement")
    return node  # type: ignore[return-value]


def walk(func: ast.FunctionDef) -> Iterator[tuple[StatementPath, ast.stmt]]:
    """Pre-order walk of every statement in ``func``, with its path.

    The iteration order defines program order for path comparisons.
    """
    yield from _walk_block(func.body, ROOT, "body")


def _walk_block(stmts: list[ast.stmt], base: StatementPath, kind: str) -> Iterator:
    for i, stmt in enumerate(stmts):
        path = base.child(kind, i)
        yield path, stmt
        if isinstance(stmt, ast.Try):
            # textual order: body, handlers, else, finally
            yield from _walk_block(stmt.body, path, "body")
            for j, handler in enumerate(stmt.handlers):
                yield from _walk_block(handler.body, path.child("handler", j), "body")
            yield from _walk_block(stmt.orelse, path, "branch-else")
            yield from _walk_block(stmt.finalbody, path, "final")
            continue
        for bkind, _fname, sub in blocks_of(stmt):
            yield from _walk_block(sub, path, bkind)


def order_index(func: ast.FunctionDef) -> dict[StatementPath, int]:
    """Map every statement path in ``func`` to its program-order ordinal."""
    return {path: i for i, (path, _stmt) in enumerate(walk(func))}


_ARTIFACT_DECORATORS = frozenset({"vaccinate", "vaccinated"})


def _decorator_root(expr: ast.expr) -> str | None:
    # peel calls and attribute chains down to the final attribute/name
    node = expr
    if isinstance(node, ast.Call):
        node = node.func
    if isinstance(node, ast.Attribute):
        return node.attr
    if isinstance(node, ast.Name):
        return node.id
    return None


def parse_function(source_text: str, name: str, origin: str = "<string>") -> SourceFunction:
    """Parse ``source_text`` and extract the function definition ``name``.

    Module-level and nested definitions are both found (outermost match
    wins). Decorators belonging to this package are stripped so a function
    grabbed via ``inspect.getsource`` does not re-wrap itself; all other
    decorators are rejected because the rewritten function could not
    reproduce their wrapping.
    """
    try:
        module = ast.parse(source_text)
    except SyntaxError as exc:
        raise ParseError(f"cannot parse {origin}: {exc}") from exc

    target: ast.FunctionDef | None = None
    for node in ast.walk(module):
        if isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef)) and node.name == name:
            target = node  # type: ignore[assignment]
            break
    if target is None:
        raise FunctionNotFound(f"no function named {name!r} in {origin}")
    if isinstance(target, ast.AsyncFunctionDef):
        raise ParseError(f"{name!r} is async; only plain functions are supported")

    kept = []
    for deco in target.decorator_list:
        if _decorator_root(deco) in _ARTIFACT_DECORATORS:
            continue
        kept.append(deco)
    if kept:
        names = ", ".join(ast.unparse(d) for d in kept)
        raise ParseError(f"{name!r} carries unsupported decorators: {names}")
    target.decorator_list = []

    args = target.args
    params = [a.arg for a in args.posonlyargs + args.args]
    if args.vararg:
        params.append(args.vararg.arg)
    params += [a.arg for a in args.kwonlyargs]
    if args.kwarg:
        params.append(args.kwarg.arg)

    return SourceFunction(
        name=name,
        params=tuple(params),
        node=target,
        source_text=source_text,
        origin=origin,
    )


def _struct_key(stmt: ast.stmt) -> str:
    # formatting-insensitive, literal- and identifier-sensitive
    return ast.dump(stmt, include_attributes=False)


def _same_header(old: ast.stmt, new: ast.stmt) -> bool:
    """True when two compound statements differ only inside their blocks."""
    if type(old) is not type(new):
        return False
    if isinstance(old, (ast.For, ast.AsyncFor)):
        return ast.dump(old.target) == ast.dump(new.target) and ast.dump(old.iter) == ast.dump(new.iter)
    if isinstance(old, ast.While):
        return ast.dump(old.test) == ast.dump(new.test)
    if isinstance(old, ast.If):
        return ast.dump(old.test) == ast.dump(new.test)
    if isinstance(old, (ast.With, ast.AsyncWith)):
        return all(
            ast.dump(a) == ast.dump(b) for a, b in zip(old.items, new.items)
        ) and len(old.items) == len(new.items)
    if isinstance(old, ast.Try):
        return True
    if isinstance(old, ast.FunctionDef):
        return (
            old.name == new.name
            and ast.dump(old.args) == ast.dump(new.args)
            and len(old.decorator_list) == len(new.decorator_list)
            and all(ast.dump(a) == ast.dump(b) for a, b in zip(old.decorator_list, new.decorator_list))
        )
    return False


def diff_functions(old: SourceFunction | ast.FunctionDef, new: SourceFunction | ast.FunctionDef) -> CodeDiff:
    """Compute statement-level edits turning ``old`` into ``new``.

    Blocks are aligned with :class:`difflib.SequenceMatcher` over structural
    keys; compound statements whose headers survive are recursed into rather
    than reported wholesale, so an edit inside a loop body does not mark the
    loop itself as modified.
    """
    old_fn = old.node if isinstance(old, SourceFunction) else old
    new_fn = new.node if isinstance(new, SourceFunction) else new
    edits: list[DiffEdit] = []
    pairs: list[tuple[StatementPath, StatementPath]] = []
    _diff_block(old_fn.body, new_fn.body, ROOT, ROOT, "body", edits, pairs)
    return CodeDiff(edits=tuple(edits), pairs=tuple(pairs))


def _diff_block(old_stmts, new_stmts, old_base, new_base, kind, edits, pairs) -> None:
    old_keys = [_struct_key(s) for s in old_stmts]
    new_keys = [_struct_key(s) for s in new_stmts]
    matcher = difflib.SequenceMatcher(None, old_keys, new_keys, autojunk=False)
    for tag, i1, i2, j1, j2 in matcher.get_opcodes():
        if tag == "equal":
            for off in range(i2 - i1):
                _pair_subtree(
                    old_stmts[i1 + off],
                    old_base.child(kind, i1 + off),
                    new_base.child(kind, j1 + off),
                    pairs,
                )
            continue
        if tag == "delete":
            for i in range(i1, i2):
                edits.append(DiffEdit("removed", old_base.child(kind, i),
                                      old_path=old_base.child(kind, i), old_node=old_stmts[i]))
            continue
        if tag == "insert":
            for j in range(j1, j2):
                edits.append(DiffEdit("added", new_base.child(kind, j),
                                      new_path=new_base.child(kind, j), new_node=new_stmts[j]))
            continue
        # replace: pair up positionally, recurse where headers survive
        n = min(i2 - i1, j2 - j1)
        for off in range(n):
            o, nw = old_stmts[i1 + off], new_stmts[j1 + off]
            op, np_ = old_base.child(kind, i1 + off), new_base.child(kind, j1 + off)
            pairs.append((op, np_))
            if _same_header(o, nw):
                _diff_children(o, nw, op, np_, edits, pairs)
            else:
                edits.append(DiffEdit("modified", np_, old_path=op, new_path=np_,
                                      old_node=o, new_node=nw))
        for i in range(i1 + n, i2):
            edits.append(DiffEdit("removed", old_base.child(kind, i),
                                  old_path=old_base.child(kind, i), old_node=old_stmts[i]))
        for j in range(j1 + n, j2):
            edits.append(DiffEdit("added", new_base.child(kind, j),
                                  new_path=new_base.child(kind, j), new_node=new_stmts[j]))


def _diff_children(old, new, old_path, new_path, edits, pairs) -> None:
    if isinstance(old, ast.Try) and isinstance(new, ast.Try):
        clauses_ok = len(old.handlers) == len(new.handlers) and all(
            (oh.type is None) == (nh.type is None)
            and (oh.type is None or ast.dump(oh.type) == ast.dump(nh.type))
            for oh, nh in zip(old.handlers, new.handlers)
        )
        if not clauses_ok:
            # except clauses changed: report the whole try as one edit
            edits.append(DiffEdit("modified", new_path, old_path=old_path,
                                  new_path=new_path, old_node=old, new_node=new))
            return
    if isinstance(old, ast.Try) and isinstance(new, ast.Try):
        _diff_block(old.body, new.body, old_path, new_path, "body", edits, pairs)
        for j, (oh, nh) in enumerate(zip(old.handlers, new.handlers)):
            _diff_block(oh.body, nh.body, old_path.child("handler", j),
                        new_path.child("handler", j), "body", edits, pairs)
        _diff_block(old.orelse, new.orelse, old_path, new_path, "branch-else", edits, pairs)
        _diff_block(old.finalbody, new.finalbody, old_path, new_path, "final", edits, pairs)
        return
    old_blocks = {bk: sub for bk, _f, sub in blocks_of(old)}
    new_blocks = {bk: sub for bk, _f, sub in blocks_of(new)}
    for bk in ("body", "loop-body", "branch-then", "branch-else", "final"):
        os_, ns_ = old_blocks.get(bk, []), new_blocks.get(bk, [])
        if os_ or ns_:
            _diff_block(os_, ns_, old_path, new_path, bk, edits, pairs)


def _pair_subtree(stmt, old_path, new_path, pairs) -> None:
    pairs.append((old_path, new_path))
    for bk, _f, sub in blocks_of(stmt):
        for i, s in enumerate(sub):
            _pair_subtree(s, old_path.child(bk, i), new_path.child(bk, i), pairs)
    if isinstance(stmt, ast.Try):
        for j, handler in enumerate(stmt.handlers):
            for k, s in enumerate(handler.body):
                _pair_subtree(s, old_path.child("handler", j).child("body", k),
                              new_path.child("handler", j).child("body", k), pairs)


def first_modified_location(diff: CodeDiff, func: ast.FunctionDef | SourceFunction) -> StatementPath:
    """Earliest edit in program order; ``func`` must be the new version.

    Added and modified edits are ranked by their position in the new
    function. A removed edit is ranked where its old neighbourhood lands in
    the new function: the aligned statement that follows it, or the end of
    its block when nothing does.
    """
    if not diff.edits:
        raise EmptyDiff("diff has no edits")
    fn = func.node if isinstance(func, SourceFunction) else func
    ordinals = order_index(fn)
    old_to_new = diff.old_to_new

    def rank(edit: DiffEdit) -> tuple[int, int]:
        if edit.kind in ("added", "modified"):
            return (ordinals.get(edit.path, len(ordinals)), 0)
        # removed: successor's new position, biased to sort before it
        base, (k, i) = edit.path.parent, edit.path.steps[-1]
        j = i + 1
        while True:
            succ = old_to_new.get(base.child(k, j))
            if succ is not None:
                return (ordinals.get(succ, len(ordinals)), -1)
            j += 1
            if j > i + 4096:
                return (len(ordinals), -1)

    best = min(diff.edits, key=rank)
    if best.kind in ("added", "modified"):
        return best.path
    base, (k, i) = best.path.parent, best.path.steps[-1]
    succ = old_to_new.get(base.child(k, i + 1))
    if succ is not None:
        return succ
    mapped_base = old_to_new.get(base)
    return (mapped_base or base).child(k, i)
