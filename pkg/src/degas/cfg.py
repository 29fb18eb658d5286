"""Control-flow graph of a parsed program and its entry-to-exit paths."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

from .errors import NotOnPath, PathBudgetExceeded
from .frontend import Assign, Ast, If, Observe, RndAssign, Skip

__all__ = ["NodeKind", "CfgNode", "Cfg", "build_cfg", "enumerate_paths", "count_paths", "successor", "to_dot"]

DEFAULT_MAX_PATHS = 4096


class NodeKind(str, Enum):
    ENTRY = "entry"
    DET = "det"
    RND = "rnd"
    TEST = "test"
    OBSERVE = "observe"
    EXIT = "exit"


@dataclass(frozen=True)
class CfgNode:
    id: int
    kind: NodeKind
    arg: object = None
    # branch label, set only on the first node of each branch of a test
    cond: bool | None = None


@dataclass(frozen=True)
class Cfg:
    nodes: tuple[CfgNode, ...]
    children: tuple[tuple[int, ...], ...]
    var_names: tuple[str, ...]
    entry_id: int = 0
    exit_id: int = -1

    @property
    def n_vars(self) -> int:
        return len(self.var_names)

    def node(self, i: int) -> CfgNode:
        return self.nodes[i]

    def edges(self) -> set[tuple[int, int]]:
        return {(u, v) for u, cs in enumerate(self.children) for v in cs}


Path = tuple[int, ...]


def build_cfg(ast: Ast) -> Cfg:
    nodes: list[CfgNode] = []
    children: list[list[int]] = []

    def new(kind: NodeKind, arg, cond, tails: Sequence[int]) -> int:
        nid = len(nodes)
        nodes.append(CfgNode(nid, kind, arg, cond))
        children.append([])
        for t in tails:
            children[t].append(nid)
        return nid

    def seq(body, tails: list[int], cond: bool | None) -> list[int]:
        if not body and cond is not None:
            body = (Skip(),)
        for stmt in body:
            tails = emit(stmt, tails, cond)
            cond = None
        return tails

    def emit(stmt, tails, cond) -> list[int]:
        if isinstance(stmt, If):
            t = new(NodeKind.TEST, stmt.pred, cond, tails)
            return seq(stmt.then, [t], True) + seq(stmt.orelse, [t], False)
        if isinstance(stmt, RndAssign):
            kind = NodeKind.RND
        elif isinstance(stmt, Observe):
            kind = NodeKind.OBSERVE
        elif isinstance(stmt, (Assign, Skip)):
            kind = NodeKind.DET
        else:
            raise TypeError(f"unknown statement {stmt!r}")
        return [new(kind, stmt, cond, tails)]

    entry = new(NodeKind.ENTRY, None, None, [])
    tails = seq(ast.body, [entry], None)
    exit_id = new(NodeKind.EXIT, None, None, tails)
    return Cfg(tuple(nodes), tuple(tuple(c) for c in children), tuple(ast.var_names), entry, exit_id)


def count_paths(cfg: Cfg) -> int:
    """Number of entry-to-exit paths (node ids are topologically ordered)."""
    counts = [0] * len(cfg.nodes)
    counts[cfg.exit_id] = 1
    for u in range(len(cfg.nodes) - 1, -1, -1):
        if u != cfg.exit_id:
            counts[u] = sum(counts[v] for v in cfg.children[u])
    return counts[cfg.entry_id]


def enumerate_paths(cfg: Cfg, max_paths: int = DEFAULT_MAX_PATHS) -> list[Path]:
    """All paths in depth-first, true-branch-first order."""
    total = count_paths(cfg)
    if total > max_paths:
        raise PathBudgetExceeded(total, max_paths)
    paths: list[Path] = []
    stack: list[tuple[int, Path]] = [(cfg.entry_id, (cfg.entry_id,))]
    while stack:
        u, trail = stack.pop()
        if u == cfg.exit_id:
            paths.append(trail)
            continue
        for v in reversed(cfg.children[u]):
            stack.append((v, trail + (v,)))
    return paths


def successor(path: Sequence[int], node_id: int) -> int:
    try:
        k = list(path).index(node_id)
    except ValueError:
        raise NotOnPath(f"node {node_id} is not on the path") from None
    if k + 1 >= len(path):
        raise NotOnPath(f"node {node_id} is the exit node")
    return path[k + 1]


def _label(node: CfgNode) -> str:
    from .frontend import _expr, _pred, _real

    arg = node.arg
    if node.kind == NodeKind.TEST or (node.kind == NodeKind.OBSERVE and arg is not None):
        pred = arg if node.kind == NodeKind.TEST else arg.pred
        text = _pred(pred)
    elif isinstance(arg, Assign):
        text = f"{arg.var} = {_expr(arg.expr)}"
    elif isinstance(arg, RndAssign):
        text = f"{arg.var} = gm(" + "; ".join(", ".join(_real(r) for r in xs) for xs in (arg.weights, arg.means, arg.stds)) + ")"
    elif isinstance(arg, Skip):
        text = "skip"
    else:
        text = ""
    return f"{node.id}: {node.kind.value}" + (f"\\n{text}" if text else "")


def to_dot(cfg: Cfg) -> str:
    lines = ["digraph cfg {", "  node [shape=box, fontname=monospace];"]
    for node in cfg.nodes:
        label = _label(node).replace('"', '\\"')
        lines.append(f'  n{node.id} [label="{label}"];')
    for u, cs in enumerate(cfg.children):
        for v in cs:
            cond = cfg.nodes[v].cond
            attr = f' [label="{str(cond).lower()}"]' if cond is not None else ""
            lines.append(f"  n{u} -> n{v}{attr};")
    lines.append("}")
    return "\n".join(lines) + "\n"
